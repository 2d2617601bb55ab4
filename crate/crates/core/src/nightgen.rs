//! Parametric day-to-night image transform and translation-faithfulness
//! metrics (pixel L2, PSNR, SSIM).
//!
//! The transform applies, in fixed order: per-channel gamma, brightness
//! scale, color-temperature shift, seeded additive light blooms, seeded
//! Gaussian noise, clamp to [0, 1]. The order is fixed so transformed
//! outputs are reproducible fixtures.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{RasterError, RasterImage};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum NightgenError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("night param out of range: {0}")]
    ParamRange(String),
    #[error("image {0}x{1} too small for an 11x11 SSIM window")]
    TooSmall(usize, usize),
}

/// Parameters of the night-style transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NightParams {
    /// Per-channel gamma exponent, > 0.
    pub gamma: f32,
    /// Global brightness multiplier in (0, 1].
    pub brightness: f32,
    /// Blue-orange channel bias in [-1, 1]; negative shifts toward blue.
    pub temp_shift: f32,
    /// Number of additive light blooms.
    pub bloom_count: u32,
    /// Peak bloom amplitude in [0, 1].
    pub bloom_intensity: f32,
    /// Standard deviation of additive Gaussian noise, >= 0.
    pub noise_sigma: f32,
    /// Seed for bloom placement and noise.
    pub seed: u64,
}

impl Default for NightParams {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            brightness: 0.35,
            temp_shift: -0.25,
            bloom_count: 3,
            bloom_intensity: 0.6,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl NightParams {
    /// Identity transform: output equals input bit-for-bit.
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            brightness: 1.0,
            temp_shift: 0.0,
            bloom_count: 0,
            bloom_intensity: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NightgenError> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(NightgenError::ParamRange(format!("gamma {}", self.gamma)));
        }
        if !(self.brightness > 0.0 && self.brightness <= 1.0) {
            return Err(NightgenError::ParamRange(format!(
                "brightness {}",
                self.brightness
            )));
        }
        if !(-1.0..=1.0).contains(&self.temp_shift) {
            return Err(NightgenError::ParamRange(format!(
                "temp_shift {}",
                self.temp_shift
            )));
        }
        if !(0.0..=1.0).contains(&self.bloom_intensity) {
            return Err(NightgenError::ParamRange(format!(
                "bloom_intensity {}",
                self.bloom_intensity
            )));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(NightgenError::ParamRange(format!(
                "noise_sigma {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Warm-white bloom color.
const BLOOM_RGB: [f32; 3] = [1.0, 0.85, 0.6];

/// Apply the night-style transform. Deterministic given `(img, p)`.
///
/// Panics if `p` violates its declared ranges; validate configs at the
/// boundary with [`NightParams::validate`].
pub fn night_transform(img: &RasterImage, p: &NightParams) -> RasterImage {
    p.validate().expect("night params within declared ranges");
    let (h, w) = (img.height(), img.width());
    let mut px: Vec<f32> = img.pixels().to_vec();

    if p.gamma != 1.0 {
        for v in px.iter_mut() {
            *v = v.powf(p.gamma);
        }
    }
    if p.brightness != 1.0 {
        for v in px.iter_mut() {
            *v *= p.brightness;
        }
    }
    if p.temp_shift != 0.0 {
        let gain_r = 1.0 + 0.5 * p.temp_shift;
        let gain_b = 1.0 - 0.5 * p.temp_shift;
        for rgb in px.chunks_exact_mut(3) {
            rgb[0] *= gain_r;
            rgb[2] *= gain_b;
        }
    }
    if p.bloom_count > 0 && p.bloom_intensity > 0.0 {
        let mut rng = rng_for(p.seed, "bloom");
        let min_side = h.min(w) as f32;
        for _ in 0..p.bloom_count {
            let cx = rng.random_range(0.0..w as f32);
            let cy = rng.random_range(0.0..h as f32);
            let sigma = rng.random_range(min_side / 16.0..min_side / 6.0);
            let amp = p.bloom_intensity * rng.random_range(0.5..1.0);
            let inv = 1.0 / (2.0 * sigma * sigma);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let g = amp * (-d2 * inv).exp();
                    let base = (y * w + x) * 3;
                    for c in 0..3 {
                        px[base + c] += g * BLOOM_RGB[c];
                    }
                }
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let mut rng = rng_for(p.seed, "noise");
        let normal = Normal::new(0.0f32, p.noise_sigma).expect("sigma validated");
        for v in px.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    RasterImage::new(h, w, px).expect("transform preserves dimensions and range")
}

/// Root-mean-square pixel difference on the 0-255 scale.
pub fn pixel_l2(a: &RasterImage, b: &RasterImage) -> Result<f64, NightgenError> {
    a.same_dims(b)?;
    let n = a.pixels().len() as f64;
    let sum_sq: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = 255.0 * (f64::from(x) - f64::from(y));
            d * d
        })
        .sum();
    Ok((sum_sq / n).sqrt())
}

/// Peak signal-to-noise ratio in decibels with MAX = 1.0; capped at 99 dB
/// when the mean squared error drops below 1e-10.
pub fn psnr_db(a: &RasterImage, b: &RasterImage) -> Result<f64, NightgenError> {
    a.same_dims(b)?;
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode convolution with the same 1-D kernel along both
/// axes. Input H x W, output (H-10) x (W-10).
fn conv_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    // Horizontal pass: H x WO.
    let mut horiz = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            horiz[y * wo + x] = acc;
        }
    }
    // Vertical pass: HO x WO.
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * horiz[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, luminance range 1.0, computed per channel over
/// valid windows and averaged across channels.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64, NightgenError> {
    a.same_dims(b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(NightgenError::TooSmall(h, w));
    }
    let kernel = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.pixels().iter().skip(ch).step_by(3).map(|&v| f64::from(v)).collect();
        let pb: Vec<f64> = b.pixels().iter().skip(ch).step_by(3).map(|&v| f64::from(v)).collect();
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();

        let mu_a = conv_valid(&pa, h, w, &kernel);
        let mu_b = conv_valid(&pb, h, w, &kernel);
        let e_sq_a = conv_valid(&sq_a, h, w, &kernel);
        let e_sq_b = conv_valid(&sq_b, h, w, &kernel);
        let e_ab = conv_valid(&ab, h, w, &kernel);

        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_sq_a[i] - ma * ma;
            let var_b = e_sq_b[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}
