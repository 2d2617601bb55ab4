//! Small trainable embedding network with exact reverse-mode gradients:
//! patchify -> linear features -> rectifier -> GeM pooling -> linear
//! projection -> L2 normalization.
//!
//! Parameters are stored as f32 (matching the checkpoint blob format); all
//! forward/backward arithmetic runs in f64 so analytic gradients survive
//! finite-difference verification at 1e-4 relative tolerance.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RasterImage;
use crate::seed::rng_for;

/// Features entering GeM pooling are clamped to at least this value, so the
/// power map stays differentiable at zero activations.
pub const GEM_EPS: f64 = 1e-6;

const DESCRIPTOR_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {h}x{w} not divisible by patch size {patch}")]
    PatchMismatch { h: usize, w: usize, patch: usize },
    #[error("GeM power must be positive, got {0}")]
    NonPositiveP(f64),
    #[error("feature matrix length {len} is not rows x {dim}")]
    FeatureShape { len: usize, dim: usize },
    #[error("parameter tensor {name} has length {got}, expected {expected}")]
    TensorShape {
        name: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("descriptor norm {0} is not unit within 1e-5")]
    NotUnitNorm(f64),
    #[error("projection output collapsed to zero norm")]
    NormUnderflow,
    #[error("upstream gradient has length {got}, expected {expected}")]
    UpstreamShape { got: usize, expected: usize },
}

/// Architecture hyperparameters (tensor dimensions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub feat_dim: usize,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            feat_dim: 64,
            out_dim: 64,
        }
    }
}

/// Trainable weights. Tensor layout is row-major: `w1[r * feat_dim + f]`
/// maps patch component `r` to feature `f`; `w2[f * out_dim + o]` maps
/// feature `f` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    patch_size: usize,
    feat_dim: usize,
    out_dim: usize,
    pub(crate) w1: Vec<f32>,
    pub(crate) b1: Vec<f32>,
    pub(crate) gem_p: f32,
    pub(crate) w2: Vec<f32>,
    pub(crate) b2: Vec<f32>,
}

impl EncoderParams {
    /// Seeded init: weights uniform in +-1/sqrt(fan_in), biases zero,
    /// GeM power 3.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let bound1 = 1.0 / (patch_dim as f32).sqrt();
        let bound2 = 1.0 / (cfg.feat_dim as f32).sqrt();
        let mut rng1 = rng_for(seed, "encoder-w1");
        let w1 = (0..patch_dim * cfg.feat_dim)
            .map(|_| rng1.random_range(-bound1..bound1))
            .collect();
        let mut rng2 = rng_for(seed, "encoder-w2");
        let w2 = (0..cfg.feat_dim * cfg.out_dim)
            .map(|_| rng2.random_range(-bound2..bound2))
            .collect();
        Self {
            patch_size: cfg.patch_size,
            feat_dim: cfg.feat_dim,
            out_dim: cfg.out_dim,
            w1,
            b1: vec![0.0; cfg.feat_dim],
            gem_p: 3.0,
            w2,
            b2: vec![0.0; cfg.out_dim],
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            feat_dim: self.feat_dim,
            out_dim: self.out_dim,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn gem_p(&self) -> f32 {
        self.gem_p
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + 1 + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flatten in declared tensor order: w1, b1, gem_p, w2, b2. This is the
    /// checkpoint blob order.
    pub fn to_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.push(self.gem_p);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }

    /// Rebuild from the flat layout produced by [`Self::to_flat`].
    pub fn from_flat(cfg: EncoderConfig, flat: &[f32]) -> Result<Self, EncoderError> {
        let patch_dim = 3 * cfg.patch_size * cfg.patch_size;
        let expected =
            patch_dim * cfg.feat_dim + cfg.feat_dim + 1 + cfg.feat_dim * cfg.out_dim + cfg.out_dim;
        if flat.len() != expected {
            return Err(EncoderError::TensorShape {
                name: "flat",
                got: flat.len(),
                expected,
            });
        }
        let mut it = flat.iter().copied();
        let w1: Vec<f32> = it.by_ref().take(patch_dim * cfg.feat_dim).collect();
        let b1: Vec<f32> = it.by_ref().take(cfg.feat_dim).collect();
        let gem_p = it.next().expect("length checked");
        let w2: Vec<f32> = it.by_ref().take(cfg.feat_dim * cfg.out_dim).collect();
        let b2: Vec<f32> = it.collect();
        if !(gem_p > 0.0) {
            return Err(EncoderError::NonPositiveP(f64::from(gem_p)));
        }
        Ok(Self {
            patch_size: cfg.patch_size,
            feat_dim: cfg.feat_dim,
            out_dim: cfg.out_dim,
            w1,
            b1,
            gem_p,
            w2,
            b2,
        })
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    pub fn from_unit(values: Vec<f64>) -> Result<Self, EncoderError> {
        let norm = l2_norm(&values);
        // Negated form also rejects NaN norms.
        if !((norm - 1.0).abs() <= DESCRIPTOR_NORM_TOL) {
            return Err(EncoderError::NotUnitNorm(norm));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn cosine(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-dimension generalized mean over rows: `(mean of clamped x^p)^(1/p)`.
/// Inputs are clamped to at least [`GEM_EPS`] before pooling.
pub fn gem_pool(features: &[f64], dim: usize, p: f64) -> Result<Vec<f64>, EncoderError> {
    if !(p > 0.0) {
        return Err(EncoderError::NonPositiveP(p));
    }
    if dim == 0 || features.is_empty() || features.len() % dim != 0 {
        return Err(EncoderError::FeatureShape {
            len: features.len(),
            dim,
        });
    }
    let rows = features.len() / dim;
    let mut out = vec![0.0; dim];
    for r in 0..rows {
        for (d, o) in out.iter_mut().enumerate() {
            *o += features[r * dim + d].max(GEM_EPS).powf(p);
        }
    }
    for o in out.iter_mut() {
        *o = (*o / rows as f64).powf(1.0 / p);
    }
    Ok(out)
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Patch matrix, `m x patch_dim`, row-major.
    patches: Vec<f64>,
    /// Number of patches.
    m: usize,
    /// Pre-activation linear features, `m x feat_dim`.
    pre_act: Vec<f64>,
    /// Rectified and clamped features, `m x feat_dim`.
    clamped: Vec<f64>,
    /// `clamped^p`, reused by the GeM backward.
    pow_c: Vec<f64>,
    /// GeM-pooled features, `feat_dim`.
    gem: Vec<f64>,
    /// Norm of the projection output, before normalization.
    norm: f64,
    /// Normalized descriptor values, `out_dim`.
    descriptor: Vec<f64>,
}

impl ForwardTrace {
    pub fn descriptor(&self) -> Result<Descriptor, EncoderError> {
        Descriptor::from_unit(self.descriptor.clone())
    }

    pub fn descriptor_values(&self) -> &[f64] {
        &self.descriptor
    }

    /// Smallest |pre-activation|. Finite-difference oracles are only valid
    /// away from the rectifier kink; callers can skip seeds where this is
    /// tiny.
    pub fn min_abs_pre_activation(&self) -> f64 {
        self.pre_act
            .iter()
            .fold(f64::INFINITY, |acc, &a| acc.min(a.abs()))
    }
}

fn extract_patches(img: &RasterImage, patch: usize) -> Result<(Vec<f64>, usize), EncoderError> {
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(EncoderError::PatchMismatch { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let patch_dim = 3 * patch * patch;
    let m = gh * gw;
    let mut patches = Vec::with_capacity(m * patch_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        patches.push(f64::from(img.get(gy * patch + py, gx * patch + px, c)));
                    }
                }
            }
        }
    }
    Ok((patches, m))
}

/// Run the network and keep intermediates for backprop.
pub fn forward_trace(
    img: &RasterImage,
    params: &EncoderParams,
) -> Result<ForwardTrace, EncoderError> {
    let (patches, m) = extract_patches(img, params.patch_size)?;
    let patch_dim = params.patch_dim();
    let (fd, od) = (params.feat_dim, params.out_dim);
    let p = f64::from(params.gem_p);
    if !(p > 0.0) {
        return Err(EncoderError::NonPositiveP(p));
    }

    // Linear features + rectifier + clamp.
    let mut pre_act = vec![0.0; m * fd];
    for k in 0..m {
        let row = &patches[k * patch_dim..(k + 1) * patch_dim];
        let out = &mut pre_act[k * fd..(k + 1) * fd];
        for (f, o) in out.iter_mut().enumerate() {
            *o = f64::from(params.b1[f]);
        }
        for (r, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wrow = &params.w1[r * fd..(r + 1) * fd];
            for (f, o) in out.iter_mut().enumerate() {
                *o += x * f64::from(wrow[f]);
            }
        }
    }
    let clamped: Vec<f64> = pre_act.iter().map(|&a| a.max(0.0).max(GEM_EPS)).collect();

    // GeM pooling.
    let pow_c: Vec<f64> = clamped.iter().map(|&c| c.powf(p)).collect();
    let mut gem = vec![0.0; fd];
    for k in 0..m {
        for (f, g) in gem.iter_mut().enumerate() {
            *g += pow_c[k * fd + f];
        }
    }
    for g in gem.iter_mut() {
        *g = (*g / m as f64).powf(1.0 / p);
    }

    // Projection + normalization.
    let mut pre_norm: Vec<f64> = params.b2.iter().map(|&b| f64::from(b)).collect();
    for (f, &g) in gem.iter().enumerate() {
        let wrow = &params.w2[f * od..(f + 1) * od];
        for (o, y) in pre_norm.iter_mut().enumerate() {
            *y += g * f64::from(wrow[o]);
        }
    }
    let norm = l2_norm(&pre_norm);
    if norm < 1e-30 {
        return Err(EncoderError::NormUnderflow);
    }
    let descriptor: Vec<f64> = pre_norm.iter().map(|&y| y / norm).collect();

    Ok(ForwardTrace {
        patches,
        m,
        pre_act,
        clamped,
        pow_c,
        gem,
        norm,
        descriptor,
    })
}

/// Encode one image into a unit-norm descriptor. Deterministic.
pub fn forward(img: &RasterImage, params: &EncoderParams) -> Result<Descriptor, EncoderError> {
    forward_trace(img, params)?.descriptor()
}

/// Parameter-shaped gradients, accumulated in f64.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gem_p: f64,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros(params: &EncoderParams) -> Self {
        Self {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            gem_p: 0.0,
            w2: vec![0.0; params.w2.len()],
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn add_assign(&mut self, other: &EncoderGrads) {
        for (a, b) in self.w1.iter_mut().zip(&other.w1) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        self.gem_p += other.gem_p;
        for (a, b) in self.w2.iter_mut().zip(&other.w2) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    /// Flatten in the same order as [`EncoderParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w1.len() + self.b1.len() + 1 + self.w2.len() + self.b2.len());
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.push(self.gem_p);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Backpropagate an upstream gradient (w.r.t. the unit-norm descriptor)
/// through a stored trace.
pub fn backward_from_trace(
    trace: &ForwardTrace,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<EncoderGrads, EncoderError> {
    let (fd, od) = (params.feat_dim, params.out_dim);
    if upstream.len() != od {
        return Err(EncoderError::UpstreamShape {
            got: upstream.len(),
            expected: od,
        });
    }
    let p = f64::from(params.gem_p);
    let m = trace.m;
    let mf = m as f64;
    let patch_dim = params.patch_dim();
    let mut grads = EncoderGrads::zeros(params);

    // Through normalization: dy = (u - (x . u) x) / ||y||.
    let xu: f64 = trace
        .descriptor
        .iter()
        .zip(upstream)
        .map(|(x, u)| x * u)
        .sum();
    let dy: Vec<f64> = trace
        .descriptor
        .iter()
        .zip(upstream)
        .map(|(x, u)| (u - xu * x) / trace.norm)
        .collect();

    // Projection layer.
    grads.b2.copy_from_slice(&dy);
    let mut dg = vec![0.0; fd];
    for f in 0..fd {
        let wrow = &params.w2[f * od..(f + 1) * od];
        let g = trace.gem[f];
        let mut acc = 0.0;
        for o in 0..od {
            grads.w2[f * od + o] = g * dy[o];
            acc += f64::from(wrow[o]) * dy[o];
        }
        dg[f] = acc;
    }

    // GeM pooling, including d/dp.
    // g_f = A_f^(1/p) with A_f = mean_k c^p. Then
    //   dg/dc = (c/g)^(p-1) / m
    //   dg/dp = g * (-ln A / p^2 + mean(c^p ln c) / (p A)).
    let mut dc = vec![0.0; m * fd];
    let mut dp_total = 0.0;
    for f in 0..fd {
        let g = trace.gem[f];
        let mut a_mean = 0.0;
        let mut b_mean = 0.0;
        for k in 0..m {
            let idx = k * fd + f;
            let c = trace.clamped[idx];
            let cp = trace.pow_c[idx];
            a_mean += cp;
            b_mean += cp * c.ln();
            dc[idx] = dg[f] * (c / g).powf(p - 1.0) / mf;
        }
        a_mean /= mf;
        b_mean /= mf;
        dp_total += dg[f] * g * (-a_mean.ln() / (p * p) + b_mean / (p * a_mean));
    }
    grads.gem_p = dp_total;

    // Rectifier + clamp gate, then the first linear layer. The clamp floor
    // makes the gate a > GEM_EPS: below it the feature is constant.
    for k in 0..m {
        let patch = &trace.patches[k * patch_dim..(k + 1) * patch_dim];
        for f in 0..fd {
            let idx = k * fd + f;
            if trace.pre_act[idx] <= GEM_EPS {
                continue;
            }
            let da = dc[idx];
            if da == 0.0 {
                continue;
            }
            grads.b1[f] += da;
            for (r, &x) in patch.iter().enumerate() {
                if x != 0.0 {
                    grads.w1[r * fd + f] += x * da;
                }
            }
        }
    }

    Ok(grads)
}

/// Exact reverse-mode gradients of `upstream . forward(img, params)` with
/// respect to every parameter tensor.
pub fn backward(
    img: &RasterImage,
    params: &EncoderParams,
    upstream: &[f64],
) -> Result<EncoderGrads, EncoderError> {
    let trace = forward_trace(img, params)?;
    backward_from_trace(&trace, params, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> RasterImage {
        let mut rng = rng_for(seed, "enc-test-image");
        RasterImage::from_fn(h, w, |_, _| {
            [
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.0..=1.0),
            ]
        })
        .unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            feat_dim: 8,
            out_dim: 6,
        }
    }

    #[test]
    fn gem_p1_is_arithmetic_mean() {
        let got = gem_pool(&[1.0, 3.0], 1, 1.0).unwrap();
        assert!((got[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gem_constant_feature_is_identity() {
        for &p in &[0.5, 1.0, 3.0, 7.0] {
            let got = gem_pool(&[0.37, 0.37, 0.37, 0.37], 2, p).unwrap();
            assert!((got[0] - 0.37).abs() < 1e-12, "p={p}: {}", got[0]);
            assert!((got[1] - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn gem_p3_closed_form() {
        // ((1 + 512) / 2)^(1/3).
        let got = gem_pool(&[1.0, 8.0], 1, 3.0).unwrap();
        assert!((got[0] - 6.3536).abs() < 1e-3, "{}", got[0]);
    }

    #[test]
    fn gem_rejects_non_positive_p() {
        assert!(matches!(
            gem_pool(&[1.0], 1, 0.0),
            Err(EncoderError::NonPositiveP(_))
        ));
        assert!(gem_pool(&[1.0], 1, -2.0).is_err());
    }

    #[test]
    fn gem_large_p_approaches_max() {
        let mut rng = rng_for(42, "gem-max");
        for _ in 0..20 {
            let rows = 6;
            let feats: Vec<f64> = (0..rows).map(|_| rng.random_range(0.05..1.0)).collect();
            let max = feats.iter().cloned().fold(f64::MIN, f64::max);
            let got = gem_pool(&feats, 1, 64.0).unwrap()[0];
            assert!((got - max).abs() < 0.05 * max, "gem {got} vs max {max}");
        }
    }

    #[test]
    fn forward_is_unit_norm_and_deterministic() {
        let params = EncoderParams::init(small_cfg(), 1);
        let img = random_image(8, 8, 2);
        let d1 = forward(&img, &params).unwrap();
        let d2 = forward(&img, &params).unwrap();
        assert_eq!(d1, d2);
        let norm: f64 = d1.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_indivisible_images() {
        let params = EncoderParams::init(small_cfg(), 1);
        let img = random_image(9, 8, 2);
        assert!(matches!(
            forward(&img, &params),
            Err(EncoderError::PatchMismatch { .. })
        ));
    }

    #[test]
    fn zero_image_zero_bias_is_well_defined() {
        let params = EncoderParams::init(small_cfg(), 3);
        let img = RasterImage::constant(8, 8, [0.0, 0.0, 0.0]).unwrap();
        let d = forward(&img, &params).unwrap();
        let norm: f64 = d.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert!(d.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let params = EncoderParams::init(small_cfg(), 4);
        let img = random_image(8, 8, 5);
        let grads = backward(&img, &params, &vec![0.0; 6]).unwrap();
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn norm_kills_radial_gradient() {
        // Upstream equal to the descriptor itself probes the gradient of
        // ||f(x)||^2 / 2, which is constant 1/2; everything must vanish.
        let params = EncoderParams::init(small_cfg(), 6);
        let img = random_image(8, 8, 7);
        let d = forward(&img, &params).unwrap();
        let grads = backward(&img, &params, d.values()).unwrap();
        let max = grads
            .to_flat()
            .iter()
            .fold(0.0f64, |acc, &g| acc.max(g.abs()));
        assert!(max < 1e-10, "max radial gradient {max}");
    }

    #[test]
    fn round_trip_flat_layout() {
        let params = EncoderParams::init(small_cfg(), 8);
        let flat = params.to_flat();
        let back = EncoderParams::from_flat(small_cfg(), &flat).unwrap();
        assert_eq!(params, back);
        assert!(EncoderParams::from_flat(small_cfg(), &flat[1..]).is_err());
    }

    /// Central finite differences against the analytic gradient of a linear
    /// probe `u . f(img, params)`.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = small_cfg();
        let img = random_image(8, 8, 100);
        let mut rng = rng_for(200, "upstream");
        let upstream: Vec<f64> = (0..cfg.out_dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();

        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 5 {
            seed += 1;
            let params = EncoderParams::init(cfg, seed);
            let trace = forward_trace(&img, &params).unwrap();
            // Skip seeds with a pre-activation near the rectifier kink;
            // finite differences are invalid across it.
            if trace.min_abs_pre_activation() < 1e-3 {
                continue;
            }
            checked += 1;

            let analytic = backward_from_trace(&trace, &params, &upstream)
                .unwrap()
                .to_flat();
            let flat = params.to_flat();
            let mut fd = vec![0.0; flat.len()];
            let h = 1e-4f64;
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                plus[i] = (f64::from(plus[i]) + h) as f32;
                let mut minus = flat.clone();
                minus[i] = (f64::from(minus[i]) - h) as f32;
                let step = f64::from(plus[i]) - f64::from(minus[i]);
                let lp = probe(&img, cfg, &plus, &upstream);
                let lm = probe(&img, cfg, &minus, &upstream);
                fd[i] = (lp - lm) / step;
            }
            let scale = analytic
                .iter()
                .chain(&fd)
                .fold(0.0f64, |acc, &g| acc.max(g.abs()))
                .max(1e-8);
            let max_err = analytic
                .iter()
                .zip(&fd)
                .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
            assert!(
                max_err / scale < 1e-4,
                "seed {seed}: rel err {}",
                max_err / scale
            );
        }
    }

    fn probe(img: &RasterImage, cfg: EncoderConfig, flat: &[f32], upstream: &[f64]) -> f64 {
        let params = EncoderParams::from_flat(cfg, flat).unwrap();
        let d = forward(img, &params).unwrap();
        d.values().iter().zip(upstream).map(|(x, u)| x * u).sum()
    }
}
