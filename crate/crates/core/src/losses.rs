//! Training objective: large-margin cosine classification loss, softened
//! class distributions, the inherited-knowledge KL loss, and their
//! combination, all with exact analytic gradients.
//!
//! Logits are `s * cos(theta_j)` with the margin `m` subtracted from the
//! ground-truth cosine only. The inherited-knowledge divergence defaults to
//! a full-distribution KL between day and night softened distributions; a
//! scalar (two-outcome) reading over the ground-truth probability is
//! available behind `ikt_scalar_mode`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::rng_for;
use rand_distr::{Distribution, Normal};

/// Probabilities are floored at this value before any logarithm, which keeps
/// the KL divergence finite for softmax-produced distributions.
pub const PROB_FLOOR: f64 = 1e-12;

const HEAD_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("descriptor dim {got} does not match head dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch length {batch} does not match labels length {labels}")]
    BatchMismatch { batch: usize, labels: usize },
    #[error("distributions have {a} and {b} classes")]
    ClassCountMismatch { a: usize, b: usize },
    #[error("infinite divergence: night probability is zero at class {class} where day probability is {p_day}")]
    InfiniteDivergence { class: usize, p_day: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("head row {row} has norm {norm}, not unit within 1e-5")]
    HeadRowNorm { row: usize, norm: f64 },
    #[error("invalid head hyperparameter: {0}")]
    InvalidHyper(String),
    #[error("head weight length {got} is not classes x dim = {expected}")]
    HeadShape { got: usize, expected: usize },
}

/// Cosine classifier: one unit-norm weight row per class, plus the scale `s`
/// and margin `m` hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    w: Vec<f32>,
    classes: usize,
    dim: usize,
    s: f64,
    m: f64,
}

impl ClassifierHead {
    pub fn new(w: Vec<f32>, classes: usize, dim: usize, s: f64, m: f64) -> Result<Self, LossError> {
        if w.len() != classes * dim {
            return Err(LossError::HeadShape {
                got: w.len(),
                expected: classes * dim,
            });
        }
        validate_hyper(s, m)?;
        let head = Self {
            w,
            classes,
            dim,
            s,
            m,
        };
        for j in 0..classes {
            let norm = head.row_norm(j);
            if !((norm - 1.0).abs() <= HEAD_NORM_TOL) {
                return Err(LossError::HeadRowNorm { row: j, norm });
            }
        }
        Ok(head)
    }

    /// Random unit-norm rows.
    pub fn from_seed(seed: u64, classes: usize, dim: usize, s: f64, m: f64) -> Result<Self, LossError> {
        validate_hyper(s, m)?;
        let mut rng = rng_for(seed, "head-init");
        let normal = Normal::new(0.0f64, 1.0).expect("unit normal");
        let mut w = vec![0.0f32; classes * dim];
        for j in 0..classes {
            let mut row: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            for v in row.iter_mut() {
                *v /= norm;
            }
            for (d, &v) in row.iter().enumerate() {
                w[j * dim + d] = v as f32;
            }
        }
        Ok(Self {
            w,
            classes,
            dim,
            s,
            m,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.w[j * self.dim..(j + 1) * self.dim]
    }

    /// Copy of this head with one raw weight nudged by `delta`, skipping
    /// the unit-norm check. The losses are defined on raw rows, so this is
    /// the evaluation point finite-difference oracles need; it is not for
    /// production use.
    pub fn perturbed(&self, idx: usize, delta: f64) -> ClassifierHead {
        let mut out = self.clone();
        out.w[idx] = (f64::from(out.w[idx]) + delta) as f32;
        out
    }

    pub fn weights(&self) -> &[f32] {
        &self.w
    }

    fn row_norm(&self, j: usize) -> f64 {
        self.row(j)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Project every weight row back to unit norm after a gradient step.
    pub(crate) fn renormalize(&mut self) {
        for j in 0..self.classes {
            let norm = self.row_norm(j).max(1e-30);
            for d in 0..self.dim {
                let idx = j * self.dim + d;
                self.w[idx] = (f64::from(self.w[idx]) / norm) as f32;
            }
        }
    }

    pub(crate) fn set_weights(&mut self, w: Vec<f32>) {
        debug_assert_eq!(w.len(), self.w.len());
        self.w = w;
    }
}

fn validate_hyper(s: f64, m: f64) -> Result<(), LossError> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(LossError::InvalidHyper(format!("scale s = {s}")));
    }
    if !(0.0..1.0).contains(&m) {
        return Err(LossError::InvalidHyper(format!("margin m = {m}")));
    }
    Ok(())
}

/// How the balance weight for the inherited-knowledge term is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    #[default]
    Fixed,
    /// Match the two loss magnitudes at the first step.
    Auto,
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the inherited-knowledge term.
    pub alpha: f64,
    pub alpha_mode: AlphaMode,
    /// Cosine logit scale.
    pub s: f64,
    /// Margin subtracted from the ground-truth cosine.
    pub m: f64,
    /// Use the two-outcome (ground-truth probability) KL instead of the
    /// full-distribution KL.
    pub ikt_scalar_mode: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 30.0,
            alpha_mode: AlphaMode::Fixed,
            s: 30.0,
            m: 0.4,
            ikt_scalar_mode: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(LossError::InvalidHyper(format!("alpha = {}", self.alpha)));
        }
        validate_hyper(self.s, self.m)
    }
}

/// Cosine similarity of a unit descriptor against every class row.
pub fn cosines(x: &[f64], head: &ClassifierHead) -> Result<Vec<f64>, LossError> {
    if x.len() != head.dim() {
        return Err(LossError::DimMismatch {
            got: x.len(),
            expected: head.dim(),
        });
    }
    Ok((0..head.classes())
        .map(|j| {
            head.row(j)
                .iter()
                .zip(x)
                .map(|(&w, &v)| f64::from(w) * v)
                .sum()
        })
        .collect())
}

/// Margin-adjusted scaled logits: `s * (cos_j - m * [j == label])`.
fn margin_logits(cos: &[f64], label: usize, s: f64, m: f64) -> Vec<f64> {
    cos.iter()
        .enumerate()
        .map(|(j, &c)| if j == label { s * (c - m) } else { s * c })
        .collect()
}

/// Numerically stable softmax (max subtraction).
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softened class distribution from margin-adjusted scaled cosine logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftenedDistribution {
    probs: Vec<f64>,
}

impl SoftenedDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LossError> {
        if probs.is_empty() {
            return Err(LossError::InvalidDistribution("empty".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(LossError::InvalidDistribution(
                "probabilities outside [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LossError::InvalidDistribution(format!("sum {sum} != 1")));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }
}

/// Full softmax of the margin-adjusted scaled logits. The ground-truth-class
/// component is the scalar softened probability.
pub fn softened_probs(
    x: &[f64],
    label: usize,
    head: &ClassifierHead,
) -> Result<SoftenedDistribution, LossError> {
    if label >= head.classes() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: head.classes(),
        });
    }
    let cos = cosines(x, head)?;
    let logits = margin_logits(&cos, label, head.s(), head.m());
    Ok(SoftenedDistribution {
        probs: softmax(&logits),
    })
}

/// Gradients of a batch loss with respect to the descriptors and the head
/// weight rows.
#[derive(Debug, Clone)]
pub struct LossGrads {
    /// One gradient per batch descriptor.
    pub d_descriptors: Vec<Vec<f64>>,
    /// Gradient for the flattened classes x dim weight matrix.
    pub d_w: Vec<f64>,
}

impl LossGrads {
    fn zeros(batch: usize, head: &ClassifierHead) -> Self {
        Self {
            d_descriptors: vec![vec![0.0; head.dim()]; batch],
            d_w: vec![0.0; head.classes() * head.dim()],
        }
    }
}

fn check_batch(
    batch: &[Vec<f64>],
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<(), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if batch.len() != labels.len() {
        return Err(LossError::BatchMismatch {
            batch: batch.len(),
            labels: labels.len(),
        });
    }
    for &label in labels {
        if label >= head.classes() {
            return Err(LossError::LabelOutOfRange {
                label,
                classes: head.classes(),
            });
        }
    }
    Ok(())
}

/// Large-margin cosine loss: batch mean of the negative log softmax of
/// margin-adjusted scaled logits, with exact gradients.
pub fn lmc_loss(
    batch: &[Vec<f64>],
    labels: &[usize],
    head: &ClassifierHead,
) -> Result<(f64, LossGrads), LossError> {
    check_batch(batch, labels, head)?;
    let n = batch.len() as f64;
    let mut grads = LossGrads::zeros(batch.len(), head);
    let mut total = 0.0;
    for (i, (x, &label)) in batch.iter().zip(labels).enumerate() {
        let cos = cosines(x, head)?;
        let logits = margin_logits(&cos, label, head.s(), head.m());
        let probs = softmax(&logits);
        // -log softmax via log-sum-exp; exact even when p_gt underflows.
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[label];

        // d loss / d logit_j = (p_j - [j == label]) / n; logits are s * cos.
        for (j, &pj) in probs.iter().enumerate() {
            let dcos = head.s() * (pj - if j == label { 1.0 } else { 0.0 }) / n;
            if dcos == 0.0 {
                continue;
            }
            let wrow = head.row(j);
            for d in 0..head.dim() {
                grads.d_descriptors[i][d] += dcos * f64::from(wrow[d]);
                grads.d_w[j * head.dim() + d] += dcos * x[d];
            }
        }
    }
    Ok((total / n, grads))
}

/// KL divergence of the day distribution from the night distribution, with
/// the gradient with respect to the night logits.
///
/// Terms with zero day probability contribute nothing (0 ln 0 = 0); a night
/// probability of exactly zero against positive day mass is an error. Both
/// probabilities are floored at [`PROB_FLOOR`] inside the logarithms.
pub fn ikt_loss(
    p_day: &SoftenedDistribution,
    p_night: &SoftenedDistribution,
) -> Result<(f64, Vec<f64>), LossError> {
    if p_day.classes() != p_night.classes() {
        return Err(LossError::ClassCountMismatch {
            a: p_day.classes(),
            b: p_night.classes(),
        });
    }
    let mut kl = 0.0;
    for (j, (&pd, &pn)) in p_day.probs().iter().zip(p_night.probs()).enumerate() {
        if pd <= 0.0 {
            continue;
        }
        if pn == 0.0 {
            return Err(LossError::InfiniteDivergence { class: j, p_day: pd });
        }
        kl += pd * (pd.max(PROB_FLOOR).ln() - pn.max(PROB_FLOOR).ln());
    }
    // d KL / d night-logit_j = p_night_j - p_day_j.
    let grad = p_night
        .probs()
        .iter()
        .zip(p_day.probs())
        .map(|(&pn, &pd)| pn - pd)
        .collect();
    Ok((kl, grad))
}

/// Two-outcome KL over the ground-truth probability: value and d/dq.
fn bernoulli_kl(p: f64, q: f64) -> (f64, f64) {
    let q = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (p.max(PROB_FLOOR).ln() - q.ln());
    }
    let p1 = 1.0 - p;
    if p1 > 0.0 {
        kl += p1 * (p1.max(PROB_FLOOR).ln() - (1.0 - q).ln());
    }
    let dq = -p / q + p1 / (1.0 - q);
    (kl, dq)
}

/// Combined loss value with its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedValue {
    pub total: f64,
    pub lmc: f64,
    pub ikt: f64,
}

/// Combined objective: LMC + alpha * IKT, where the day distributions are a
/// fixed target (no gradient flows into them). Gradients cover the batch
/// descriptors and the head weights.
pub fn combined_loss(
    batch: &[Vec<f64>],
    labels: &[usize],
    head: &ClassifierHead,
    p_day_batch: &[SoftenedDistribution],
    cfg: &LossConfig,
) -> Result<(CombinedValue, LossGrads), LossError> {
    check_batch(batch, labels, head)?;
    cfg.validate()?;
    if p_day_batch.len() != batch.len() {
        return Err(LossError::BatchMismatch {
            batch: batch.len(),
            labels: p_day_batch.len(),
        });
    }
    let alpha = cfg.alpha;
    let n = batch.len() as f64;
    let (lmc, mut grads) = lmc_loss(batch, labels, head)?;

    let mut ikt_total = 0.0;
    if alpha != 0.0 {
        for (i, ((x, &label), p_day)) in batch.iter().zip(labels).zip(p_day_batch).enumerate() {
            let p_night = softened_probs(x, label, head)?;
            // d loss / d night-logit_j, scaled by alpha and the batch mean.
            let d_logits: Vec<f64> = if cfg.ikt_scalar_mode {
                let (kl, dq) = bernoulli_kl(p_day.probs()[label], p_night.probs()[label]);
                ikt_total += kl;
                let q = p_night.probs()[label];
                p_night
                    .probs()
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let dq_dl = q * (if j == label { 1.0 } else { 0.0 } - pj);
                        alpha * dq * dq_dl / n
                    })
                    .collect()
            } else {
                let (kl, d_logits) = ikt_loss(p_day, &p_night)?;
                ikt_total += kl;
                d_logits.into_iter().map(|g| alpha * g / n).collect()
            };

            for (j, &dl) in d_logits.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let dcos = head.s() * dl;
                let wrow = head.row(j);
                for d in 0..head.dim() {
                    grads.d_descriptors[i][d] += dcos * f64::from(wrow[d]);
                    grads.d_w[j * head.dim() + d] += dcos * x[d];
                }
            }
        }
    } else {
        // Still report the component for logging and auto-alpha probes.
        for ((x, &label), p_day) in batch.iter().zip(labels).zip(p_day_batch) {
            let p_night = softened_probs(x, label, head)?;
            if cfg.ikt_scalar_mode {
                ikt_total += bernoulli_kl(p_day.probs()[label], p_night.probs()[label]).0;
            } else {
                ikt_total += ikt_loss(p_day, &p_night)?.0;
            }
        }
    }
    let ikt = ikt_total / n;

    Ok((
        CombinedValue {
            total: lmc + alpha * ikt,
            lmc,
            ikt,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    fn one_hot_head(classes: usize, dim: usize, s: f64, m: f64) -> ClassifierHead {
        let mut w = vec![0.0f32; classes * dim];
        for j in 0..classes {
            w[j * dim + j] = 1.0;
        }
        ClassifierHead::new(w, classes, dim, s, m).unwrap()
    }

    #[test]
    fn cosines_fixtures() {
        let head = one_hot_head(3, 4, 30.0, 0.4);
        let x = vec![1.0, 0.0, 0.0, 0.0];
        let cos = cosines(&x, &head).unwrap();
        assert!((cos[0] - 1.0).abs() < 1e-6);
        assert!(cos[1].abs() < 1e-6);
        assert!(cos[2].abs() < 1e-6);
    }

    #[test]
    fn cosines_bounded_on_random_inputs() {
        let mut rng = rng_for(1, "cos-bounds");
        for _ in 0..50 {
            let head = ClassifierHead::from_seed(rng.random(), 5, 8, 30.0, 0.4).unwrap();
            let x = unit_vec(8, &mut rng);
            for c in cosines(&x, &head).unwrap() {
                assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c), "cosine {c}");
            }
        }
    }

    #[test]
    fn head_validates_row_norms_and_hyper() {
        let w = vec![0.5f32, 0.0, 0.0, 1.0];
        assert!(matches!(
            ClassifierHead::new(w, 2, 2, 30.0, 0.4),
            Err(LossError::HeadRowNorm { row: 0, .. })
        ));
        assert!(ClassifierHead::from_seed(0, 2, 4, 0.0, 0.4).is_err());
        assert!(ClassifierHead::from_seed(0, 2, 4, 30.0, 1.0).is_err());
    }

    #[test]
    fn lmc_uniform_cosines_is_log_c() {
        // All four cosines equal with s = 1, m = 0: loss is ln 4.
        let dim = 4;
        let v = 0.5f32;
        let w = vec![v; 4 * dim];
        let head = ClassifierHead::new(w, 4, dim, 1.0, 0.0).unwrap();
        let x = vec![0.5; dim];
        let (loss, _) = lmc_loss(&[x], &[2], &head).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn lmc_two_class_closed_form() {
        // cos_gt 0.9, cos_other 0.1, s 30, m 0.4: loss = ln(1 + e^-12).
        // One-hot rows make the dot products the cosines directly.
        let head = one_hot_head(2, 2, 30.0, 0.4);
        let x = vec![0.9, 0.1];
        let (loss, _) = lmc_loss(&[x], &[0], &head).unwrap();
        let closed = (-12.0f64).exp().ln_1p();
        assert!((loss - closed).abs() < 1e-12, "loss {loss} vs {closed}");
        assert!((loss - 6.144e-6).abs() < 1e-9);
    }

    #[test]
    fn lmc_equals_cross_entropy_when_unscaled() {
        let mut rng = rng_for(7, "lmc-ce");
        for _ in 0..50 {
            let head = ClassifierHead::from_seed(rng.random(), 6, 8, 1.0, 0.0).unwrap();
            let x = unit_vec(8, &mut rng);
            let label = rng.random_range(0..6);
            let (loss, _) = lmc_loss(&[x.clone()], &[label], &head).unwrap();

            // Independent softmax cross-entropy oracle on raw cosines.
            let cos = cosines(&x, &head).unwrap();
            let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cos.iter().map(|c| (c - max).exp()).sum();
            let oracle = -(cos[label] - max - z.ln());
            assert!((loss - oracle).abs() < 1e-6, "{loss} vs {oracle}");
        }
    }

    #[test]
    fn lmc_non_negative_and_decreasing_in_gt_cosine() {
        // Other cosines held fixed while the ground-truth cosine rises.
        let head = one_hot_head(3, 3, 30.0, 0.4);
        let mut last = f64::INFINITY;
        for i in 0..9 {
            let c = -0.8 + 0.2 * i as f64;
            let x = vec![c, 0.1, -0.2];
            let (loss, _) = lmc_loss(&[x], &[0], &head).unwrap();
            assert!(loss >= 0.0);
            assert!(loss < last, "loss should fall as cos_gt rises");
            last = loss;
        }
    }

    #[test]
    fn argmax_invariant_to_scale_without_margin() {
        let mut rng = rng_for(11, "argmax");
        for _ in 0..30 {
            let head_a = ClassifierHead::from_seed(5, 6, 8, 1.0, 0.0).unwrap();
            let head_b = ClassifierHead::new(head_a.weights().to_vec(), 6, 8, 64.0, 0.0).unwrap();
            let x = unit_vec(8, &mut rng);
            let pa = softened_probs(&x, 0, &head_a).unwrap();
            let pb = softened_probs(&x, 0, &head_b).unwrap();
            let argmax = |p: &SoftenedDistribution| {
                p.probs()
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&pa), argmax(&pb));
        }
    }

    #[test]
    fn softened_uniform_cosines_gives_uniform_probs() {
        let dim = 4;
        let w = vec![0.5f32; 4 * dim];
        let head = ClassifierHead::new(w, 4, dim, 30.0, 0.0).unwrap();
        let p = softened_probs(&vec![0.5; dim], 1, &head).unwrap();
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softened_two_class_closed_form() {
        let head = one_hot_head(2, 2, 30.0, 0.4);
        let p = softened_probs(&vec![0.9, 0.1], 0, &head).unwrap();
        let expect = 1.0 / (1.0 + (-12.0f64).exp());
        assert!((p.probs()[0] - expect).abs() < 1e-9);
        assert!((p.probs()[0] - 0.99999386).abs() < 1e-8);
    }

    #[test]
    fn softened_probs_sum_to_one() {
        let mut rng = rng_for(13, "soft-sum");
        for _ in 0..50 {
            let head = ClassifierHead::from_seed(rng.random(), 7, 6, 30.0, 0.4).unwrap();
            let x = unit_vec(6, &mut rng);
            let p = softened_probs(&x, rng.random_range(0..7), &head).unwrap();
            let sum: f64 = p.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ikt_identical_distributions_is_zero() {
        let p = SoftenedDistribution::new(vec![0.4, 0.3, 0.3]).unwrap();
        let (kl, grad) = ikt_loss(&p, &p).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!(grad.iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn ikt_closed_form_fixture() {
        let p = SoftenedDistribution::new(vec![0.9, 0.1]).unwrap();
        let q = SoftenedDistribution::new(vec![0.5, 0.5]).unwrap();
        let (kl, _) = ikt_loss(&p, &q).unwrap();
        let expect = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.3681).abs() < 1e-4, "kl {kl}");
    }

    #[test]
    fn ikt_non_negative_and_zero_iff_equal() {
        let mut rng = rng_for(17, "ikt-nonneg");
        for _ in 0..1000 {
            let c = rng.random_range(2..6);
            let draw = |rng: &mut rand_chacha::ChaCha12Rng| {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                SoftenedDistribution::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let (kl, _) = ikt_loss(&p, &q).unwrap();
            assert!(kl >= 0.0, "kl {kl}");
            // Zero only when the distributions coincide.
            let max_gap = p
                .probs()
                .iter()
                .zip(q.probs())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if kl < 1e-12 {
                assert!(max_gap < 1e-5);
            }
            if max_gap > 1e-3 {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn ikt_rejects_zero_night_mass() {
        let p = SoftenedDistribution::new(vec![0.9, 0.1]).unwrap();
        let q = SoftenedDistribution::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            ikt_loss(&p, &q),
            Err(LossError::InfiniteDivergence { class: 1, .. })
        ));
    }

    #[test]
    fn combined_with_zero_alpha_equals_lmc() {
        let mut rng = rng_for(19, "combined-a0");
        let head = ClassifierHead::from_seed(23, 5, 8, 30.0, 0.4).unwrap();
        let batch: Vec<Vec<f64>> = (0..4).map(|_| unit_vec(8, &mut rng)).collect();
        let labels = vec![0, 1, 2, 3];
        let p_day: Vec<SoftenedDistribution> = batch
            .iter()
            .zip(&labels)
            .map(|(x, &l)| softened_probs(x, l, &head).unwrap())
            .collect();
        let cfg = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let (value, grads) = combined_loss(&batch, &labels, &head, &p_day, &cfg).unwrap();
        let (lmc, lmc_grads) = lmc_loss(&batch, &labels, &head).unwrap();
        assert_eq!(value.total, lmc);
        assert_eq!(grads.d_w, lmc_grads.d_w);
        assert_eq!(grads.d_descriptors, lmc_grads.d_descriptors);
    }

    #[test]
    fn combined_with_matching_distributions_equals_lmc() {
        // p_day computed from the same descriptors and head: the KL term
        // vanishes for any alpha.
        let mut rng = rng_for(29, "combined-match");
        let head = ClassifierHead::from_seed(31, 5, 8, 30.0, 0.4).unwrap();
        let batch: Vec<Vec<f64>> = (0..4).map(|_| unit_vec(8, &mut rng)).collect();
        let labels = vec![4, 3, 2, 1];
        let p_day: Vec<SoftenedDistribution> = batch
            .iter()
            .zip(&labels)
            .map(|(x, &l)| softened_probs(x, l, &head).unwrap())
            .collect();
        let cfg = LossConfig {
            alpha: 17.5,
            ..LossConfig::default()
        };
        let (value, _) = combined_loss(&batch, &labels, &head, &p_day, &cfg).unwrap();
        let (lmc, _) = lmc_loss(&batch, &labels, &head).unwrap();
        assert!((value.total - lmc).abs() < 1e-12);
    }

    /// Finite-difference check of the combined gradients w.r.t. descriptors
    /// and head weights, with the day distributions held fixed.
    #[test]
    fn combined_gradients_match_finite_differences() {
        let mut rng = rng_for(37, "combined-fd");
        for trial in 0..5 {
            let classes = 4;
            let dim = 6;
            let head = ClassifierHead::from_seed(rng.random(), classes, dim, 8.0, 0.2).unwrap();
            let batch: Vec<Vec<f64>> = (0..3).map(|_| unit_vec(dim, &mut rng)).collect();
            let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..classes)).collect();
            let p_day: Vec<SoftenedDistribution> = (0..3)
                .map(|_| {
                    let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    SoftenedDistribution::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
                })
                .collect();
            let cfg = LossConfig {
                alpha: 3.0,
                ikt_scalar_mode: trial % 2 == 1,
                ..LossConfig::default()
            };

            let (_, grads) = combined_loss(&batch, &labels, &head, &p_day, &cfg).unwrap();
            let h = 1e-6;

            // Descriptor gradients.
            for (i, x) in batch.iter().enumerate() {
                for d in 0..dim {
                    let mut plus = batch.clone();
                    plus[i][d] = x[d] + h;
                    let mut minus = batch.clone();
                    minus[i][d] = x[d] - h;
                    let lp = combined_loss(&plus, &labels, &head, &p_day, &cfg)
                        .unwrap()
                        .0
                        .total;
                    let lm = combined_loss(&minus, &labels, &head, &p_day, &cfg)
                        .unwrap()
                        .0
                        .total;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = grads.d_descriptors[i][d];
                    assert!(
                        (a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-4,
                        "trial {trial} desc[{i}][{d}]: analytic {a} vs fd {fd}"
                    );
                }
            }

            // Head weight gradients (perturb without renormalizing; the loss
            // is defined on raw rows).
            for idx in 0..classes * dim {
                let perturbed = |delta: f64| {
                    let mut w = head.weights().to_vec();
                    w[idx] = (f64::from(w[idx]) + delta) as f32;
                    let mut h2 = head.clone();
                    h2.set_weights(w);
                    combined_loss(&batch, &labels, &h2, &p_day, &cfg)
                        .unwrap()
                        .0
                        .total
                };
                let step = {
                    let w0 = f64::from(head.weights()[idx]);
                    let up = (w0 + h) as f32;
                    let down = (w0 - h) as f32;
                    f64::from(up) - f64::from(down)
                };
                let fd = (perturbed(h) - perturbed(-h)) / step;
                let a = grads.d_w[idx];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-4,
                    "trial {trial} w[{idx}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
