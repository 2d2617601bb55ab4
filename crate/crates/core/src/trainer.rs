//! Fine-tuning procedure: cache day descriptors from the pre-trained model,
//! then train a night model on night-style images with the combined
//! cosine-margin + inherited-knowledge objective.
//!
//! Plain stochastic gradient descent with a fixed learning rate is the
//! default optimizer; Adam is available behind a config flag. Training is
//! single-threaded with fixed-order gradient accumulation, so identical
//! (config, seed, data) produce bit-identical checkpoints. No data
//! augmentation is applied anywhere.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LoadedSet;
use crate::encoder::{
    self, EncoderConfig, EncoderError, EncoderGrads, EncoderParams, ForwardTrace,
};
use crate::losses::{
    combined_loss, softened_probs, AlphaMode, ClassifierHead, LossConfig, LossError,
    SoftenedDistribution,
};
use crate::seed::rng_for;
use crate::store::Checkpoint;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("training set is empty")]
    EmptySet,
    #[error("record {id} has no class label; training requires labels")]
    Unlabeled { id: String },
    #[error("record {id} has label {label} but the head has {classes} classes")]
    LabelTooLarge {
        id: String,
        label: u32,
        classes: usize,
    },
    #[error("pretrained checkpoint has no classifier head")]
    MissingHead,
    #[error("day cache has no descriptor for id {id}")]
    CacheMissing { id: String },
    #[error("day cache has extra descriptor for id {id} not present in the night set")]
    CacheExtra { id: String },
    #[error("cache descriptor for {id} has dim {got}, model expects {expected}")]
    CacheDim {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub seed: u64,
    /// Keep the classifier rows bitwise unchanged.
    pub freeze_head: bool,
    /// Recompute day distributions against the live head each step; when
    /// false they are frozen at step 0.
    pub recompute_day_probs: bool,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 1,
            batch_size: 32,
            loss: LossConfig::default(),
            seed: 0,
            freeze_head: false,
            recompute_day_probs: true,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LossError::InvalidHyper(format!("lr = {}", self.lr)).into());
        }
        if self.batch_size == 0 {
            return Err(LossError::InvalidHyper("batch_size = 0".into()).into());
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_lmc: f64,
    pub l_ikt: f64,
    pub total: f64,
    pub alpha: f64,
}

pub type TrainLog = Vec<StepLog>;

/// Per-record day descriptors from the pre-trained model, keyed by id.
#[derive(Debug, Clone)]
pub struct DayCache {
    by_id: HashMap<String, Vec<f64>>,
}

impl DayCache {
    /// Encode every record of the day set with the pretrained model.
    pub fn build(day_set: &LoadedSet, pretrained: &Checkpoint) -> Result<Self, TrainerError> {
        let mut by_id = HashMap::with_capacity(day_set.len());
        for (record, img) in day_set.manifest.records().iter().zip(&day_set.images) {
            let descriptor = encoder::forward(img, &pretrained.params)?;
            by_id.insert(record.id.clone(), descriptor.values().to_vec());
        }
        Ok(Self { by_id })
    }

    /// Rebuild from persisted f32 rows (the descriptor-database format).
    pub fn from_rows<'a>(rows: impl Iterator<Item = (&'a str, &'a [f32])>) -> Self {
        let by_id = rows
            .map(|(id, row)| (id.to_owned(), row.iter().map(|&v| f64::from(v)).collect()))
            .collect();
        Self { by_id }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.by_id.get(id).map(Vec::as_slice)
    }

    /// Day descriptors in night-record order. Ids must match one-to-one:
    /// a night record without a cached day descriptor, or a cache entry for
    /// an id absent from the night set, is an alignment error.
    pub fn align(&self, night_set: &LoadedSet) -> Result<Vec<&[f64]>, TrainerError> {
        let mut night_ids = BTreeSet::new();
        let mut out = Vec::with_capacity(night_set.len());
        for record in night_set.manifest.records() {
            night_ids.insert(record.id.as_str());
            let row = self
                .by_id
                .get(&record.id)
                .ok_or_else(|| TrainerError::CacheMissing {
                    id: record.id.clone(),
                })?;
            out.push(row.as_slice());
        }
        for id in self.by_id.keys() {
            if !night_ids.contains(id.as_str()) {
                return Err(TrainerError::CacheExtra { id: id.clone() });
            }
        }
        Ok(out)
    }
}

/// Alias for the paper-facing name.
pub fn build_day_cache(
    day_set: &LoadedSet,
    pretrained: &Checkpoint,
) -> Result<DayCache, TrainerError> {
    DayCache::build(day_set, pretrained)
}

fn labels_of(set: &LoadedSet, classes: Option<usize>) -> Result<Vec<usize>, TrainerError> {
    if set.is_empty() {
        return Err(TrainerError::EmptySet);
    }
    set.manifest
        .records()
        .iter()
        .map(|r| {
            let label = r.class_label.ok_or_else(|| TrainerError::Unlabeled {
                id: r.id.clone(),
            })?;
            if let Some(c) = classes {
                if label as usize >= c {
                    return Err(TrainerError::LabelTooLarge {
                        id: r.id.clone(),
                        label,
                        classes: c,
                    });
                }
            }
            Ok(label as usize)
        })
        .collect()
}

/// Batch objective and gradients: the trainer's step function. The day
/// distributions, when present, are a fixed distillation target; no
/// gradient flows into them.
pub struct BatchEval {
    pub lmc: f64,
    pub ikt: f64,
    pub total: f64,
    pub encoder_grads: EncoderGrads,
    pub head_grads: Vec<f64>,
}

pub fn batch_objective(
    traces: &[ForwardTrace],
    labels: &[usize],
    params: &EncoderParams,
    head: &ClassifierHead,
    p_day: Option<&[SoftenedDistribution]>,
    loss_cfg: &LossConfig,
) -> Result<BatchEval, TrainerError> {
    let descriptors: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.descriptor_values().to_vec())
        .collect();
    let empty_day: Vec<SoftenedDistribution>;
    let (cfg, p_day_batch) = match p_day {
        Some(p) => (*loss_cfg, p),
        None => {
            // Pure LMC: reuse the combined path with alpha 0 and dummy
            // uniform targets (never touched by the gradient).
            let uniform = SoftenedDistribution::new(vec![
                1.0 / head.classes() as f64;
                head.classes()
            ])
            .expect("uniform distribution is valid");
            empty_day = vec![uniform; descriptors.len()];
            (
                LossConfig {
                    alpha: 0.0,
                    ..*loss_cfg
                },
                empty_day.as_slice(),
            )
        }
    };
    let (value, grads) = combined_loss(&descriptors, labels, head, p_day_batch, &cfg)?;

    let mut encoder_grads = EncoderGrads::zeros(params);
    for (trace, d_desc) in traces.iter().zip(&grads.d_descriptors) {
        let g = encoder::backward_from_trace(trace, params, d_desc)?;
        encoder_grads.add_assign(&g);
    }
    Ok(BatchEval {
        lmc: value.lmc,
        ikt: value.ikt,
        total: value.total,
        encoder_grads,
        head_grads: grads.d_w,
    })
}

enum OptState {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl OptState {
    fn new(opt: Optimizer, len: usize) -> Self {
        match opt {
            Optimizer::Sgd => OptState::Sgd,
            Optimizer::Adam => OptState::Adam {
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
        }
    }

    /// Parameter delta for this step (to be subtracted), given gradients.
    fn delta(&mut self, grads: &[f64], lr: f64) -> Vec<f64> {
        match self {
            OptState::Sgd => grads.iter().map(|g| lr * g).collect(),
            OptState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let tf = *t as i32;
                let bc1 = 1.0 - B1.powi(tf);
                let bc2 = 1.0 - B2.powi(tf);
                grads
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        m[i] = B1 * m[i] + (1.0 - B1) * g;
                        v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                        lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + EPS)
                    })
                    .collect()
            }
        }
    }
}

struct IktContext<'a> {
    day_descriptors: Vec<&'a [f64]>,
    /// Frozen distributions when `recompute_day_probs` is false.
    frozen: Option<Vec<SoftenedDistribution>>,
    alpha: f64,
}

/// Shared training loop. `ikt` is None for plain LMC training.
fn train_loop(
    set: &LoadedSet,
    labels: &[usize],
    mut params: EncoderParams,
    mut head: ClassifierHead,
    ikt: Option<IktContext>,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainerError> {
    let enc_cfg = params.config();
    let enc_len = params.len();
    let head_len = head.weights().len();
    let mut opt = OptState::new(cfg.optimizer, enc_len + head_len);
    let mut log = Vec::new();
    let alpha = ikt.as_ref().map(|c| c.alpha).unwrap_or(0.0);
    let loss_cfg = LossConfig {
        alpha,
        ..cfg.loss
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..set.len()).collect();
        let mut rng = rng_for(cfg.seed, &format!("shuffle:{epoch}"));
        order.shuffle(&mut rng);

        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let traces: Vec<ForwardTrace> = chunk
                .iter()
                .map(|&i| encoder::forward_trace(&set.images[i], &params))
                .collect::<Result<_, _>>()?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            let p_day_batch: Option<Vec<SoftenedDistribution>> = match &ikt {
                None => None,
                Some(ctx) => Some(match &ctx.frozen {
                    Some(frozen) => chunk.iter().map(|&i| frozen[i].clone()).collect(),
                    None => chunk
                        .iter()
                        .map(|&i| {
                            softened_probs(ctx.day_descriptors[i], labels[i], &head)
                        })
                        .collect::<Result<_, _>>()?,
                }),
            };

            let eval = batch_objective(
                &traces,
                &batch_labels,
                &params,
                &head,
                p_day_batch.as_deref(),
                &loss_cfg,
            )?;
            if !eval.total.is_finite() {
                return Err(TrainerError::Diverged { epoch, step });
            }
            log.push(StepLog {
                epoch,
                step,
                l_lmc: eval.lmc,
                l_ikt: eval.ikt,
                total: eval.total,
                alpha,
            });

            // Fixed update order: encoder tensors, then head rows.
            let mut flat_grads = eval.encoder_grads.to_flat();
            flat_grads.extend_from_slice(&eval.head_grads);
            let delta = opt.delta(&flat_grads, cfg.lr);

            let mut enc_flat = params.to_flat();
            for (w, d) in enc_flat.iter_mut().zip(&delta[..enc_len]) {
                *w = (f64::from(*w) - d) as f32;
            }
            params = EncoderParams::from_flat(enc_cfg, &enc_flat)?;

            if !cfg.freeze_head {
                let mut w = head.weights().to_vec();
                for (wv, d) in w.iter_mut().zip(&delta[enc_len..]) {
                    *wv = (f64::from(*wv) - d) as f32;
                }
                head.set_weights(w);
                head.renormalize();
            }
        }
    }
    Ok((Checkpoint::new(params, Some(head)), log))
}

/// Train a day model from scratch with the cosine-margin loss only. The
/// head size is the number of distinct classes (max label + 1).
pub fn pretrain_day(
    set: &LoadedSet,
    enc_cfg: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainerError> {
    cfg.validate()?;
    let labels = labels_of(set, None)?;
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let params = EncoderParams::init(enc_cfg, crate::seed::sub_seed(cfg.seed, "encoder-init"));
    let head = ClassifierHead::from_seed(
        crate::seed::sub_seed(cfg.seed, "head-init"),
        classes,
        enc_cfg.out_dim,
        cfg.loss.s,
        cfg.loss.m,
    )?;
    train_loop(set, &labels, params, head, None, cfg)
}

/// Continue cosine-margin training from an existing checkpoint (no
/// inherited-knowledge term, no day cache required).
pub fn finetune_lmc(
    set: &LoadedSet,
    pretrained: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainerError> {
    cfg.validate()?;
    let head = pretrained.head.clone().ok_or(TrainerError::MissingHead)?;
    let labels = labels_of(set, Some(head.classes()))?;
    train_loop(set, &labels, pretrained.params.clone(), head, None, cfg)
}

/// Resolve the balance weight: fixed from config, or chosen so that
/// `alpha * L_IKT` equals `L_LMC` on the first training batch at
/// initialization.
fn resolve_alpha(
    set: &LoadedSet,
    labels: &[usize],
    params: &EncoderParams,
    head: &ClassifierHead,
    day_descriptors: &[&[f64]],
    cfg: &TrainConfig,
) -> Result<f64, TrainerError> {
    match cfg.loss.alpha_mode {
        AlphaMode::Fixed => Ok(cfg.loss.alpha),
        AlphaMode::Auto => {
            let mut order: Vec<usize> = (0..set.len()).collect();
            let mut rng = rng_for(cfg.seed, "shuffle:0");
            order.shuffle(&mut rng);
            let first: Vec<usize> = order.into_iter().take(cfg.batch_size).collect();
            let traces: Vec<ForwardTrace> = first
                .iter()
                .map(|&i| encoder::forward_trace(&set.images[i], params))
                .collect::<Result<_, _>>()?;
            let batch_labels: Vec<usize> = first.iter().map(|&i| labels[i]).collect();
            let p_day: Vec<SoftenedDistribution> = first
                .iter()
                .map(|&i| softened_probs(day_descriptors[i], labels[i], head))
                .collect::<Result<_, _>>()?;
            let probe = batch_objective(
                &traces,
                &batch_labels,
                params,
                head,
                Some(&p_day),
                &LossConfig {
                    alpha: 0.0,
                    ..cfg.loss
                },
            )?;
            Ok((probe.lmc / probe.ikt.max(1e-9)).clamp(0.0, 1e4))
        }
    }
}

/// Fine-tune a night model from the pretrained day model: per-step
/// objective `L_LMC + alpha * L_IKT`, where the day distributions come from
/// cached day descriptors. With `recompute_day_probs` they are evaluated
/// against the live head each step (both KL arguments share one
/// classifier); otherwise they are frozen at step 0.
pub fn finetune_night(
    night_set: &LoadedSet,
    pretrained: &Checkpoint,
    cache: &DayCache,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog), TrainerError> {
    cfg.validate()?;
    let head = pretrained.head.clone().ok_or(TrainerError::MissingHead)?;
    let labels = labels_of(night_set, Some(head.classes()))?;
    let day_descriptors = cache.align(night_set)?;
    for (record, row) in night_set.manifest.records().iter().zip(&day_descriptors) {
        if row.len() != pretrained.out_dim() {
            return Err(TrainerError::CacheDim {
                id: record.id.clone(),
                got: row.len(),
                expected: pretrained.out_dim(),
            });
        }
    }

    let alpha = resolve_alpha(
        night_set,
        &labels,
        &pretrained.params,
        &head,
        &day_descriptors,
        cfg,
    )?;
    let frozen = if cfg.recompute_day_probs {
        None
    } else {
        Some(
            day_descriptors
                .iter()
                .zip(&labels)
                .map(|(d, &l)| softened_probs(d, l, &head))
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    let ikt = IktContext {
        day_descriptors,
        frozen,
        alpha,
    };
    train_loop(
        night_set,
        &labels,
        pretrained.params.clone(),
        head,
        Some(ikt),
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::DomainTag;
    use crate::store::Manifest;
    use crate::synthdata::{generate, SynthConfig};

    fn synth_set(n_places: usize, views: usize, seed: u64) -> LoadedSet {
        let ds = generate(&SynthConfig {
            n_places,
            views_per_place: views,
            image_size: 16,
            seed,
            ..Default::default()
        })
        .unwrap();
        LoadedSet::from_parts(ds.manifest, ds.images).unwrap()
    }

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            patch_size: 4,
            feat_dim: 16,
            out_dim: 12,
        }
    }

    fn night_version(set: &LoadedSet) -> LoadedSet {
        let p = crate::nightgen::NightParams::default();
        let images: Vec<_> = set
            .images
            .iter()
            .map(|img| crate::nightgen::night_transform(img, &p))
            .collect();
        let records: Vec<_> = set
            .manifest
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.domain = Some(DomainTag::Night);
                r
            })
            .collect();
        LoadedSet::from_parts(Manifest::new(records).unwrap(), images).unwrap()
    }

    #[test]
    fn pretrain_is_deterministic() {
        let set = synth_set(3, 2, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 9,
            ..Default::default()
        };
        let (a, _) = pretrain_day(&set, enc_cfg(), &cfg).unwrap();
        let (b, _) = pretrain_day(&set, enc_cfg(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let set = synth_set(2, 2, 2);
        let cfg = TrainConfig {
            epochs: 0,
            seed: 5,
            ..Default::default()
        };
        let (ckpt, log) = pretrain_day(&set, enc_cfg(), &cfg).unwrap();
        assert!(log.is_empty());
        let expect_params =
            EncoderParams::init(enc_cfg(), crate::seed::sub_seed(5, "encoder-init"));
        assert_eq!(ckpt.params, expect_params);
    }

    #[test]
    fn pretrain_separates_places() {
        // 2 places x 10 views, 30 epochs: within-place cosine must exceed
        // between-place cosine.
        let set = synth_set(2, 10, 3);
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 5e-3,
            seed: 11,
            ..Default::default()
        };
        let (ckpt, log) = pretrain_day(&set, enc_cfg(), &cfg).unwrap();
        assert!(!log.is_empty());

        let descriptors: Vec<_> = set
            .images
            .iter()
            .map(|img| encoder::forward(img, &ckpt.params).unwrap())
            .collect();
        let labels: Vec<u32> = set
            .manifest
            .records()
            .iter()
            .map(|r| r.class_label.unwrap())
            .collect();
        let mut within = (0.0, 0usize);
        let mut between = (0.0, 0usize);
        for i in 0..descriptors.len() {
            for j in i + 1..descriptors.len() {
                let c = descriptors[i].cosine(&descriptors[j]);
                if labels[i] == labels[j] {
                    within = (within.0 + c, within.1 + 1);
                } else {
                    between = (between.0 + c, between.1 + 1);
                }
            }
        }
        let within_mean = within.0 / within.1 as f64;
        let between_mean = between.0 / between.1 as f64;
        assert!(
            within_mean > between_mean,
            "within {within_mean} vs between {between_mean}"
        );
    }

    #[test]
    fn training_loss_trends_down() {
        let set = synth_set(4, 6, 7);
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            lr: 5e-3,
            seed: 13,
            ..Default::default()
        };
        let (_, log) = pretrain_day(&set, enc_cfg(), &cfg).unwrap();
        let first: f64 = log.iter().take(3).map(|s| s.total).sum::<f64>() / 3.0;
        let last: f64 = log.iter().rev().take(3).map(|s| s.total).sum::<f64>() / 3.0;
        assert!(last < first, "loss did not fall: {first} -> {last}");
    }

    #[test]
    fn day_cache_matches_direct_forward_and_validates_alignment() {
        let set = synth_set(3, 2, 4);
        let (ckpt, _) = pretrain_day(
            &set,
            enc_cfg(),
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let cache = build_day_cache(&set, &ckpt).unwrap();
        assert_eq!(cache.len(), 6);
        for (record, img) in set.manifest.records().iter().zip(&set.images) {
            let direct = encoder::forward(img, &ckpt.params).unwrap();
            assert_eq!(cache.get(&record.id).unwrap(), direct.values());
        }

        // Missing id in the cache.
        let night = night_version(&set);
        let mut partial = cache.clone();
        partial.by_id.remove("p0001_v01");
        match partial.align(&night) {
            Err(TrainerError::CacheMissing { id }) => assert_eq!(id, "p0001_v01"),
            other => panic!("expected missing-id error, got {other:?}"),
        }

        // Extra id in the cache.
        let mut extra = cache.clone();
        extra.by_id.insert(
            "ghost".into(),
            cache.get("p0000_v00").unwrap().to_vec(),
        );
        assert!(matches!(
            extra.align(&night),
            Err(TrainerError::CacheExtra { .. })
        ));
    }

    #[test]
    fn finetune_alpha_zero_equals_plain_lmc_finetune_bitwise() {
        let set = synth_set(3, 3, 6);
        let night = night_version(&set);
        let (pre, _) = pretrain_day(
            &set,
            enc_cfg(),
            &TrainConfig {
                epochs: 4,
                seed: 21,
                ..Default::default()
            },
        )
        .unwrap();
        let cache = build_day_cache(&set, &pre).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            seed: 22,
            loss: LossConfig {
                alpha: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (with_ikt_machinery, _) = finetune_night(&night, &pre, &cache, &cfg).unwrap();
        let (plain, _) = finetune_lmc(&night, &pre, &cfg).unwrap();
        assert_eq!(with_ikt_machinery, plain);
    }

    #[test]
    fn finetune_reproducible_and_freeze_head_respected() {
        let set = synth_set(3, 2, 8);
        let night = night_version(&set);
        let (pre, _) = pretrain_day(
            &set,
            enc_cfg(),
            &TrainConfig {
                epochs: 2,
                seed: 31,
                ..Default::default()
            },
        )
        .unwrap();
        let cache = build_day_cache(&set, &pre).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 3,
            seed: 32,
            freeze_head: true,
            ..Default::default()
        };
        let (a, _) = finetune_night(&night, &pre, &cache, &cfg).unwrap();
        let (b, _) = finetune_night(&night, &pre, &cache, &cfg).unwrap();
        assert_eq!(a, b);
        // Head rows bitwise unchanged.
        let pre_w = pre.head.as_ref().unwrap().weights();
        let post_w = a.head.as_ref().unwrap().weights();
        assert!(pre_w
            .iter()
            .zip(post_w)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        // Encoder did change.
        assert_ne!(a.params, pre.params);
    }

    #[test]
    fn identical_night_images_with_large_alpha_stay_near_day_descriptors() {
        // With the night set equal to the day set the inherited-knowledge
        // term starts at its minimum; a dominant alpha keeps fine-tuning
        // pinned there. The learning rate must respect the KL curvature,
        // which scales with alpha * s^2.
        for seed in 0..3u64 {
            let set = synth_set(3, 6, 40 + seed);
            let (pre, _) = pretrain_day(
                &set,
                enc_cfg(),
                &TrainConfig {
                    epochs: 30,
                    batch_size: 8,
                    lr: 5e-3,
                    seed: 50 + seed,
                    ..Default::default()
                },
            )
            .unwrap();
            let cache = build_day_cache(&set, &pre).unwrap();
            let cfg = TrainConfig {
                epochs: 12,
                batch_size: 4,
                lr: 1e-5,
                seed: 60 + seed,
                loss: LossConfig {
                    alpha: 100.0,
                    ..Default::default()
                },
                ..Default::default()
            };
            let (night_model, _) = finetune_night(&set, &pre, &cache, &cfg).unwrap();
            for (record, img) in set.manifest.records().iter().zip(&set.images) {
                let night_desc = encoder::forward(img, &night_model.params).unwrap();
                let day = cache.get(&record.id).unwrap();
                let cos: f64 = night_desc
                    .values()
                    .iter()
                    .zip(day)
                    .map(|(a, b)| a * b)
                    .sum();
                assert!(cos > 0.999, "seed {seed}, {}: cosine {cos}", record.id);
            }
        }
    }

    #[test]
    fn unlabeled_records_rejected() {
        let mut set = synth_set(2, 2, 9);
        let mut records = set.manifest.records().to_vec();
        records[1].class_label = None;
        set.manifest = Manifest::new(records).unwrap();
        assert!(matches!(
            pretrain_day(&set, enc_cfg(), &TrainConfig::default()),
            Err(TrainerError::Unlabeled { .. })
        ));
    }

    #[test]
    fn divergence_guard_trips_on_absurd_learning_rate() {
        let set = synth_set(2, 3, 10);
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e8,
            seed: 77,
            ..Default::default()
        };
        let got = pretrain_day(&set, enc_cfg(), &cfg);
        assert!(
            matches!(
                got,
                Err(TrainerError::Diverged { .. }) | Err(TrainerError::Encoder(_))
            ),
            "expected divergence, got {got:?}"
        );
    }

    #[test]
    fn adam_optimizer_runs_and_differs_from_sgd() {
        let set = synth_set(2, 3, 12);
        let base = TrainConfig {
            epochs: 2,
            seed: 90,
            ..Default::default()
        };
        let (sgd, _) = pretrain_day(&set, enc_cfg(), &base).unwrap();
        let (adam, _) = pretrain_day(
            &set,
            enc_cfg(),
            &TrainConfig {
                optimizer: Optimizer::Adam,
                ..base
            },
        )
        .unwrap();
        assert_ne!(sgd.params, adam.params);
    }
}

