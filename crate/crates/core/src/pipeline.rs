//! End-to-end orchestration shared by the command-line tool and the
//! acceptance suite: query evaluation over a database, and the ablation
//! grid (training-data composition x inherited-knowledge transfer x
//! original-database mode).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, LoadedSet};
use crate::encoder::EncoderConfig;
use crate::eval::{self, EvalError, RecallReport, SubsetRecall};
use crate::geo::DomainTag;
use crate::nightgen::{night_transform, NightParams, NightgenError};
use crate::retrieval::{self, RankedList, RetrievalError, RoutingConfig};
use crate::store::{Checkpoint, DescriptorDB, Manifest, StoreError};
use crate::synthdata::{SynthConfig, SynthError};
use crate::trainer::{self, TrainConfig, TrainerError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Nightgen(#[from] NightgenError),
    #[error("database and manifest are misaligned at row {row}: db id {db_id:?}, manifest id {manifest_id:?}")]
    DbManifestMismatch {
        row: usize,
        db_id: String,
        manifest_id: String,
    },
    #[error("night database required when od_mode is false")]
    MissingNightDb,
}

/// Check that database rows line up one-to-one with the manifest records
/// used for ground-truth positions.
pub fn check_db_alignment(db: &DescriptorDB, manifest: &Manifest) -> Result<(), PipelineError> {
    if db.count() != manifest.len() {
        return Err(PipelineError::DbManifestMismatch {
            row: db.count().min(manifest.len()),
            db_id: format!("count {}", db.count()),
            manifest_id: format!("count {}", manifest.len()),
        });
    }
    for (i, record) in manifest.records().iter().enumerate() {
        if db.id(i) != record.id {
            return Err(PipelineError::DbManifestMismatch {
                row: i,
                db_id: db.id(i).to_owned(),
                manifest_id: record.id.clone(),
            });
        }
    }
    Ok(())
}

/// Per-query retrieval results with the routing decision.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub id: String,
    pub domain: DomainTag,
    pub ranked: RankedList,
}

/// Encode and rank every query. In original-database mode all queries
/// search `day_db`; otherwise night-routed queries search `night_db`.
pub fn run_queries(
    queries: &LoadedSet,
    day_db: &DescriptorDB,
    night_db: Option<&DescriptorDB>,
    routing: &RoutingConfig,
    k: usize,
) -> Result<Vec<QueryResult>, PipelineError> {
    routing.verify_database(day_db)?;
    if !routing.od_mode && night_db.is_none() {
        return Err(PipelineError::MissingNightDb);
    }
    let mut out = Vec::with_capacity(queries.len());
    for (record, img) in queries.manifest.records().iter().zip(&queries.images) {
        let (descriptor, domain) = retrieval::route_query(img, record, routing)?;
        let model = routing.model_for(domain);
        let db = if routing.od_mode || std::ptr::eq(model, routing.day_model) {
            day_db
        } else {
            night_db.expect("checked above")
        };
        let ranked = retrieval::top_k(db, descriptor.values(), k)?;
        out.push(QueryResult {
            id: record.id.clone(),
            domain,
            ranked,
        });
    }
    Ok(out)
}

/// Full evaluation: route queries, rank, compute per-domain recall@N with
/// the distance criterion.
pub fn evaluate(
    queries: &LoadedSet,
    day_db: &DescriptorDB,
    db_manifest: &Manifest,
    night_db: Option<&DescriptorDB>,
    routing: &RoutingConfig,
    ns: &[usize],
    threshold_m: f64,
) -> Result<(RecallReport, Vec<QueryResult>), PipelineError> {
    check_db_alignment(day_db, db_manifest)?;
    if let Some(ndb) = night_db {
        check_db_alignment(ndb, db_manifest)?;
    }
    let k = ns.iter().copied().max().unwrap_or(1);
    let results = run_queries(queries, day_db, night_db, routing, k)?;

    let mut by_domain: BTreeMap<DomainTag, (Vec<RankedList>, Vec<std::collections::BTreeSet<usize>>)> =
        BTreeMap::new();
    for (record, result) in queries.manifest.records().iter().zip(&results) {
        let pos = eval::positives(record, db_manifest, threshold_m)?;
        let entry = by_domain.entry(result.domain).or_default();
        entry.0.push(result.ranked.clone());
        entry.1.push(pos);
    }

    let mut subsets: BTreeMap<DomainTag, SubsetRecall> = BTreeMap::new();
    for (domain, (ranked, positives)) in &by_domain {
        subsets.insert(*domain, eval::recall_at_n(ranked, positives, ns)?);
    }
    let report = RecallReport {
        threshold_m,
        ns: ns.to_vec(),
        od_mode: routing.od_mode,
        subsets,
    };
    Ok((report, results))
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Configuration of a full ablation run on one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub synth: SynthConfig,
    /// Views per place reserved as queries (from the end of each place's
    /// view list). The rest form the database and training set.
    pub query_views: usize,
    pub night: NightParams,
    pub encoder: EncoderConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub ns: Vec<usize>,
    pub threshold_m: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let synth = SynthConfig {
            n_places: 100,
            views_per_place: 5,
            image_size: 32,
            ..Default::default()
        };
        let encoder = EncoderConfig {
            patch_size: 8,
            feat_dim: 48,
            out_dim: 32,
        };
        // The cosine-margin objective at this scale trains reliably with
        // per-coordinate step control; plain SGD needs lr below ~1/s^2 and
        // converges too slowly for the grid.
        let loss = crate::losses::LossConfig {
            s: 12.0,
            m: 0.3,
            ..Default::default()
        };
        let pretrain = TrainConfig {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            optimizer: crate::trainer::Optimizer::Adam,
            loss,
            ..Default::default()
        };
        let finetune = TrainConfig {
            epochs: 15,
            batch_size: 32,
            lr: 2e-3,
            optimizer: crate::trainer::Optimizer::Adam,
            loss: crate::losses::LossConfig {
                alpha_mode: crate::losses::AlphaMode::Auto,
                ..loss
            },
            ..Default::default()
        };
        Self {
            synth,
            query_views: 1,
            night: NightParams::default(),
            encoder,
            pretrain,
            finetune,
            ns: vec![1, 5, 10],
            threshold_m: eval::DEFAULT_THRESHOLD_M,
        }
    }
}

/// One ablation row: training-data composition, whether the
/// inherited-knowledge term was used, and whether the original (day-model)
/// database was searched.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub day_data: bool,
    pub night_data: bool,
    pub ikt: bool,
    pub od: bool,
    /// Night-query subset recall.
    pub night: SubsetRecall,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub ns: Vec<usize>,
    pub threshold_m: f64,
    pub rows: Vec<AblationRow>,
}

/// Split a generated dataset into a database/training part and a held-out
/// query part (`query_views` last views of every place).
pub fn split_dataset(
    set: &LoadedSet,
    views_per_place: usize,
    query_views: usize,
) -> Result<(LoadedSet, LoadedSet), PipelineError> {
    assert!(query_views < views_per_place, "need at least one database view");
    let mut base_records = Vec::new();
    let mut base_images = Vec::new();
    let mut query_records = Vec::new();
    let mut query_images = Vec::new();
    for (i, (record, img)) in set
        .manifest
        .records()
        .iter()
        .zip(&set.images)
        .enumerate()
    {
        if i % views_per_place < views_per_place - query_views {
            base_records.push(record.clone());
            base_images.push(img.clone());
        } else {
            query_records.push(record.clone());
            query_images.push(img.clone());
        }
    }
    Ok((
        LoadedSet::from_parts(Manifest::new(base_records)?, base_images)?,
        LoadedSet::from_parts(Manifest::new(query_records)?, query_images)?,
    ))
}

/// Night-transform a whole set: images transformed, domains set to night,
/// ids and labels carried over unchanged. Each record gets its own bloom
/// and noise stream, derived from the params seed and the record id.
pub fn night_set(set: &LoadedSet, params: &NightParams) -> Result<LoadedSet, PipelineError> {
    let images: Vec<_> = set
        .manifest
        .records()
        .iter()
        .zip(&set.images)
        .map(|(r, img)| {
            let per_record = NightParams {
                seed: crate::seed::sub_seed(params.seed, &format!("record:{}", r.id)),
                ..*params
            };
            night_transform(img, &per_record)
        })
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
    Ok(LoadedSet::from_parts(Manifest::new(records)?, images)?)
}

fn concat_sets(a: &LoadedSet, b: &LoadedSet) -> Result<LoadedSet, PipelineError> {
    let mut records = a.manifest.records().to_vec();
    let mut images = a.images.clone();
    for (r, img) in b.manifest.records().iter().zip(&b.images) {
        let mut r = r.clone();
        r.id = format!("night_{}", r.id);
        records.push(r);
        images.push(img.clone());
    }
    Ok(LoadedSet::from_parts(Manifest::new(records)?, images)?)
}

/// Everything the ablation shares across rows for one seed.
pub struct AblationModels {
    pub base: LoadedSet,
    pub day_queries: LoadedSet,
    pub night_queries: LoadedSet,
    pub pretrained: Checkpoint,
    /// Fine-tuned on day + night data, no IKT.
    pub mixed: Checkpoint,
    /// Fine-tuned on night data only, no IKT (generative transfer only).
    pub gkt: Checkpoint,
    /// Fine-tuned on night data with the IKT term.
    pub ikt: Checkpoint,
    pub day_db: DescriptorDB,
}

/// Train every model variant once for a seed.
pub fn prepare_ablation(cfg: &AblateConfig, seed: u64) -> Result<AblationModels, PipelineError> {
    let synth_cfg = SynthConfig {
        seed: crate::seed::sub_seed(seed, "synth"),
        ..cfg.synth
    };
    let full = {
        let ds = crate::synthdata::generate(&synth_cfg)?;
        LoadedSet::from_parts(ds.manifest, ds.images)?
    };
    let (base, day_queries) = split_dataset(&full, synth_cfg.views_per_place, cfg.query_views)?;
    let night_queries = night_set(
        &day_queries,
        &NightParams {
            seed: crate::seed::sub_seed(seed, "night-queries"),
            ..cfg.night
        },
    )?;
    let night_train = night_set(
        &base,
        &NightParams {
            seed: crate::seed::sub_seed(seed, "night-train"),
            ..cfg.night
        },
    )?;

    let pre_cfg = TrainConfig {
        seed: crate::seed::sub_seed(seed, "pretrain"),
        ..cfg.pretrain
    };
    let (pretrained, _) = trainer::pretrain_day(&base, cfg.encoder, &pre_cfg)?;

    let ft_seed = crate::seed::sub_seed(seed, "finetune");
    let lmc_only = TrainConfig {
        seed: ft_seed,
        loss: crate::losses::LossConfig {
            alpha: 0.0,
            alpha_mode: crate::losses::AlphaMode::Fixed,
            ..cfg.finetune.loss
        },
        ..cfg.finetune
    };

    let mixed_set = concat_sets(&base, &night_train)?;
    let (mixed, _) = trainer::finetune_lmc(&mixed_set, &pretrained, &lmc_only)?;
    let (gkt, _) = trainer::finetune_lmc(&night_train, &pretrained, &lmc_only)?;

    let cache = trainer::build_day_cache(&base, &pretrained)?;
    // The cache is keyed by day ids; the night training set shares them.
    let ikt_cfg = TrainConfig {
        seed: ft_seed,
        ..cfg.finetune
    };
    let (ikt, _) = trainer::finetune_night(&night_train, &pretrained, &cache, &ikt_cfg)?;

    let day_db = retrieval::build_db(&base, &pretrained, 1)?;

    Ok(AblationModels {
        base,
        day_queries,
        night_queries,
        pretrained,
        mixed,
        gkt,
        ikt,
        day_db,
    })
}

/// Night-query recall for one model variant, searching the day database
/// in original-database mode or a freshly built night database otherwise.
pub fn night_recall(
    models: &AblationModels,
    query_model: &Checkpoint,
    od: bool,
    cfg: &AblateConfig,
) -> Result<SubsetRecall, PipelineError> {
    let routing = RoutingConfig::new(
        &models.pretrained,
        query_model,
        od,
        crate::geo::SolarConfig::default(),
    )?;
    let night_db_storage;
    let night_db = if od {
        None
    } else {
        night_db_storage = retrieval::build_db(&models.base, query_model, 1)?;
        Some(&night_db_storage)
    };
    let (report, _) = evaluate(
        &models.night_queries,
        &models.day_db,
        &models.base.manifest,
        night_db,
        &routing,
        &cfg.ns,
        cfg.threshold_m,
    )?;
    Ok(report.subsets[&DomainTag::Night].clone())
}

/// Run the seven-row ablation grid on one seed.
pub fn ablate(cfg: &AblateConfig, seed: u64) -> Result<AblationReport, PipelineError> {
    let models = prepare_ablation(cfg, seed)?;
    let mut rows = Vec::new();

    // Baseline: day-only training; night queries still go through the day
    // model (there is no night model to switch to).
    rows.push(AblationRow {
        name: "day-only baseline".into(),
        day_data: true,
        night_data: false,
        ikt: false,
        od: true,
        night: night_recall(&models, &models.pretrained, true, cfg)?,
    });
    rows.push(AblationRow {
        name: "day+night, od".into(),
        day_data: true,
        night_data: true,
        ikt: false,
        od: true,
        night: night_recall(&models, &models.mixed, true, cfg)?,
    });
    rows.push(AblationRow {
        name: "night-only, od".into(),
        day_data: false,
        night_data: true,
        ikt: false,
        od: true,
        night: night_recall(&models, &models.gkt, true, cfg)?,
    });
    rows.push(AblationRow {
        name: "night-only + ikt, od".into(),
        day_data: false,
        night_data: true,
        ikt: true,
        od: true,
        night: night_recall(&models, &models.ikt, true, cfg)?,
    });
    rows.push(AblationRow {
        name: "day+night".into(),
        day_data: true,
        night_data: true,
        ikt: false,
        od: false,
        night: night_recall(&models, &models.mixed, false, cfg)?,
    });
    rows.push(AblationRow {
        name: "night-only".into(),
        day_data: false,
        night_data: true,
        ikt: false,
        od: false,
        night: night_recall(&models, &models.gkt, false, cfg)?,
    });
    rows.push(AblationRow {
        name: "night-only + ikt".into(),
        day_data: false,
        night_data: true,
        ikt: true,
        od: false,
        night: night_recall(&models, &models.ikt, false, cfg)?,
    });

    Ok(AblationReport {
        ns: cfg.ns.clone(),
        threshold_m: cfg.threshold_m,
        rows,
    })
}

/// Text table for an ablation report.
pub fn render_ablation(report: &AblationReport) -> String {
    let mut out = String::new();
    let header: Vec<String> = report.ns.iter().map(|n| format!("R@{n}")).collect();
    out.push_str(&format!(
        "{:<22} {:>4} {:>6} {:>4} {:>4}  {}\n",
        "row",
        "day",
        "night",
        "ikt",
        "od",
        header.join(" / ")
    ));
    let mark = |b: bool| if b { "x" } else { "" };
    for row in &report.rows {
        let cells: Vec<String> = report
            .ns
            .iter()
            .map(|n| format!("{:.1}", row.night.recall_at[n] * 100.0))
            .collect();
        out.push_str(&format!(
            "{:<22} {:>4} {:>6} {:>4} {:>4}  {}\n",
            row.name,
            mark(row.day_data),
            mark(row.night_data),
            mark(row.ikt),
            mark(row.od),
            cells.join(" / ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    fn tiny_cfg() -> AblateConfig {
        AblateConfig {
            synth: SynthConfig {
                n_places: 6,
                views_per_place: 3,
                image_size: 16,
                ..Default::default()
            },
            encoder: EncoderConfig {
                patch_size: 4,
                feat_dim: 16,
                out_dim: 12,
            },
            pretrain: TrainConfig {
                epochs: 8,
                batch_size: 8,
                lr: 5e-3,
                ..Default::default()
            },
            finetune: TrainConfig {
                epochs: 3,
                batch_size: 8,
                lr: 2e-3,
                ..Default::default()
            },
            ns: vec![1, 2, 5],
            ..Default::default()
        }
    }

    #[test]
    fn split_keeps_all_records() {
        let ds = generate(&SynthConfig {
            n_places: 4,
            views_per_place: 3,
            image_size: 16,
            ..Default::default()
        })
        .unwrap();
        let set = LoadedSet::from_parts(ds.manifest, ds.images).unwrap();
        let (base, queries) = split_dataset(&set, 3, 1).unwrap();
        assert_eq!(base.len(), 8);
        assert_eq!(queries.len(), 4);
        // Every place contributes exactly one query.
        for (i, r) in queries.manifest.records().iter().enumerate() {
            assert_eq!(r.class_label, Some(i as u32));
        }
    }

    #[test]
    fn evaluate_day_queries_on_day_db_is_near_perfect_recall_at_size() {
        // With k = database size every query with a positive must recall.
        let cfg = tiny_cfg();
        let models = prepare_ablation(&cfg, 1).unwrap();
        let routing = RoutingConfig::new(
            &models.pretrained,
            &models.gkt,
            true,
            crate::geo::SolarConfig::default(),
        )
        .unwrap();
        let n = models.day_db.count();
        let (report, _) = evaluate(
            &models.day_queries,
            &models.day_db,
            &models.base.manifest,
            None,
            &routing,
            &[n],
            25.0,
        )
        .unwrap();
        let day = &report.subsets[&DomainTag::Day];
        assert_eq!(day.n_queries, 6);
        assert_eq!(day.recall_at[&n], 1.0);
        assert!(report.check_monotone());
    }

    #[test]
    fn ablation_runs_and_reports_all_rows() {
        let cfg = tiny_cfg();
        let report = ablate(&cfg, 3).unwrap();
        assert_eq!(report.rows.len(), 7);
        for row in &report.rows {
            assert_eq!(row.night.n_queries, 6);
            for n in &report.ns {
                let r = row.night.recall_at[n];
                assert!((0.0..=1.0).contains(&r));
            }
        }
        let text = render_ablation(&report);
        assert!(text.contains("day-only baseline"), "{text}");
    }

    #[test]
    fn ablation_is_deterministic() {
        let cfg = tiny_cfg();
        let a = ablate(&cfg, 5).unwrap();
        let b = ablate(&cfg, 5).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.night, rb.night);
        }
    }

    #[test]
    fn day_rankings_identical_between_baseline_and_ikt_system() {
        // The OD day path never touches the night model: day-query rankings
        // under the IKT system equal the baseline bitwise.
        let cfg = tiny_cfg();
        let models = prepare_ablation(&cfg, 7).unwrap();
        let baseline_routing = RoutingConfig::new(
            &models.pretrained,
            &models.pretrained,
            true,
            crate::geo::SolarConfig::default(),
        )
        .unwrap();
        let ikt_routing = RoutingConfig::new(
            &models.pretrained,
            &models.ikt,
            true,
            crate::geo::SolarConfig::default(),
        )
        .unwrap();
        let a = run_queries(&models.day_queries, &models.day_db, None, &baseline_routing, 5)
            .unwrap();
        let b = run_queries(&models.day_queries, &models.day_db, None, &ikt_routing, 5).unwrap();
        for (qa, qb) in a.iter().zip(&b) {
            assert_eq!(qa.domain, DomainTag::Day);
            assert_eq!(qa.ranked, qb.ranked);
            for (ha, hb) in qa.ranked.hits.iter().zip(&qb.ranked.hits) {
                assert_eq!(ha.similarity.to_bits(), hb.similarity.to_bits());
            }
        }
    }
}
