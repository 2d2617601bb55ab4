//! Exact top-K cosine retrieval over a descriptor database, plus the
//! partial divide-and-conquer routing: night queries are encoded by the
//! night model while the database keeps day-model descriptors.
//!
//! Search is exact by design: the evaluation is exact ranking, and an
//! approximate index would confound recall numbers. Similarity is the dot
//! product, which equals the cosine because all vectors are unit-norm.
//! Ties break toward the lower database index.

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::dataset::LoadedSet;
use crate::encoder::{self, Descriptor, EncoderError};
use crate::geo::{classify_domain, DomainTag, GeoError, SolarConfig};
use crate::raster::RasterImage;
use crate::store::{Checkpoint, DescriptorDB, ImageRecord, Position, StoreError};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query dim {got} does not match database dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("day and night models have output dims {day} and {night}")]
    ModelDimMismatch { day: usize, night: usize },
    #[error("record {id} has no domain tag and no utc+geo position to classify from")]
    MissingDomainEvidence { id: String },
    #[error(
        "original-database mode requires day-model descriptors: database fingerprint {db} \
         does not match day model {model}"
    )]
    WrongDatabase { db: String, model: String },
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub db_index: usize,
    pub id: String,
    pub similarity: f64,
}

/// Top-K results ordered by non-increasing similarity, ties broken by
/// ascending database index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    pub hits: Vec<Hit>,
}

/// Build a descriptor database: one unit-norm row per record in manifest
/// order, stamped with the model fingerprint. `threads` caps the worker
/// count; results are identical for any value because rows are written into
/// disjoint slots.
pub fn build_db(
    set: &LoadedSet,
    model: &Checkpoint,
    threads: usize,
) -> Result<DescriptorDB, RetrievalError> {
    let mut db = DescriptorDB::new(model.out_dim(), model.fingerprint.clone())?;
    let n = set.len();
    let mut rows: Vec<Option<Vec<f32>>> = vec![None; n];
    let workers = threads.max(1).min(n.max(1));
    if workers <= 1 || n < 2 {
        for (slot, img) in rows.iter_mut().zip(&set.images) {
            *slot = Some(encoder::forward(img, &model.params)?.to_f32());
        }
    } else {
        let chunk = n.div_ceil(workers);
        let results: Vec<Result<Vec<(usize, Vec<f32>)>, EncoderError>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = set
                    .images
                    .chunks(chunk)
                    .enumerate()
                    .map(|(ci, imgs)| {
                        let params = &model.params;
                        scope.spawn(move || {
                            imgs.iter()
                                .enumerate()
                                .map(|(i, img)| {
                                    Ok((ci * chunk + i, encoder::forward(img, params)?.to_f32()))
                                })
                                .collect()
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
        for result in results {
            for (i, row) in result? {
                rows[i] = Some(row);
            }
        }
    }
    for (record, row) in set.manifest.records().iter().zip(rows) {
        db.push(record.id.clone(), &row.expect("every slot filled"))?;
    }
    Ok(db)
}

fn better(sim_a: f64, idx_a: usize, sim_b: f64, idx_b: usize) -> bool {
    sim_a > sim_b || (sim_a == sim_b && idx_a < idx_b)
}

/// Exact top-k: the k highest similarities, in order, with the declared
/// tie-break. Block-scanned with a bounded candidate heap; bit-equal in
/// membership and order to a naive full sort.
pub fn top_k(db: &DescriptorDB, query: &[f64], k: usize) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if query.len() != db.dim() {
        return Err(RetrievalError::DimMismatch {
            got: query.len(),
            expected: db.dim(),
        });
    }
    const BLOCK: usize = 512;
    // Candidates kept as (similarity, index); `worst` tracks the slot to
    // evict. Small k makes the linear scan of the candidate list cheap.
    let mut cands: Vec<(f64, usize)> = Vec::with_capacity(k);
    let count = db.count();
    let mut idx = 0;
    while idx < count {
        let end = (idx + BLOCK).min(count);
        for i in idx..end {
            let row = db.row(i);
            let sim: f64 = row
                .iter()
                .zip(query)
                .map(|(&r, &q)| f64::from(r) * q)
                .sum();
            if cands.len() < k {
                cands.push((sim, i));
            } else {
                let (wi, &(wsim, widx)) = cands
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        if better(a.1 .0, a.1 .1, b.1 .0, b.1 .1) {
                            std::cmp::Ordering::Greater
                        } else {
                            std::cmp::Ordering::Less
                        }
                    })
                    .expect("candidates non-empty");
                if better(sim, i, wsim, widx) {
                    cands[wi] = (sim, i);
                }
            }
        }
        idx = end;
    }
    cands.sort_by(|a, b| {
        if better(a.0, a.1, b.0, b.1) {
            std::cmp::Ordering::Less
        } else {
            std::cmp::Ordering::Greater
        }
    });
    Ok(RankedList {
        hits: cands
            .into_iter()
            .map(|(similarity, db_index)| Hit {
                db_index,
                id: db.id(db_index).to_owned(),
                similarity,
            })
            .collect(),
    })
}

/// Day/night model pair with routing policy.
#[derive(Debug)]
pub struct RoutingConfig<'a> {
    pub day_model: &'a Checkpoint,
    pub night_model: &'a Checkpoint,
    /// Original-database mode: the database always holds day-model
    /// descriptors; only queries switch encoders.
    pub od_mode: bool,
    /// Route twilight queries to the night model (default true).
    pub twilight_to_night: bool,
    pub solar: SolarConfig,
}

impl<'a> RoutingConfig<'a> {
    pub fn new(
        day_model: &'a Checkpoint,
        night_model: &'a Checkpoint,
        od_mode: bool,
        solar: SolarConfig,
    ) -> Result<Self, RetrievalError> {
        if day_model.out_dim() != night_model.out_dim() {
            return Err(RetrievalError::ModelDimMismatch {
                day: day_model.out_dim(),
                night: night_model.out_dim(),
            });
        }
        Ok(Self {
            day_model,
            night_model,
            od_mode,
            twilight_to_night: true,
            solar,
        })
    }

    /// Which model encodes a query of this domain.
    pub fn model_for(&self, domain: DomainTag) -> &'a Checkpoint {
        match domain {
            DomainTag::Day => self.day_model,
            DomainTag::Night => self.night_model,
            DomainTag::Twilight => {
                if self.twilight_to_night {
                    self.night_model
                } else {
                    self.day_model
                }
            }
        }
    }

    /// In original-database mode the searched database must hold day-model
    /// descriptors; asserted by fingerprint.
    pub fn verify_database(&self, db: &DescriptorDB) -> Result<(), RetrievalError> {
        if self.od_mode && db.encoder_fingerprint() != self.day_model.fingerprint {
            return Err(RetrievalError::WrongDatabase {
                db: db.encoder_fingerprint().to_owned(),
                model: self.day_model.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Determine a record's domain: the explicit tag wins; otherwise classify
/// from utc plus a geographic position.
pub fn query_domain(
    meta: &ImageRecord,
    solar: SolarConfig,
) -> Result<DomainTag, RetrievalError> {
    if let Some(tag) = meta.domain {
        return Ok(tag);
    }
    match (&meta.position, meta.utc) {
        (Position::Geo(p), Some(utc)) => Ok(classify_domain(*p, utc, solar)?),
        _ => Err(RetrievalError::MissingDomainEvidence {
            id: meta.id.clone(),
        }),
    }
}

/// Route one query to its encoder: night (and by default twilight) queries
/// use the night model, day queries the day model.
pub fn route_query(
    img: &RasterImage,
    meta: &ImageRecord,
    routing: &RoutingConfig,
) -> Result<(Descriptor, DomainTag), RetrievalError> {
    let domain = query_domain(meta, routing.solar)?;
    let model = routing.model_for(domain);
    Ok((encoder::forward(img, &model.params)?, domain))
}

/// Convenience for fixtures: classify from an explicit timestamp+position
/// without a full record.
pub fn domain_at(
    position: &Position,
    utc: Option<DateTime<Utc>>,
    solar: SolarConfig,
) -> Option<DomainTag> {
    match (position, utc) {
        (Position::Geo(p), Some(t)) => classify_domain(*p, t, solar).ok(),
        _ => None,
    }
}
