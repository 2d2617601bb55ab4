//! recall@N with the 25-meter positive criterion, per-domain query
//! segmentation, and report rendering.
//!
//! The 25 m boundary is closed: a database item exactly at the threshold
//! counts as a positive. Queries with no positive at all are excluded from
//! the recall denominator and reported as a separate count.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_m, planar_m, DomainTag, GeoError, SolarConfig};
use crate::retrieval::{query_domain, RankedList, RetrievalError};
use crate::store::{CoordMode, Manifest, Position};

pub const DEFAULT_THRESHOLD_M: f64 = 25.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("coordinate mode mismatch: query is {query}, database is {db}")]
    ModeMismatch { query: CoordMode, db: CoordMode },
    #[error("empty list of N values")]
    EmptyNs,
    #[error("ranked lists ({ranked}) and positive sets ({positives}) differ in length")]
    LengthMismatch { ranked: usize, positives: usize },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Distance between two records' positions; modes must match.
pub fn position_distance_m(a: &Position, b: &Position) -> Result<f64, EvalError> {
    match (a, b) {
        (Position::Geo(pa), Position::Geo(pb)) => Ok(haversine_m(*pa, *pb)),
        (Position::Planar(pa), Position::Planar(pb)) => Ok(planar_m(*pa, *pb)),
        _ => Err(EvalError::ModeMismatch {
            query: a.mode(),
            db: b.mode(),
        }),
    }
}

/// Indices of database records within `threshold_m` of the query position
/// (closed boundary).
pub fn positives(
    query: &crate::store::ImageRecord,
    db_manifest: &Manifest,
    threshold_m: f64,
) -> Result<BTreeSet<usize>, EvalError> {
    let mut out = BTreeSet::new();
    for (i, record) in db_manifest.records().iter().enumerate() {
        if position_distance_m(&query.position, &record.position)? <= threshold_m {
            out.insert(i);
        }
    }
    Ok(out)
}

/// Recall fractions for one query subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecall {
    /// Queries with at least one positive (the recall denominator).
    pub n_queries: usize,
    /// Queries dropped because nothing in the database is within range.
    pub excluded_no_positive: usize,
    pub recall_at: BTreeMap<usize, f64>,
}

/// recall@N over aligned ranked lists and positive sets. Queries with empty
/// positive sets are excluded from the denominator and counted separately.
pub fn recall_at_n(
    ranked: &[RankedList],
    positives: &[BTreeSet<usize>],
    ns: &[usize],
) -> Result<SubsetRecall, EvalError> {
    if ns.is_empty() {
        return Err(EvalError::EmptyNs);
    }
    if ranked.len() != positives.len() {
        return Err(EvalError::LengthMismatch {
            ranked: ranked.len(),
            positives: positives.len(),
        });
    }
    let mut excluded = 0usize;
    let mut counted = 0usize;
    let mut hits_at: BTreeMap<usize, usize> = ns.iter().map(|&n| (n, 0)).collect();
    for (list, pos) in ranked.iter().zip(positives) {
        if pos.is_empty() {
            excluded += 1;
            continue;
        }
        counted += 1;
        for &n in ns {
            let hit = list
                .hits
                .iter()
                .take(n)
                .any(|h| pos.contains(&h.db_index));
            if hit {
                *hits_at.get_mut(&n).expect("n preinserted") += 1;
            }
        }
    }
    let recall_at = hits_at
        .into_iter()
        .map(|(n, hits)| {
            let recall = if counted == 0 {
                0.0
            } else {
                hits as f64 / counted as f64
            };
            (n, recall)
        })
        .collect();
    Ok(SubsetRecall {
        n_queries: counted,
        excluded_no_positive: excluded,
        recall_at,
    })
}

/// Partition query indices by domain: the explicit tag wins, otherwise the
/// solar classifier runs on utc + geographic position.
pub fn segment_queries(
    manifest: &Manifest,
    solar: SolarConfig,
) -> Result<BTreeMap<DomainTag, Vec<usize>>, EvalError> {
    let mut out: BTreeMap<DomainTag, Vec<usize>> = BTreeMap::new();
    for (i, record) in manifest.records().iter().enumerate() {
        let tag = query_domain(record, solar)?;
        out.entry(tag).or_default().push(i);
    }
    Ok(out)
}

/// The artifact's primary output: recall per query subset plus the exact
/// configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub threshold_m: f64,
    pub ns: Vec<usize>,
    pub od_mode: bool,
    pub subsets: BTreeMap<DomainTag, SubsetRecall>,
}

impl RecallReport {
    /// Recall must be non-decreasing in N within every subset.
    pub fn check_monotone(&self) -> bool {
        self.subsets.values().all(|s| {
            s.recall_at
                .values()
                .zip(s.recall_at.values().skip(1))
                .all(|(a, b)| a <= b)
        })
    }
}

/// One line per subset: "R@1 / R@5 / R@10" as percentages with one decimal.
/// Empty subsets render as em-dashes.
pub fn render_report(report: &RecallReport) -> String {
    let mut out = String::new();
    let header: Vec<String> = report.ns.iter().map(|n| format!("R@{n}")).collect();
    out.push_str(&format!(
        "{:<10} {:>8}  {}\n",
        "subset",
        "queries",
        header.join(" / ")
    ));
    for (tag, subset) in &report.subsets {
        let cells: Vec<String> = if subset.n_queries == 0 {
            report.ns.iter().map(|_| "\u{2014}".to_string()).collect()
        } else {
            report
                .ns
                .iter()
                .map(|n| format!("{:.1}", subset.recall_at[n] * 100.0))
                .collect()
        };
        out.push_str(&format!(
            "{:<10} {:>8}  {}\n",
            tag.to_string(),
            subset.n_queries,
            cells.join(" / ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::PlanarPoint;
    use crate::retrieval::Hit;
    use crate::store::{ImageRecord, ImageSource};
    use chrono::TimeZone;

    fn planar_record(id: &str, x: f64, y: f64) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            image: ImageSource::Path(format!("{id}.png")),
            position: Position::Planar(PlanarPoint::new(x, y).unwrap()),
            utc: None,
            class_label: None,
            domain: None,
        }
    }

    fn ranked(indices_sims: &[(usize, f64)]) -> RankedList {
        RankedList {
            hits: indices_sims
                .iter()
                .map(|&(db_index, similarity)| Hit {
                    db_index,
                    id: format!("db{db_index}"),
                    similarity,
                })
                .collect(),
        }
    }

    #[test]
    fn positives_closed_boundary() {
        let db = Manifest::new(vec![
            planar_record("a", 10.0, 0.0),
            planar_record("b", 30.0, 0.0),
            planar_record("c", 25.0, 0.0),
        ])
        .unwrap();
        let q = planar_record("q", 0.0, 0.0);
        let got = positives(&q, &db, 25.0).unwrap();
        // 10 m in, 30 m out, exactly 25 m in (closed boundary).
        assert_eq!(got, BTreeSet::from([0, 2]));
    }

    #[test]
    fn positives_empty_when_all_far() {
        let db = Manifest::new(vec![planar_record("a", 100.0, 0.0)]).unwrap();
        let q = planar_record("q", 0.0, 0.0);
        assert!(positives(&q, &db, 25.0).unwrap().is_empty());
    }

    #[test]
    fn positives_mode_mismatch() {
        let db = Manifest::new(vec![planar_record("a", 0.0, 0.0)]).unwrap();
        let mut q = planar_record("q", 0.0, 0.0);
        q.position = Position::Geo(crate::geo::GeoPoint::new(0.0, 0.0).unwrap());
        assert!(matches!(
            positives(&q, &db, 25.0),
            Err(EvalError::ModeMismatch { .. })
        ));
    }

    /// The two-query fixture: q1's top hit is a positive; q2's top hit is
    /// 1000 m away but its second hit is 5 m away.
    #[test]
    fn recall_two_query_fixture() {
        let ranked_lists = vec![
            ranked(&[(0, 0.99), (1, 0.20)]),
            ranked(&[(1, 0.95), (2, 0.90)]),
        ];
        let positive_sets = vec![BTreeSet::from([0]), BTreeSet::from([2])];
        let got = recall_at_n(&ranked_lists, &positive_sets, &[1, 2]).unwrap();
        assert_eq!(got.n_queries, 2);
        assert_eq!(got.recall_at[&1], 0.5);
        assert_eq!(got.recall_at[&2], 1.0);
    }

    #[test]
    fn recall_exhaustive_and_zero_cases() {
        let lists = vec![ranked(&[(0, 0.9), (1, 0.8)]), ranked(&[(1, 0.7), (0, 0.6)])];
        let pos = vec![BTreeSet::from([1]), BTreeSet::from([0])];
        let full = recall_at_n(&lists, &pos, &[2]).unwrap();
        assert_eq!(full.recall_at[&2], 1.0);

        let none = vec![BTreeSet::from([5]), BTreeSet::from([5])];
        let zero = recall_at_n(&lists, &none, &[1, 2]).unwrap();
        assert_eq!(zero.recall_at[&1], 0.0);
        assert_eq!(zero.recall_at[&2], 0.0);
    }

    #[test]
    fn excluded_queries_do_not_change_others() {
        let lists = vec![
            ranked(&[(0, 0.9)]),
            ranked(&[(3, 0.8)]),
            ranked(&[(1, 0.7)]),
        ];
        let with_excluded = vec![
            BTreeSet::from([0]),
            BTreeSet::new(),
            BTreeSet::from([2]),
        ];
        let got = recall_at_n(&lists, &with_excluded, &[1]).unwrap();
        assert_eq!(got.n_queries, 2);
        assert_eq!(got.excluded_no_positive, 1);
        assert_eq!(got.recall_at[&1], 0.5);

        // Without the positive-less query the fractions are identical.
        let trimmed_lists = vec![lists[0].clone(), lists[2].clone()];
        let trimmed_pos = vec![with_excluded[0].clone(), with_excluded[2].clone()];
        let trimmed = recall_at_n(&trimmed_lists, &trimmed_pos, &[1]).unwrap();
        assert_eq!(trimmed.recall_at[&1], got.recall_at[&1]);
    }

    #[test]
    fn empty_ns_rejected() {
        assert!(matches!(
            recall_at_n(&[], &[], &[]),
            Err(EvalError::EmptyNs)
        ));
    }

    #[test]
    fn segment_explicit_tags() {
        let mut r1 = planar_record("a", 0.0, 0.0);
        r1.domain = Some(DomainTag::Day);
        let mut r2 = planar_record("b", 1.0, 0.0);
        r2.domain = Some(DomainTag::Twilight);
        let mut r3 = planar_record("c", 2.0, 0.0);
        r3.domain = Some(DomainTag::Night);
        let manifest = Manifest::new(vec![r1, r2, r3]).unwrap();
        let got = segment_queries(&manifest, SolarConfig::default()).unwrap();
        assert_eq!(got[&DomainTag::Day], vec![0]);
        assert_eq!(got[&DomainTag::Twilight], vec![1]);
        assert_eq!(got[&DomainTag::Night], vec![2]);
    }

    #[test]
    fn segment_all_day_single_bucket() {
        let records: Vec<ImageRecord> = (0..4)
            .map(|i| {
                let mut r = planar_record(&format!("r{i}"), i as f64, 0.0);
                r.domain = Some(DomainTag::Day);
                r
            })
            .collect();
        let manifest = Manifest::new(records).unwrap();
        let got = segment_queries(&manifest, SolarConfig::default()).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[&DomainTag::Day].len(), 4);
    }

    #[test]
    fn segment_untagged_deep_night_by_solar() {
        let mut r = planar_record("q", 0.0, 0.0);
        r.position = Position::Geo(crate::geo::GeoPoint::new(0.0, 0.0).unwrap());
        r.utc = Some(chrono::Utc.with_ymd_and_hms(2024, 3, 20, 0, 7, 0).unwrap());
        let manifest = Manifest::new(vec![r]).unwrap();
        let got = segment_queries(&manifest, SolarConfig::default()).unwrap();
        assert_eq!(got[&DomainTag::Night], vec![0]);
    }

    #[test]
    fn segment_undeterminable_domain_errors() {
        let r = planar_record("q", 0.0, 0.0);
        let manifest = Manifest::new(vec![r]).unwrap();
        assert!(segment_queries(&manifest, SolarConfig::default()).is_err());
    }

    #[test]
    fn render_formats_percentages() {
        let mut subsets = BTreeMap::new();
        subsets.insert(
            DomainTag::Night,
            SubsetRecall {
                n_queries: 823,
                excluded_no_positive: 0,
                recall_at: BTreeMap::from([(1, 0.530), (5, 0.712), (10, 0.764)]),
            },
        );
        let report = RecallReport {
            threshold_m: 25.0,
            ns: vec![1, 5, 10],
            od_mode: true,
            subsets,
        };
        let text = render_report(&report);
        assert!(text.contains("53.0 / 71.2 / 76.4"), "{text}");
    }

    #[test]
    fn render_perfect_and_empty_subsets() {
        let mut subsets = BTreeMap::new();
        subsets.insert(
            DomainTag::Day,
            SubsetRecall {
                n_queries: 10,
                excluded_no_positive: 0,
                recall_at: BTreeMap::from([(1, 1.0), (5, 1.0), (10, 1.0)]),
            },
        );
        subsets.insert(
            DomainTag::Twilight,
            SubsetRecall {
                n_queries: 0,
                excluded_no_positive: 0,
                recall_at: BTreeMap::from([(1, 0.0), (5, 0.0), (10, 0.0)]),
            },
        );
        let report = RecallReport {
            threshold_m: 25.0,
            ns: vec![1, 5, 10],
            od_mode: false,
            subsets,
        };
        let text = render_report(&report);
        assert!(text.contains("100.0 / 100.0 / 100.0"), "{text}");
        assert!(text.contains("\u{2014} / \u{2014} / \u{2014}"), "{text}");
    }

    #[test]
    fn monotonicity_check() {
        let good = RecallReport {
            threshold_m: 25.0,
            ns: vec![1, 5],
            od_mode: true,
            subsets: BTreeMap::from([(
                DomainTag::Day,
                SubsetRecall {
                    n_queries: 4,
                    excluded_no_positive: 0,
                    recall_at: BTreeMap::from([(1, 0.5), (5, 0.75)]),
                },
            )]),
        };
        assert!(good.check_monotone());
        let bad = RecallReport {
            subsets: BTreeMap::from([(
                DomainTag::Day,
                SubsetRecall {
                    n_queries: 4,
                    excluded_no_positive: 0,
                    recall_at: BTreeMap::from([(1, 0.8), (5, 0.75)]),
                },
            )]),
            ..good
        };
        assert!(!bad.check_monotone());
    }
}
