//! CaliperNN: cross-domain k-nearest-neighbour matching over normalized
//! encodings, restricted by a fixed caliper on each sample's propensity
//! score and a std-caliper on pairwise score differences.
//!
//! `brute_force_nn` implements the identical contract as a literal
//! O(Q*K) scan with no code shared with `caliper_nn`; it exists as the
//! test oracle and stays that way.

use std::collections::BinaryHeap;
use std::collections::HashSet;

use rayon::prelude::*;

use crate::data::{DomainLabel, EmbeddingSet, FilterReason, MatchRecord};
use crate::error::{Error, Result};
use crate::propensity::{score_set, PropensityModel, PropensityScore};
use crate::vecmath::{l2_normalize, squared_distance, widen};

/// The caliper hyperparameter triple: fixed-caliper threshold,
/// std-caliper multiplier (infinite disables it), and temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaliperParams {
    pub t_fixed: f64,
    pub t_std: f64,
    pub tau: f64,
}

impl CaliperParams {
    pub fn new(t_fixed: f64, t_std: f64, tau: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&t_fixed) {
            return Err(Error::Validation(format!(
                "t_fixed must lie in [0, 0.5), got {t_fixed}"
            )));
        }
        if t_std.is_nan() || t_std <= 0.0 {
            return Err(Error::Validation(format!(
                "t_std must be positive (or infinite to disable), got {t_std}"
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Validation(format!("tau must be positive, got {tau}")));
        }
        Ok(CaliperParams { t_fixed, t_std, tau })
    }

    /// Both calipers off, no temperature scaling: plain cross-domain k-NN.
    pub fn disabled() -> Self {
        CaliperParams {
            t_fixed: 0.0,
            t_std: f64::INFINITY,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    SquaredEuclideanNormalized,
}

/// One query or key: encoding, domain, and propensity score.
#[derive(Debug, Clone)]
pub struct MatchItem {
    pub id: u64,
    pub embedding: Vec<f64>,
    pub domain: DomainLabel,
    pub score: PropensityScore,
}

#[derive(Debug, Clone)]
pub struct MatchRequest {
    pub queries: Vec<MatchItem>,
    pub keys: Vec<MatchItem>,
    pub k: usize,
    pub params: CaliperParams,
    pub distance: DistanceKind,
}

/// Fixed-caliper filter. Binary scores pass iff the positive-class
/// probability lies inside [t_fixed, 1 - t_fixed]; multiclass scores
/// pass iff the max component does not exceed 1 - t_fixed. t_fixed = 0
/// retains everything.
pub fn fixed_caliper_pass(e: &PropensityScore, t_fixed: f64) -> bool {
    if e.arity() == 2 {
        let p = e.probs[1];
        t_fixed <= p && p <= 1.0 - t_fixed
    } else {
        e.max_component() <= 1.0 - t_fixed
    }
}

/// Std-caliper threshold: t_std times the population standard deviation
/// of the scores' caliper scalars. Infinite t_std disables the filter.
pub fn std_caliper_threshold(all_scores: &[PropensityScore], t_std: f64) -> Result<f64> {
    if all_scores.len() < 2 {
        return Err(Error::TooFewScores {
            got: all_scores.len(),
        });
    }
    if t_std.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let scalars: Vec<f64> = all_scores.iter().map(PropensityScore::caliper_scalar).collect();
    Ok(t_std * population_sd(&scalars))
}

fn population_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt()
}

/// Scalars entering the std-caliper sigma: every query, plus every key
/// whose id does not already appear among the queries.
fn pooled_scalars(req: &MatchRequest) -> Vec<f64> {
    let query_ids: HashSet<u64> = req.queries.iter().map(|q| q.id).collect();
    req.queries
        .iter()
        .map(|q| q.score.caliper_scalar())
        .chain(
            req.keys
                .iter()
                .filter(|k| !query_ids.contains(&k.id))
                .map(|k| k.score.caliper_scalar()),
        )
        .collect()
}

fn validate_request(req: &MatchRequest) -> Result<(usize, usize)> {
    assert!(req.k >= 1, "k must be at least 1");
    let mut items = req.queries.iter().chain(&req.keys);
    let first = match items.next() {
        Some(item) => item,
        None => return Ok((0, 0)),
    };
    let dim = first.embedding.len();
    let arity = first.score.arity();
    for item in req.queries.iter().chain(&req.keys) {
        if item.embedding.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: item.embedding.len(),
            });
        }
        if item.score.arity() != arity {
            return Err(Error::ArityMismatch {
                expected: arity,
                got: item.score.arity(),
            });
        }
    }
    Ok((dim, arity))
}

// Max-heap key ordering candidates by (distance, key id); the heap root
// is the worst retained candidate.
#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    id: u64,
    key_idx: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// CaliperNN proper. Parallel across queries; output is ordered by query
/// position and is identical for any thread count.
pub fn caliper_nn(req: &MatchRequest) -> Result<Vec<MatchRecord>> {
    Ok(caliper_nn_indexed(req)?
        .into_iter()
        .map(|(record, _)| record)
        .collect())
}

/// Like `caliper_nn` but also returns each neighbour's index into
/// `req.keys`. Ids alone cannot resolve a neighbour when the key pool
/// holds a fresh and a stale encoding of the same sample.
pub(crate) fn caliper_nn_indexed(req: &MatchRequest) -> Result<Vec<(MatchRecord, Vec<usize>)>> {
    validate_request(req)?;
    let DistanceKind::SquaredEuclideanNormalized = req.distance;

    let threshold = if req.params.t_std.is_infinite() {
        f64::INFINITY
    } else {
        let scalars = pooled_scalars(req);
        if scalars.len() < 2 {
            // A single pooled score has zero spread; only exact ties match.
            0.0
        } else {
            req.params.t_std * population_sd(&scalars)
        }
    };

    let normalized_keys: Vec<Vec<f64>> = req
        .keys
        .iter()
        .map(|k| l2_normalize(&k.embedding))
        .collect::<Result<_>>()?;
    let key_pass: Vec<bool> = req
        .keys
        .iter()
        .map(|k| fixed_caliper_pass(&k.score, req.params.t_fixed))
        .collect();

    req.queries
        .par_iter()
        .map(|q| {
            if !fixed_caliper_pass(&q.score, req.params.t_fixed) {
                return Ok((
                    MatchRecord::filtered(q.id, FilterReason::QueryCaliper),
                    Vec::new(),
                ));
            }
            let q_hat = l2_normalize(&q.embedding)?;
            let q_scalar = q.score.caliper_scalar();

            let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(req.k + 1);
            for (idx, key) in req.keys.iter().enumerate() {
                if key.domain == q.domain
                    || key.id == q.id
                    || !key_pass[idx]
                    || (key.score.caliper_scalar() - q_scalar).abs() > threshold
                {
                    continue;
                }
                let dist = squared_distance(&q_hat, &normalized_keys[idx]);
                heap.push(HeapEntry {
                    dist,
                    id: key.id,
                    key_idx: idx,
                });
                if heap.len() > req.k {
                    heap.pop();
                }
            }
            if heap.len() < req.k {
                return Ok((
                    MatchRecord::filtered(q.id, FilterReason::NoValidKeys),
                    Vec::new(),
                ));
            }
            let mut picked = heap.into_sorted_vec();
            picked.truncate(req.k);
            let record = MatchRecord {
                query_id: q.id,
                neighbor_ids: picked.iter().map(|e| req.keys[e.key_idx].id).collect(),
                distances: picked.iter().map(|e| e.dist).collect(),
                filtered: FilterReason::None,
            };
            Ok((record, picked.iter().map(|e| e.key_idx).collect()))
        })
        .collect()
}

/// Test oracle: the same contract as `caliper_nn`, written as the most
/// literal scan with every rule restated inline. Do not refactor to
/// share code with the production path.
pub fn brute_force_nn(req: &MatchRequest) -> Result<Vec<MatchRecord>> {
    validate_request(req)?;
    let DistanceKind::SquaredEuclideanNormalized = req.distance;

    let scalar_of = |e: &PropensityScore| -> f64 {
        if e.probs.len() == 2 {
            e.probs[1]
        } else {
            e.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }
    };
    let passes_fixed = |e: &PropensityScore| -> bool {
        if e.probs.len() == 2 {
            req.params.t_fixed <= e.probs[1] && e.probs[1] <= 1.0 - req.params.t_fixed
        } else {
            let max = e.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max <= 1.0 - req.params.t_fixed
        }
    };
    let unit = |v: &[f64]| -> Result<Vec<f64>> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= 1e-30 {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(v.iter().map(|x| x / norm).collect())
    };

    let threshold = if req.params.t_std.is_infinite() {
        f64::INFINITY
    } else {
        let mut scalars = Vec::new();
        for q in &req.queries {
            scalars.push(scalar_of(&q.score));
        }
        for key in &req.keys {
            if req.queries.iter().all(|q| q.id != key.id) {
                scalars.push(scalar_of(&key.score));
            }
        }
        if scalars.len() < 2 {
            0.0
        } else {
            let n = scalars.len() as f64;
            let mean = scalars.iter().sum::<f64>() / n;
            let var = scalars.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            req.params.t_std * var.sqrt()
        }
    };

    let mut records = Vec::with_capacity(req.queries.len());
    for q in &req.queries {
        if !passes_fixed(&q.score) {
            records.push(MatchRecord::filtered(q.id, FilterReason::QueryCaliper));
            continue;
        }
        let mut candidates: Vec<(f64, u64)> = Vec::new();
        for key in &req.keys {
            if key.domain == q.domain {
                continue;
            }
            if key.id == q.id {
                continue;
            }
            if !passes_fixed(&key.score) {
                continue;
            }
            if (scalar_of(&key.score) - scalar_of(&q.score)).abs() > threshold {
                continue;
            }
            let q_hat = unit(&q.embedding)?;
            let k_hat = unit(&key.embedding)?;
            let dist = q_hat
                .iter()
                .zip(&k_hat)
                .map(|(a, b)| {
                    let d = a - b;
                    d * d
                })
                .sum::<f64>();
            candidates.push((dist, key.id));
        }
        if candidates.len() < req.k {
            records.push(MatchRecord::filtered(q.id, FilterReason::NoValidKeys));
            continue;
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        candidates.truncate(req.k);
        records.push(MatchRecord {
            query_id: q.id,
            neighbor_ids: candidates.iter().map(|c| c.1).collect(),
            distances: candidates.iter().map(|c| c.0).collect(),
            filtered: FilterReason::None,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchDirection {
    LabelledToUnlabelled,
    UnlabelledToLabelled,
    Both,
}

/// Offline MatchedSamples driver over the labelled/unlabelled split.
///
/// The split is the binary domain reduction: samples carrying a target
/// are domain 1, the rest domain 0, so the cross-domain constraint is
/// exactly the cross-split constraint. Scores come from the given model
/// at the params' temperature; each sample is scored once.
pub fn matched_samples(
    data: &EmbeddingSet,
    model: &PropensityModel,
    params: &CaliperParams,
    k: usize,
    direction: MatchDirection,
) -> Result<Vec<MatchRecord>> {
    let scores = score_set(model, data, params.tau)?;
    let mut labelled = Vec::new();
    let mut unlabelled = Vec::new();
    for (sample, score) in data.samples.iter().zip(scores) {
        let item = MatchItem {
            id: sample.id,
            embedding: widen(&sample.embedding),
            domain: DomainLabel::binary(sample.is_labelled()),
            score,
        };
        if sample.is_labelled() {
            labelled.push(item);
        } else {
            unlabelled.push(item);
        }
    }
    if labelled.is_empty() || unlabelled.is_empty() {
        return Err(Error::Validation(
            "matched_samples needs both labelled and unlabelled samples".into(),
        ));
    }

    let run = |queries: &[MatchItem], keys: &[MatchItem]| -> Result<Vec<MatchRecord>> {
        caliper_nn(&MatchRequest {
            queries: queries.to_vec(),
            keys: keys.to_vec(),
            k,
            params: *params,
            distance: DistanceKind::SquaredEuclideanNormalized,
        })
    };

    match direction {
        MatchDirection::LabelledToUnlabelled => run(&labelled, &unlabelled),
        MatchDirection::UnlabelledToLabelled => run(&unlabelled, &labelled),
        MatchDirection::Both => {
            let mut records = run(&labelled, &unlabelled)?;
            records.extend(run(&unlabelled, &labelled)?);
            Ok(records)
        }
    }
}
