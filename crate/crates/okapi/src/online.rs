//! Online machinery: EMA target parameters, FIFO memory banks, warmup
//! schedules, the consistency loss, and the per-iteration matching step.

use crate::data::{DomainLabel, MatchRecord};
use crate::error::{Error, Result};
use crate::matcher::{caliper_nn_indexed, CaliperParams, DistanceKind, MatchItem, MatchRequest};
use crate::propensity::{inverse_frequency_weights, ps_loss_and_grad, score, PropensityModel};
use crate::vecmath::{dot, l2_normalize, squared_distance};

/// Shadow copy of the online parameters moving by the EMA recurrence
/// shadow <- zeta * shadow + (1 - zeta) * online, with zeta walking
/// linearly from `zeta_start` to `zeta_end` over `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub zeta_start: f64,
    pub zeta_end: f64,
    pub total_steps: usize,
    pub step: usize,
}

impl EmaState {
    pub fn new(shadow: Vec<f64>, zeta_start: f64, zeta_end: f64, total_steps: usize) -> Self {
        EmaState {
            shadow,
            zeta_start,
            zeta_end,
            total_steps,
            step: 0,
        }
    }

    /// Decay coefficient at the current step, clamped to [0, 1].
    /// A constant schedule is the degenerate case zeta_start == zeta_end.
    pub fn zeta(&self) -> f64 {
        let ratio = if self.total_steps == 0 {
            1.0
        } else {
            self.step as f64 / self.total_steps as f64
        };
        (self.zeta_start + (self.zeta_end - self.zeta_start) * ratio).clamp(0.0, 1.0)
    }
}

pub fn ema_update(state: &mut EmaState, online_params: &[f64]) -> Result<()> {
    if online_params.len() != state.shadow.len() {
        return Err(Error::LengthMismatch {
            expected: state.shadow.len(),
            got: online_params.len(),
        });
    }
    let zeta = state.zeta();
    for (s, &p) in state.shadow.iter_mut().zip(online_params) {
        *s = zeta * *s + (1.0 - zeta) * p;
    }
    state.step += 1;
    Ok(())
}

/// Consistency-loss prefactor: linear warmup over the first
/// `warmup_fraction` of training, then flat at `final_value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub final_value: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl LambdaSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let warmup_steps = self.warmup_fraction * self.total_steps as f64;
        if warmup_steps <= 0.0 {
            return self.final_value;
        }
        self.final_value * (step as f64 / warmup_steps).min(1.0)
    }
}

/// One stored sample: the id travels with the encoding so match records
/// can reference bank neighbours and self-matches stay excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub id: u64,
    pub encoding: Vec<f64>,
    pub domain: DomainLabel,
}

/// Fixed-size FIFO over recent target encodings and their domain labels.
/// Starts empty; once full, each push overwrites the oldest entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBankState {
    capacity: usize,
    entries: Vec<BankEntry>,
    write_cursor: usize,
}

impl MemoryBankState {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        MemoryBankState {
            capacity,
            entries: Vec::with_capacity(capacity),
            write_cursor: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in arrival order, oldest first.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &BankEntry> {
        let (newer, older) = self.entries.split_at(self.write_cursor.min(self.entries.len()));
        older.iter().chain(newer.iter())
    }

    pub fn push_batch(&mut self, batch: Vec<BankEntry>) -> Result<()> {
        if batch.len() > self.capacity {
            return Err(Error::BatchLargerThanBank {
                batch: batch.len(),
                capacity: self.capacity,
            });
        }
        for entry in batch {
            if self.entries.len() < self.capacity {
                self.entries.push(entry);
                // Cursor stays at the oldest slot, which is index 0
                // until the first wrap.
            } else {
                self.entries[self.write_cursor] = entry;
                self.write_cursor = (self.write_cursor + 1) % self.capacity;
            }
        }
        Ok(())
    }

    pub(crate) fn raw_parts(&self) -> (usize, &[BankEntry], usize) {
        (self.capacity, &self.entries, self.write_cursor)
    }

    pub(crate) fn from_raw_parts(
        capacity: usize,
        entries: Vec<BankEntry>,
        write_cursor: usize,
    ) -> Self {
        MemoryBankState {
            capacity,
            entries,
            write_cursor,
        }
    }
}

/// Mean squared distance between the normalized query encoding and its
/// matched neighbours' normalized (stop-gradient) encodings, with the
/// exact gradient w.r.t. the raw query encoding, normalization Jacobian
/// included. No neighbours means zero loss and zero gradient.
pub fn consistency_loss(z_q: &[f64], neighbors: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if neighbors.is_empty() {
        return Ok((0.0, vec![0.0; z_q.len()]));
    }
    let r = z_q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if r <= crate::vecmath::DEGENERATE_NORM {
        return Err(Error::DegenerateVector { norm: r });
    }
    let unit: Vec<f64> = z_q.iter().map(|x| x / r).collect();
    let k = neighbors.len() as f64;

    let mut loss = 0.0;
    let mut neighbor_mean = vec![0.0; z_q.len()];
    for n in neighbors {
        let n_hat = l2_normalize(n)?;
        loss += squared_distance(&unit, &n_hat);
        for (m, x) in neighbor_mean.iter_mut().zip(&n_hat) {
            *m += x / k;
        }
    }
    loss /= k;

    // d/dz (1/k) sum ||z/r - n_hat||^2 = (2/r) (u <u, m> - m), m the
    // mean normalized neighbour.
    let um = dot(&unit, &neighbor_mean);
    let grad: Vec<f64> = unit
        .iter()
        .zip(&neighbor_mean)
        .map(|(u, m)| 2.0 / r * (u * um - m))
        .collect();
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// Queries come from the frozen target encoder (the default).
    Target,
    /// Queries come from the online encoder; viable when zeta is high.
    Online,
}

/// One batch item entering the online matching step.
#[derive(Debug, Clone)]
pub struct OnlineBatchItem {
    pub id: u64,
    pub target_encoding: Vec<f64>,
    pub domain: DomainLabel,
}

/// A retrieved neighbour with its stop-gradient encoding resolved.
#[derive(Debug, Clone)]
pub struct MatchedNeighbor {
    pub id: u64,
    pub encoding: Vec<f64>,
    pub domain: DomainLabel,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct MatchStepOutcome {
    pub records: Vec<MatchRecord>,
    /// Per batch item, aligned with `records`; empty for filtered queries.
    pub neighbors: Vec<Vec<MatchedNeighbor>>,
}

/// One iteration of the online matching phase:
/// keys = batch target encodings + bank contents, scored with the
/// current scorer at the params' temperature; CaliperNN runs with the
/// chosen query source; the batch is then pushed into the bank
/// (unconditionally) and the scorer takes one weighted cross-entropy
/// step on the key set. The scorer step is skipped when the keys hold a
/// single domain, where the gradient would only push absent classes.
#[allow(clippy::too_many_arguments)]
pub fn okapi_match_step(
    batch: &[OnlineBatchItem],
    online_queries: Option<&[Vec<f64>]>,
    bank: &mut MemoryBankState,
    scorer: &mut PropensityModel,
    scorer_lr: f64,
    params: &CaliperParams,
    k: usize,
    query_source: QuerySource,
) -> Result<MatchStepOutcome> {
    if batch.len() > bank.capacity() {
        return Err(Error::BatchLargerThanBank {
            batch: batch.len(),
            capacity: bank.capacity(),
        });
    }

    let mut keys = Vec::with_capacity(batch.len() + bank.len());
    for item in batch {
        keys.push(MatchItem {
            id: item.id,
            embedding: item.target_encoding.clone(),
            domain: item.domain,
            score: score(scorer, &item.target_encoding, params.tau)?,
        });
    }
    for entry in bank.iter_oldest_first() {
        keys.push(MatchItem {
            id: entry.id,
            embedding: entry.encoding.clone(),
            domain: entry.domain,
            score: score(scorer, &entry.encoding, params.tau)?,
        });
    }

    let queries: Vec<MatchItem> = match query_source {
        QuerySource::Target => keys[..batch.len()].to_vec(),
        QuerySource::Online => {
            let online = online_queries.ok_or_else(|| {
                Error::Validation("online query encodings required for QuerySource::Online".into())
            })?;
            if online.len() != batch.len() {
                return Err(Error::LengthMismatch {
                    expected: batch.len(),
                    got: online.len(),
                });
            }
            batch
                .iter()
                .zip(online)
                .map(|(item, z)| {
                    Ok(MatchItem {
                        id: item.id,
                        embedding: z.clone(),
                        domain: item.domain,
                        score: score(scorer, z, params.tau)?,
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let indexed = caliper_nn_indexed(&MatchRequest {
        queries,
        keys: keys.clone(),
        k,
        params: *params,
        distance: DistanceKind::SquaredEuclideanNormalized,
    })?;
    let mut records = Vec::with_capacity(indexed.len());
    let mut neighbors = Vec::with_capacity(indexed.len());
    for (record, key_indices) in indexed {
        neighbors.push(
            key_indices
                .iter()
                .zip(&record.distances)
                .map(|(&idx, &distance)| MatchedNeighbor {
                    id: keys[idx].id,
                    encoding: keys[idx].embedding.clone(),
                    domain: keys[idx].domain,
                    distance,
                })
                .collect(),
        );
        records.push(record);
    }

    bank.push_batch(
        batch
            .iter()
            .map(|item| BankEntry {
                id: item.id,
                encoding: item.target_encoding.clone(),
                domain: item.domain,
            })
            .collect(),
    )?;

    // Biased online estimate of the scorer optimum: one step per
    // iteration on the assembled key set, at temperature 1.
    let labels: Vec<DomainLabel> = keys.iter().map(|key| key.domain).collect();
    let distinct: std::collections::HashSet<DomainLabel> = labels.iter().copied().collect();
    if distinct.len() >= 2 {
        let weights = inverse_frequency_weights(&labels, scorer.domain_count)?;
        let ps_batch: Vec<(Vec<f64>, DomainLabel)> =
            keys.into_iter().map(|key| (key.embedding, key.domain)).collect();
        let (_, grad) = ps_loss_and_grad(scorer, &ps_batch, &weights)?;
        scorer.apply_step(&grad, scorer_lr);
    }

    Ok(MatchStepOutcome { records, neighbors })
}
