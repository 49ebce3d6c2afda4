//! Covariate-balance diagnostics (standardized mean differences and
//! variance ratios) and the static grid search over caliper settings.

use rayon::prelude::*;
use serde::Serialize;

use crate::data::{DomainLabel, EmbeddingSet, MatchRecord};
use crate::error::{Error, Result};
use crate::matcher::{matched_samples, CaliperParams, MatchDirection};
use crate::propensity::PropensityModel;
use crate::vecmath::widen;

/// Balance between two covariate sets. SMD has an ideal value of 0, VR
/// an ideal value of 1. A NaN variance-ratio entry marks a dimension
/// where one set has zero variance; such dimensions are skipped by the
/// log-VR aggregate (and serialize as JSON null).
#[derive(Debug, Clone, Serialize)]
pub struct BalanceReport {
    pub per_dim_smd: Vec<f64>,
    pub per_dim_vr: Vec<f64>,
    pub mean_smd: f64,
    pub mean_abs_log_vr: f64,
    /// Matched queries over total queries; 1 for raw (unmatched) balance.
    pub retention_rate: f64,
    /// The compared pair, when the report covers exactly one.
    pub domain_pair: Option<(DomainLabel, DomainLabel)>,
}

/// Ranking score: deviations from the two ideals, treated symmetrically.
pub fn balance_score(report: &BalanceReport) -> f64 {
    report.mean_smd + report.mean_abs_log_vr
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Pairwise balance: per-dimension SMD with Rubin's pooled standard
/// deviation sqrt((s2_a + s2_b) / 2) and VR = s2_a / s2_b, both with
/// n-1 variances.
pub fn balance(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<BalanceReport> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptySet);
    }
    let smallest = set_a.len().min(set_b.len());
    if smallest < 2 {
        return Err(Error::TooFewSamples { got: smallest });
    }
    let dim = set_a[0].len();
    for v in set_a.iter().chain(set_b) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }

    let mut per_dim_smd = Vec::with_capacity(dim);
    let mut per_dim_vr = Vec::with_capacity(dim);
    for j in 0..dim {
        let col_a: Vec<f64> = set_a.iter().map(|v| v[j]).collect();
        let col_b: Vec<f64> = set_b.iter().map(|v| v[j]).collect();
        let (mean_a, var_a) = mean_and_var(&col_a);
        let (mean_b, var_b) = mean_and_var(&col_b);

        let pooled = ((var_a + var_b) / 2.0).sqrt();
        let diff = (mean_a - mean_b).abs();
        let smd = if pooled == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                return Err(Error::ZeroVariance { dim: j });
            }
        } else {
            diff / pooled
        };
        per_dim_smd.push(smd);
        per_dim_vr.push(if var_a > 0.0 && var_b > 0.0 {
            var_a / var_b
        } else {
            f64::NAN
        });
    }

    let mean_smd = per_dim_smd.iter().sum::<f64>() / dim as f64;
    let logs: Vec<f64> = per_dim_vr
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| v.ln().abs())
        .collect();
    let mean_abs_log_vr = if logs.is_empty() {
        0.0
    } else {
        logs.iter().sum::<f64>() / logs.len() as f64
    };

    Ok(BalanceReport {
        per_dim_smd,
        per_dim_vr,
        mean_smd,
        mean_abs_log_vr,
        retention_rate: 1.0,
        domain_pair: None,
    })
}

/// Simple mean of pairwise reports: dimension-wise for the vectors
/// (NaN-aware for VR), plain mean for the scalar aggregates.
fn aggregate(mut reports: Vec<BalanceReport>, retention: f64) -> BalanceReport {
    if reports.len() == 1 {
        let mut r = reports.pop().unwrap();
        r.retention_rate = retention;
        return r;
    }
    let dim = reports[0].per_dim_smd.len();
    let n = reports.len() as f64;
    let per_dim_smd = (0..dim)
        .map(|j| reports.iter().map(|r| r.per_dim_smd[j]).sum::<f64>() / n)
        .collect();
    let per_dim_vr = (0..dim)
        .map(|j| {
            let defined: Vec<f64> = reports
                .iter()
                .map(|r| r.per_dim_vr[j])
                .filter(|v| v.is_finite())
                .collect();
            if defined.is_empty() {
                f64::NAN
            } else {
                defined.iter().sum::<f64>() / defined.len() as f64
            }
        })
        .collect();
    BalanceReport {
        per_dim_smd,
        per_dim_vr,
        mean_smd: reports.iter().map(|r| r.mean_smd).sum::<f64>() / n,
        mean_abs_log_vr: reports.iter().map(|r| r.mean_abs_log_vr).sum::<f64>() / n,
        retention_rate: retention,
        domain_pair: None,
    }
}

/// Balance of the raw (unmatched) data, aggregated over every unordered
/// pair of present domains.
pub fn raw_balance(data: &EmbeddingSet) -> Result<BalanceReport> {
    let domains = data.present_domains();
    if domains.len() < 2 {
        return Err(Error::SingleDomain);
    }
    let mut reports = Vec::new();
    for (i, &a) in domains.iter().enumerate() {
        for &b in &domains[i + 1..] {
            let set_a: Vec<Vec<f64>> = data
                .samples
                .iter()
                .filter(|s| s.domain == a)
                .map(|s| widen(&s.embedding))
                .collect();
            let set_b: Vec<Vec<f64>> = data
                .samples
                .iter()
                .filter(|s| s.domain == b)
                .map(|s| widen(&s.embedding))
                .collect();
            let mut report = balance(&set_a, &set_b)?;
            report.domain_pair = Some((a, b));
            reports.push(report);
        }
    }
    Ok(aggregate(reports, 1.0))
}

/// Balance over matched pairs: one (query, neighbour) embedding pair per
/// retrieved neighbour, grouped by unordered domain pair and aggregated
/// by simple mean.
pub fn matched_balance(data: &EmbeddingSet, records: &[MatchRecord]) -> Result<BalanceReport> {
    let mut groups: std::collections::BTreeMap<(DomainLabel, DomainLabel), (Vec<Vec<f64>>, Vec<Vec<f64>>)> =
        std::collections::BTreeMap::new();
    let mut matched_queries = 0usize;
    for rec in records {
        if rec.is_matched() {
            matched_queries += 1;
        }
        let query = data
            .sample_by_id(rec.query_id)
            .ok_or_else(|| Error::Validation(format!("unknown query id {}", rec.query_id)))?;
        for nid in &rec.neighbor_ids {
            let neighbor = data
                .sample_by_id(*nid)
                .ok_or_else(|| Error::Validation(format!("unknown neighbor id {nid}")))?;
            let pair = if query.domain <= neighbor.domain {
                (query.domain, neighbor.domain)
            } else {
                (neighbor.domain, query.domain)
            };
            let (qs, ns) = groups.entry(pair).or_default();
            qs.push(widen(&query.embedding));
            ns.push(widen(&neighbor.embedding));
        }
    }
    if matched_queries == 0 {
        return Err(Error::NoMatches);
    }
    let retention = matched_queries as f64 / records.len() as f64;
    let mut reports = Vec::new();
    for (pair, (qs, ns)) in groups {
        let mut report = balance(&qs, &ns)?;
        report.domain_pair = Some(pair);
        reports.push(report);
    }
    Ok(aggregate(reports, retention))
}

/// Search space for the caliper hyperparameters: the Cartesian product
/// of the three value lists.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub t_fixed_values: Vec<f64>,
    pub t_std_values: Vec<f64>,
    pub tau_values: Vec<f64>,
    pub k: usize,
    pub min_retention: f64,
}

impl GridSpec {
    pub fn cells(&self) -> Result<Vec<CaliperParams>> {
        if self.t_fixed_values.is_empty() || self.t_std_values.is_empty() || self.tau_values.is_empty() {
            return Err(Error::Validation("grid value lists must be nonempty".into()));
        }
        if self.k == 0 {
            return Err(Error::Validation("grid k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.min_retention) {
            return Err(Error::Validation("min_retention must lie in [0, 1]".into()));
        }
        let mut cells = Vec::new();
        for &t_fixed in &self.t_fixed_values {
            for &t_std in &self.t_std_values {
                for &tau in &self.tau_values {
                    cells.push(CaliperParams::new(t_fixed, t_std, tau)?);
                }
            }
        }
        Ok(cells)
    }
}

/// Evaluate every grid cell with the offline matcher, drop cells whose
/// retention falls below the floor (or that retain no matches at all),
/// and rank the rest ascending by `balance_score`, ties broken by
/// lexicographic params. The ranking is independent of enumeration
/// order and of the parallel evaluation schedule.
pub fn grid_search(
    data: &EmbeddingSet,
    model: &PropensityModel,
    grid: &GridSpec,
) -> Result<Vec<(CaliperParams, BalanceReport)>> {
    let cells = grid.cells()?;
    let mut evaluated: Vec<(CaliperParams, BalanceReport)> = cells
        .par_iter()
        .map(|params| {
            let records = matched_samples(data, model, params, grid.k, MatchDirection::Both)?;
            let report = matched_balance(data, &records)?;
            Ok((*params, report))
        })
        .filter_map(|cell: Result<(CaliperParams, BalanceReport)>| match cell {
            Ok((params, report)) if report.retention_rate >= grid.min_retention => {
                Some(Ok((params, report)))
            }
            // Cells with no (or too few) retained matches have no
            // defined balance; they are simply out of the running.
            Err(Error::NoMatches) | Err(Error::TooFewSamples { .. }) | Err(Error::ZeroVariance { .. }) | Ok(_) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;

    if evaluated.is_empty() {
        return Err(Error::EmptyGridAfterFilter);
    }
    evaluated.sort_by(|(pa, ra), (pb, rb)| {
        balance_score(ra)
            .total_cmp(&balance_score(rb))
            .then(pa.t_fixed.total_cmp(&pb.t_fixed))
            .then(pa.t_std.total_cmp(&pb.t_std))
            .then(pa.tau.total_cmp(&pb.tau))
    });
    Ok(evaluated)
}
