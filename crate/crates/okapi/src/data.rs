//! Domain types: samples, embedding sets, and match records.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the domain universe of the dataset a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainLabel(pub u32);

impl DomainLabel {
    /// Binary reduction used when labelled and unlabelled data have
    /// disjoint domain support: labelled samples become domain 1,
    /// unlabelled domain 0.
    pub fn binary(labelled: bool) -> Self {
        DomainLabel(u32::from(labelled))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: DomainLabel,
    /// Regression value or class index; absent for unlabelled samples.
    pub target: Option<f64>,
    pub embedding: Vec<f32>,
}

impl Sample {
    pub fn is_labelled(&self) -> bool {
        self.target.is_some()
    }
}

/// Validated, immutable collection of samples sharing one embedding
/// dimension and one domain universe.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub domain_count: u32,
    pub samples: Vec<Sample>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, domain_count: u32, samples: Vec<Sample>) -> Result<Self> {
        let set = EmbeddingSet {
            dim,
            domain_count,
            samples,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if !seen.insert(s.id) {
                return Err(Error::Validation(format!("duplicate sample id {}", s.id)));
            }
            if s.domain.0 >= self.domain_count {
                return Err(Error::Validation(format!(
                    "sample {}: domain {} out of range (domain_count {})",
                    s.id, s.domain.0, self.domain_count
                )));
            }
            if s.embedding.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: s.embedding.len(),
                });
            }
            if s.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "sample {}: non-finite embedding component",
                    s.id
                )));
            }
            if let Some(t) = s.target {
                if !t.is_finite() {
                    return Err(Error::Validation(format!("sample {}: non-finite target", s.id)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_targets(&self) -> bool {
        self.samples.iter().any(Sample::is_labelled)
    }

    /// Domains that actually occur in the set.
    pub fn present_domains(&self) -> Vec<DomainLabel> {
        let mut seen: Vec<DomainLabel> = self
            .samples
            .iter()
            .map(|s| s.domain)
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        seen.sort();
        seen
    }

    pub fn sample_by_id(&self, id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// View of the set under the binary domain reduction: samples with a
    /// target become domain 1, the rest domain 0. Ids, targets, and
    /// embeddings are unchanged.
    pub fn binary_reduction(&self) -> EmbeddingSet {
        EmbeddingSet {
            dim: self.dim,
            domain_count: 2,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    domain: DomainLabel::binary(s.is_labelled()),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Why a query produced no neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    /// Query matched; `neighbor_ids` holds exactly k entries.
    None,
    /// The query's own propensity score failed the fixed caliper.
    QueryCaliper,
    /// Fewer than k keys survived the cross-domain and caliper filters.
    NoValidKeys,
}

/// Outcome of matching one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub query_id: u64,
    pub neighbor_ids: Vec<u64>,
    pub distances: Vec<f64>,
    pub filtered: FilterReason,
}

impl MatchRecord {
    pub fn filtered(query_id: u64, reason: FilterReason) -> Self {
        MatchRecord {
            query_id,
            neighbor_ids: Vec::new(),
            distances: Vec::new(),
            filtered: reason,
        }
    }

    pub fn is_matched(&self) -> bool {
        self.filtered == FilterReason::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, domain: u32, embedding: Vec<f32>) -> Sample {
        Sample {
            id,
            domain: DomainLabel(domain),
            target: None,
            embedding,
        }
    }

    #[test]
    fn accepts_valid_set() {
        let set = EmbeddingSet::new(
            2,
            2,
            vec![sample(0, 0, vec![1.0, 2.0]), sample(1, 1, vec![3.0, 4.0])],
        );
        assert!(set.is_ok());
    }

    #[test]
    fn rejects_duplicate_ids() {
        let err = EmbeddingSet::new(
            2,
            2,
            vec![sample(5, 0, vec![1.0, 2.0]), sample(5, 1, vec![3.0, 4.0])],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_domain_out_of_range() {
        let err = EmbeddingSet::new(2, 1, vec![sample(0, 1, vec![1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_nan_embedding() {
        let err = EmbeddingSet::new(2, 1, vec![sample(0, 0, vec![1.0, f32::NAN])]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let err = EmbeddingSet::new(3, 1, vec![sample(0, 0, vec![1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn binary_reduction_maps_labelled_to_one() {
        assert_eq!(DomainLabel::binary(true), DomainLabel(1));
        assert_eq!(DomainLabel::binary(false), DomainLabel(0));
    }
}
