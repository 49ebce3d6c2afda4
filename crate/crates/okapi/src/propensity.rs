//! Linear softmax propensity scorer with temperature scaling and
//! inverse-frequency-weighted cross-entropy, trainable offline
//! (full-batch) or online (one step per batch).
//!
//! Training always runs at temperature 1 so the learned parameters are
//! temperature-independent; the temperature is applied at match time to
//! sharpen or flatten the score distribution.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainLabel, EmbeddingSet};
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, stream};
use crate::vecmath::widen;

/// Parameters of the linear domain classifier: `domain_count` x `dim`
/// weight matrix (row-major) plus a bias per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub dim: usize,
    pub domain_count: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Distribution over domain labels for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityScore {
    pub probs: Vec<f64>,
}

impl PropensityScore {
    pub fn arity(&self) -> usize {
        self.probs.len()
    }

    /// Scalar used by the std-caliper: the positive-class probability in
    /// the binary case, the max component otherwise.
    pub fn caliper_scalar(&self) -> f64 {
        if self.probs.len() == 2 {
            self.probs[1]
        } else {
            self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        }
    }

    pub fn max_component(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Gradient of the weighted cross-entropy with the same layout as the
/// model parameters.
#[derive(Debug, Clone)]
pub struct PsGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PropensityModel {
    pub fn zeros(dim: usize, domain_count: usize) -> Self {
        PropensityModel {
            dim,
            domain_count,
            weights: vec![0.0; domain_count * dim],
            bias: vec![0.0; domain_count],
        }
    }

    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let mut out = self.bias.clone();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            *o += row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(out)
    }

    pub fn apply_step(&mut self, grad: &PsGradient, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g;
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("model serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: PropensityModel =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad model file: {e}")))?;
        if model.weights.len() != model.dim * model.domain_count
            || model.bias.len() != model.domain_count
        {
            return Err(Error::Validation("model parameter shapes disagree".into()));
        }
        if model.weights.iter().chain(&model.bias).any(|x| !x.is_finite()) {
            return Err(Error::Validation("non-finite model parameter".into()));
        }
        Ok(model)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Temperature-scaled propensity score: softmax of logits divided by tau.
pub fn score(model: &PropensityModel, z: &[f64], tau: f64) -> Result<PropensityScore> {
    assert!(tau > 0.0, "temperature must be positive");
    let logits = model.logits(z)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    Ok(PropensityScore {
        probs: softmax(&scaled),
    })
}

/// Score every sample of a set once with the given temperature.
pub fn score_set(model: &PropensityModel, set: &EmbeddingSet, tau: f64) -> Result<Vec<PropensityScore>> {
    set.samples
        .iter()
        .map(|s| score(model, &widen(&s.embedding), tau))
        .collect()
}

/// Importance weights countering label imbalance: w(s) = N / (|present| * n_s)
/// for present domains, 0 otherwise. The weighted sample mean is 1, keeping
/// the loss scale comparable to unweighted cross-entropy.
pub fn inverse_frequency_weights(labels: &[DomainLabel], domain_count: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts = vec![0usize; domain_count];
    for l in labels {
        assert!((l.0 as usize) < domain_count, "label out of range");
        counts[l.0 as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&c| {
            if c == 0 {
                0.0
            } else {
                n / (present as f64 * c as f64)
            }
        })
        .collect())
}

/// Weighted cross-entropy loss and its exact gradient for the linear
/// softmax model at temperature 1.
pub fn ps_loss_and_grad(
    model: &PropensityModel,
    batch: &[(Vec<f64>, DomainLabel)],
    weights: &[f64],
) -> Result<(f64, PsGradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = PsGradient {
        weights: vec![0.0; model.weights.len()],
        bias: vec![0.0; model.bias.len()],
    };
    for (z, label) in batch {
        let probs = softmax(&model.logits(z)?);
        let w = weights[label.0 as usize];
        loss += w * -probs[label.0 as usize].max(f64::MIN_POSITIVE).ln();
        for c in 0..model.domain_count {
            let indicator = if c == label.0 as usize { 1.0 } else { 0.0 };
            let dlogit = w * (probs[c] - indicator) / n;
            grad.bias[c] += dlogit;
            let row = &mut grad.weights[c * model.dim..(c + 1) * model.dim];
            for (g, x) in row.iter_mut().zip(z) {
                *g += dlogit * x;
            }
        }
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 200,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Full-batch gradient descent on the weighted cross-entropy over the
/// set's domain labels. Deterministic for a fixed seed; fixed learning
/// rate, no momentum.
pub fn fit_offline(data: &EmbeddingSet, opts: FitOptions) -> Result<PropensityModel> {
    let labels: Vec<DomainLabel> = data.samples.iter().map(|s| s.domain).collect();
    if data.present_domains().len() < 2 {
        return Err(Error::SingleDomain);
    }
    let weights = inverse_frequency_weights(&labels, data.domain_count as usize)?;
    let batch: Vec<(Vec<f64>, DomainLabel)> = data
        .samples
        .iter()
        .map(|s| (widen(&s.embedding), s.domain))
        .collect();

    let mut rng = seeded_rng(opts.seed, stream::PROPENSITY_INIT);
    let mut model = PropensityModel::zeros(data.dim, data.domain_count as usize);
    for w in model.weights.iter_mut() {
        *w = rng.gen_range(-0.01..0.01);
    }

    for _ in 0..opts.epochs {
        let (_, grad) = ps_loss_and_grad(&model, &batch, &weights)?;
        model.apply_step(&grad, opts.lr);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use rand::Rng;

    fn model_from_logit_bias(bias: Vec<f64>) -> PropensityModel {
        // Zero weights so the bias is the logit vector; scoring any z of
        // the right dim yields softmax(bias / tau).
        let k = bias.len();
        PropensityModel {
            dim: 1,
            domain_count: k,
            weights: vec![0.0; k],
            bias,
        }
    }

    #[test]
    fn score_matches_direct_softmax_evaluation() {
        // Oracle: direct softmax in double precision for logits (2, 0).
        let m = model_from_logit_bias(vec![2.0, 0.0]);
        let e = score(&m, &[0.0], 1.0).unwrap();
        let denom = 2f64.exp() + 1.0;
        assert!((e.probs[0] - 2f64.exp() / denom).abs() < 1e-12);
        assert!((e.probs[0] - 0.8808).abs() < 1e-4);
        assert!((e.probs[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn high_temperature_flattens() {
        let m = model_from_logit_bias(vec![2.0, 0.0]);
        let e = score(&m, &[0.0], 10.0).unwrap();
        let denom = 0.2f64.exp() + 1.0;
        assert!((e.probs[0] - 0.2f64.exp() / denom).abs() < 1e-12);
        assert!((e.probs[0] - 0.5498).abs() < 1e-4);
        assert!((e.probs[1] - 0.4502).abs() < 1e-4);
    }

    #[test]
    fn constant_logits_give_uniform() {
        for k in 2..5 {
            let m = model_from_logit_bias(vec![3.7; k]);
            for tau in [0.1, 1.0, 25.0] {
                let e = score(&m, &[1.0], tau).unwrap();
                for p in &e.probs {
                    assert!((p - 1.0 / k as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn score_sums_to_one_and_tau_one_is_plain_softmax() {
        let mut rng = seeded_rng(3, 9);
        for _ in 0..50 {
            let k = rng.gen_range(2..5);
            let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let m = model_from_logit_bias(bias.clone());
            let e = score(&m, &[0.0], 1.0).unwrap();
            assert!((e.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let plain = softmax(&bias);
            for (a, b) in e.probs.iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temperature_monotonicity_of_max_component() {
        let mut rng = seeded_rng(4, 9);
        for _ in 0..100 {
            let k = rng.gen_range(2..5);
            let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let m = model_from_logit_bias(bias);
            let taus = [0.5, 1.0, 1.3, 2.0, 5.0, 10.0];
            let maxes: Vec<f64> = taus
                .iter()
                .map(|&t| score(&m, &[0.0], t).unwrap().max_component())
                .collect();
            for w in maxes.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn inverse_frequency_worked_example() {
        // Hand count for labels [A, A, A, B]: w(A) = 4/(2*3), w(B) = 4/(2*1).
        let labels = vec![
            DomainLabel(0),
            DomainLabel(0),
            DomainLabel(0),
            DomainLabel(1),
        ];
        let w = inverse_frequency_weights(&labels, 2).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0).abs() < 1e-12);
        let mean: f64 = labels.iter().map(|l| w[l.0 as usize]).sum::<f64>() / labels.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
    }

    #[test]
    fn balanced_labels_get_unit_weights() {
        let w = inverse_frequency_weights(&[DomainLabel(0), DomainLabel(1)], 2).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn single_present_domain_weight_is_one() {
        let w = inverse_frequency_weights(&[DomainLabel(0), DomainLabel(0)], 2).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn empty_labels_error() {
        assert!(matches!(
            inverse_frequency_weights(&[], 2),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn uniform_prediction_loss_is_ln_two() {
        let m = PropensityModel::zeros(2, 2);
        let batch = vec![(vec![0.0, 0.0], DomainLabel(0))];
        let (loss, _) = ps_loss_and_grad(&m, &batch, &[1.0, 1.0]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_loss_near_zero() {
        let m = PropensityModel {
            dim: 1,
            domain_count: 2,
            weights: vec![30.0, -30.0],
            bias: vec![0.0, 0.0],
        };
        let batch = vec![(vec![1.0], DomainLabel(0))];
        let (loss, _) = ps_loss_and_grad(&m, &batch, &[1.0, 1.0]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn weighted_loss_equals_unweighted_when_balanced() {
        let mut rng = seeded_rng(5, 9);
        let m = PropensityModel {
            dim: 2,
            domain_count: 2,
            weights: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            bias: vec![0.1, -0.2],
        };
        let batch = vec![
            (vec![0.3, -0.5], DomainLabel(0)),
            (vec![1.3, 0.25], DomainLabel(1)),
        ];
        let labels: Vec<DomainLabel> = batch.iter().map(|(_, l)| *l).collect();
        let w = inverse_frequency_weights(&labels, 2).unwrap();
        let (weighted, _) = ps_loss_and_grad(&m, &batch, &w).unwrap();
        let (plain, _) = ps_loss_and_grad(&m, &batch, &[1.0, 1.0]).unwrap();
        assert_eq!(weighted, plain);
    }

    // Central finite differences, the independent gradient oracle.
    fn numeric_grad(
        model: &PropensityModel,
        batch: &[(Vec<f64>, DomainLabel)],
        weights: &[f64],
        h: f64,
    ) -> PsGradient {
        let mut gw = vec![0.0; model.weights.len()];
        let mut gb = vec![0.0; model.bias.len()];
        for i in 0..model.weights.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.weights[i] += h;
            minus.weights[i] -= h;
            let lp = ps_loss_and_grad(&plus, batch, weights).unwrap().0;
            let lm = ps_loss_and_grad(&minus, batch, weights).unwrap().0;
            gw[i] = (lp - lm) / (2.0 * h);
        }
        for i in 0..model.bias.len() {
            let mut plus = model.clone();
            let mut minus = model.clone();
            plus.bias[i] += h;
            minus.bias[i] -= h;
            let lp = ps_loss_and_grad(&plus, batch, weights).unwrap().0;
            let lm = ps_loss_and_grad(&minus, batch, weights).unwrap().0;
            gb[i] = (lp - lm) / (2.0 * h);
        }
        PsGradient {
            weights: gw,
            bias: gb,
        }
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(6, 9);
        for _ in 0..100 {
            let dim = rng.gen_range(1..=8);
            let k = rng.gen_range(2..=4);
            let model = PropensityModel {
                dim,
                domain_count: k,
                weights: (0..dim * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bias: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            let n = rng.gen_range(1..10);
            let batch: Vec<(Vec<f64>, DomainLabel)> = (0..n)
                .map(|_| {
                    (
                        (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                        DomainLabel(rng.gen_range(0..k as u32)),
                    )
                })
                .collect();
            let labels: Vec<DomainLabel> = batch.iter().map(|(_, l)| *l).collect();
            let w = inverse_frequency_weights(&labels, k).unwrap();
            let (_, analytic) = ps_loss_and_grad(&model, &batch, &w).unwrap();
            let numeric = numeric_grad(&model, &batch, &w, 1e-6);
            assert!(max_rel_err(&analytic.weights, &numeric.weights) < 1e-6);
            assert!(max_rel_err(&analytic.bias, &numeric.bias) < 1e-6);
        }
    }

    fn blob_set(seed: u64, per_domain: usize, offset: f64) -> EmbeddingSet {
        let mut rng = seeded_rng(seed, 9);
        let mut samples = Vec::new();
        for domain in 0..2u32 {
            let center = if domain == 0 { -offset } else { offset };
            for i in 0..per_domain {
                samples.push(Sample {
                    id: (domain as u64) * per_domain as u64 + i as u64,
                    domain: DomainLabel(domain),
                    target: None,
                    embedding: vec![
                        (center + rng.gen_range(-1.0..1.0)) as f32,
                        rng.gen_range(-1.0..1.0) as f32,
                    ],
                });
            }
        }
        EmbeddingSet::new(2, 2, samples).unwrap()
    }

    #[test]
    fn offline_fit_separates_blobs() {
        let data = blob_set(7, 100, 3.0);
        let model = fit_offline(&data, FitOptions::default()).unwrap();
        let correct = data
            .samples
            .iter()
            .filter(|s| {
                let e = score(&model, &widen(&s.embedding), 1.0).unwrap();
                let pred = if e.probs[1] > e.probs[0] { 1 } else { 0 };
                pred == s.domain.0
            })
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95);
    }

    #[test]
    fn identical_distributions_give_mid_propensities() {
        // Both domains drawn from the same blob: Bayes propensity is 0.5.
        let data = blob_set(8, 150, 0.0);
        let model = fit_offline(&data, FitOptions::default()).unwrap();
        let mid = data
            .samples
            .iter()
            .filter(|s| {
                let p = score(&model, &widen(&s.embedding), 1.0).unwrap().probs[1];
                (0.3..=0.7).contains(&p)
            })
            .count();
        assert!(mid as f64 / data.len() as f64 >= 0.9);
    }

    #[test]
    fn offline_fit_reduces_loss() {
        let data = blob_set(9, 50, 1.0);
        let batch: Vec<(Vec<f64>, DomainLabel)> = data
            .samples
            .iter()
            .map(|s| (widen(&s.embedding), s.domain))
            .collect();
        let labels: Vec<DomainLabel> = data.samples.iter().map(|s| s.domain).collect();
        let w = inverse_frequency_weights(&labels, 2).unwrap();
        let initial = ps_loss_and_grad(&PropensityModel::zeros(2, 2), &batch, &w)
            .unwrap()
            .0;
        let model = fit_offline(&data, FitOptions::default()).unwrap();
        let fitted = ps_loss_and_grad(&model, &batch, &w).unwrap().0;
        assert!(fitted <= initial);
    }

    #[test]
    fn single_domain_fit_errors() {
        let mut data = blob_set(10, 20, 1.0);
        for s in data.samples.iter_mut() {
            s.domain = DomainLabel(0);
        }
        assert!(matches!(
            fit_offline(&data, FitOptions::default()),
            Err(Error::SingleDomain)
        ));
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let data = blob_set(11, 40, 2.0);
        let a = fit_offline(&data, FitOptions::default()).unwrap();
        let b = fit_offline(&data, FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model = PropensityModel {
            dim: 2,
            domain_count: 2,
            weights: vec![0.5, -1.5, 2.0, 0.25],
            bias: vec![0.1, -0.1],
        };
        model.save_json(&path).unwrap();
        assert_eq!(PropensityModel::load_json(&path).unwrap(), model);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"dim\":2"));
        assert!(text.contains("\"domain_count\":2"));
    }
}
