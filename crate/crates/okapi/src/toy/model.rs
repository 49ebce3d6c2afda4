//! Two-layer tanh encoder plus linear head, with exact manual backprop
//! through the head, the encoder, the output normalization, and the
//! consistency term. Gradients are exchanged as one flat vector in the
//! canonical parameter order (encoder layer 1 weights, layer 1 bias,
//! layer 2 weights, layer 2 bias, head weights, head bias), which is
//! also the checkpoint layout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::online::consistency_loss;
use crate::rng::{seeded_rng, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major: weights[o * in_dim + i].
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Linear {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
            bias: (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                self.bias[o]
                    + self.weights[o * self.in_dim..(o + 1) * self.in_dim]
                        .iter()
                        .zip(x)
                        .map(|(w, xi)| w * xi)
                        .sum::<f64>()
            })
            .collect()
    }

    fn param_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn tanh_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.tanh()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub l1: Linear,
    pub l2: Linear,
}

impl Encoder {
    /// tanh hidden layer, linear output: the embedding keeps its
    /// geometry instead of saturating to class corners.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.l2.forward(&tanh_vec(&self.l1.forward(x)))
    }

    pub fn param_len(&self) -> usize {
        self.l1.param_len() + self.l2.param_len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        out.extend(&self.l1.weights);
        out.extend(&self.l1.bias);
        out.extend(&self.l2.weights);
        out.extend(&self.l2.bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.param_len(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for w in self
            .l1
            .weights
            .iter_mut()
            .chain(self.l1.bias.iter_mut())
            .chain(self.l2.weights.iter_mut())
            .chain(self.l2.bias.iter_mut())
        {
            *w = *it.next().unwrap();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisedLoss {
    /// Softmax cross-entropy; targets are class indices.
    CrossEntropy,
    /// Squared error on a single output; targets are regression values.
    SquaredError,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub supervised: SupervisedLoss,
    /// Pre-factor on the consistency term.
    pub lambda: f64,
}

/// One sample entering `forward_backward`: raw input, optional target,
/// and the matched neighbours' (stop-gradient) target encodings.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x: Vec<f64>,
    pub target: Option<f64>,
    pub neighbors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub loss_total: f64,
    /// Gradient of loss_total in canonical flat order.
    pub grads: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub encoder: Encoder,
    pub head: Linear,
}

impl ToyModel {
    /// Deterministic init from the seed: uniform +-1/sqrt(fan_in), the
    /// encoder and head drawing from separate streams.
    pub fn init(d_in: usize, hidden: usize, d_z: usize, n_out: usize, seed: u64) -> Self {
        let mut enc_rng = seeded_rng(seed, stream::ENCODER_INIT);
        let mut head_rng = seeded_rng(seed, stream::HEAD_INIT);
        ToyModel {
            encoder: Encoder {
                l1: Linear::init(d_in, hidden, &mut enc_rng),
                l2: Linear::init(hidden, d_z, &mut enc_rng),
            },
            head: Linear::init(d_z, n_out, &mut head_rng),
        }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x)
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.head.forward(&self.encode(x))
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        let out = self.predict(x);
        out.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap()
    }

    pub fn param_len(&self) -> usize {
        self.encoder.param_len() + self.head.param_len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.encoder.flat();
        out.extend(&self.head.weights);
        out.extend(&self.head.bias);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.param_len(),
                got: flat.len(),
            });
        }
        let enc_len = self.encoder.param_len();
        self.encoder.set_flat(&flat[..enc_len])?;
        let mut it = flat[enc_len..].iter();
        for w in self.head.weights.iter_mut().chain(self.head.bias.iter_mut()) {
            *w = *it.next().unwrap();
        }
        Ok(())
    }

    pub fn apply_sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        if grads.len() != self.param_len() {
            return Err(Error::LengthMismatch {
                expected: self.param_len(),
                got: grads.len(),
            });
        }
        let mut flat = self.flat();
        for (p, g) in flat.iter_mut().zip(grads) {
            *p -= lr * g;
        }
        self.set_flat(&flat)
    }

    /// Exact gradients of L_sup + lambda * L_unsup over the whole batch.
    /// L_sup averages over the labelled members only; L_unsup averages
    /// the per-sample consistency losses over the full batch, with
    /// unmatched samples contributing zero.
    pub fn forward_backward(&self, batch: &[TrainExample], spec: &LossSpec) -> Result<ForwardBackward> {
        if batch.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d_in = self.encoder.l1.in_dim;
        for ex in batch {
            if ex.x.len() != d_in {
                return Err(Error::DimensionMismatch {
                    expected: d_in,
                    got: ex.x.len(),
                });
            }
        }
        let n_labelled = batch.iter().filter(|ex| ex.target.is_some()).count();
        let batch_len = batch.len() as f64;

        let enc_len = self.encoder.param_len();
        let mut grads = vec![0.0; self.param_len()];
        let (g_enc, g_head) = grads.split_at_mut(enc_len);
        let l1_w = self.encoder.l1.weights.len();
        let l1_b = self.encoder.l1.bias.len();
        let l2_w = self.encoder.l2.weights.len();

        let mut loss_sup = 0.0;
        let mut loss_unsup = 0.0;

        for ex in batch {
            let h = tanh_vec(&self.encoder.l1.forward(&ex.x));
            let z = self.encoder.l2.forward(&h);

            // dL/dz accumulated from the supervised head and the
            // consistency term.
            let mut dz = vec![0.0; z.len()];

            if let Some(target) = ex.target {
                let out = self.head.forward(&z);
                let dout = match spec.supervised {
                    SupervisedLoss::CrossEntropy => {
                        let class = target as usize;
                        if class >= out.len() {
                            return Err(Error::Validation(format!(
                                "class index {class} out of range for {} outputs",
                                out.len()
                            )));
                        }
                        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = out.iter().map(|l| (l - max).exp()).collect();
                        let total: f64 = exps.iter().sum();
                        let probs: Vec<f64> = exps.iter().map(|e| e / total).collect();
                        loss_sup += -probs[class].max(f64::MIN_POSITIVE).ln() / n_labelled as f64;
                        probs
                            .iter()
                            .enumerate()
                            .map(|(c, p)| {
                                (p - if c == class { 1.0 } else { 0.0 }) / n_labelled as f64
                            })
                            .collect::<Vec<f64>>()
                    }
                    SupervisedLoss::SquaredError => {
                        let err = out[0] - target;
                        loss_sup += err * err / n_labelled as f64;
                        vec![2.0 * err / n_labelled as f64]
                    }
                };
                for (c, d) in dout.iter().enumerate() {
                    g_head[self.head.weights.len() + c] += d;
                    let row = &self.head.weights[c * z.len()..(c + 1) * z.len()];
                    for (j, (w, zj)) in row.iter().zip(&z).enumerate() {
                        g_head[c * z.len() + j] += d * zj;
                        dz[j] += d * w;
                    }
                }
            }

            if !ex.neighbors.is_empty() {
                let (l_cons, g_cons) = consistency_loss(&z, &ex.neighbors)?;
                loss_unsup += l_cons / batch_len;
                // Skipped entirely at lambda = 0 so the ERM reduction is
                // bitwise, not merely approximate.
                if spec.lambda != 0.0 {
                    for (d, g) in dz.iter_mut().zip(&g_cons) {
                        *d += spec.lambda * g / batch_len;
                    }
                }
            }

            // Backprop z = l2(h), h = tanh(l1(x)).
            let dz_pre = dz;
            let mut dh = vec![0.0; h.len()];
            for (o, d) in dz_pre.iter().enumerate() {
                g_enc[l1_w + l1_b + l2_w + o] += d;
                let row = &self.encoder.l2.weights[o * h.len()..(o + 1) * h.len()];
                for (j, (w, hj)) in row.iter().zip(&h).enumerate() {
                    g_enc[l1_w + l1_b + o * h.len() + j] += d * hj;
                    dh[j] += d * w;
                }
            }
            let dh_pre: Vec<f64> = dh.iter().zip(&h).map(|(d, hj)| d * (1.0 - hj * hj)).collect();
            for (o, d) in dh_pre.iter().enumerate() {
                g_enc[l1_w + o] += d;
                for (j, xj) in ex.x.iter().enumerate() {
                    g_enc[o * d_in + j] += d * xj;
                }
            }
        }

        Ok(ForwardBackward {
            loss_sup,
            loss_unsup,
            loss_total: loss_sup + spec.lambda * loss_unsup,
            grads,
        })
    }
}
