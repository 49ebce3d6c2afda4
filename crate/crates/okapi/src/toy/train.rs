//! ERM and Okapi training loops over the synthetic data, plus a
//! versioned checkpoint enabling bit-exact resume.
//!
//! Both trainers draw batches uniformly from the pool D = D_l union D_u
//! through the same RNG stream and compute the supervised loss over the
//! labelled members only; with the consistency term disabled, the Okapi
//! loop therefore reproduces the ERM trajectory bit for bit. The Okapi
//! iteration order is: EMA update first, target-encode the batch, match
//! against batch + bank (pushing the batch and stepping the scorer),
//! then one SGD step on L_sup + lambda(step) * L_unsup.

use std::io::Read;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample as index_sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{DomainLabel, EmbeddingSet, Sample};
use crate::error::{Error, Result};
use crate::matcher::CaliperParams;
use crate::online::{
    ema_update, okapi_match_step, EmaState, LambdaSchedule, MemoryBankState, OnlineBatchItem,
    QuerySource,
};
use crate::propensity::PropensityModel;
use crate::rng::{seeded_rng, stream};
use crate::toy::model::{LossSpec, SupervisedLoss, ToyModel, TrainExample};
use crate::toy::synth::SynthData;
use crate::vecmath::widen;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub k: usize,
    pub caliper: CaliperParams,
    pub zeta_start: f64,
    pub zeta_end: f64,
    pub lambda_final: f64,
    pub lambda_warmup_fraction: f64,
    pub bank_capacity: usize,
    pub query_source: QuerySource,
    pub hidden: usize,
    pub d_z: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 1500,
            batch_size: 32,
            lr: 0.1,
            k: 1,
            caliper: CaliperParams {
                t_fixed: 0.05,
                t_std: f64::INFINITY,
                tau: 2.0,
            },
            zeta_start: 0.99,
            zeta_end: 0.999,
            lambda_final: 1.0,
            lambda_warmup_fraction: 0.1,
            bank_capacity: 256,
            query_source: QuerySource::Target,
            hidden: 16,
            d_z: 8,
            seed: 0,
        }
    }
}

/// One row of the metrics history; becomes one CSV line.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_sup: f64,
    pub loss_unsup: f64,
    pub lambda: f64,
    pub retention: f64,
    pub id_acc: f64,
    pub ood_acc: f64,
}

/// Cumulative matching statistics over a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchStats {
    pub total_queries: u64,
    pub matched_queries: u64,
    pub total_pairs: u64,
    pub cross_domain_pairs: u64,
    /// Mean match distance per step; NaN-free (unmatched steps are skipped).
    pub per_step_mean_distance: Vec<f64>,
}

impl MatchStats {
    pub fn mean_distance(&self) -> f64 {
        if self.per_step_mean_distance.is_empty() {
            0.0
        } else {
            self.per_step_mean_distance.iter().sum::<f64>() / self.per_step_mean_distance.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<MetricsRow>,
    pub match_stats: MatchStats,
}

fn infer_classes(labeled: &EmbeddingSet) -> Result<usize> {
    let mut max_class = 0usize;
    for s in &labeled.samples {
        let t = s
            .target
            .ok_or_else(|| Error::Config("labelled split has an unlabelled sample".into()))?;
        if t < 0.0 || t.fract() != 0.0 {
            return Err(Error::Config(format!("target {t} is not a class index")));
        }
        max_class = max_class.max(t as usize);
    }
    if max_class == 0 {
        return Err(Error::Config("need at least two classes".into()));
    }
    Ok(max_class + 1)
}

fn validate_config(data: &SynthData, cfg: &TrainConfig) -> Result<usize> {
    if cfg.total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if cfg.batch_size > cfg.bank_capacity {
        return Err(Error::Config(format!(
            "batch_size {} exceeds bank capacity {}",
            cfg.batch_size, cfg.bank_capacity
        )));
    }
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config("lr must be finite and nonnegative".into()));
    }
    for z in [cfg.zeta_start, cfg.zeta_end] {
        if !(0.0..=1.0).contains(&z) {
            return Err(Error::Config(format!("zeta {z} outside [0, 1]")));
        }
    }
    if !(0.0..=1.0).contains(&cfg.lambda_warmup_fraction) {
        return Err(Error::Config("lambda warmup fraction outside [0, 1]".into()));
    }
    if !(cfg.lambda_final.is_finite() && cfg.lambda_final >= 0.0) {
        return Err(Error::Config("lambda_final must be finite and nonnegative".into()));
    }
    CaliperParams::new(cfg.caliper.t_fixed, cfg.caliper.t_std, cfg.caliper.tau)?;
    if data.labeled.is_empty() || data.unlabeled.is_empty() {
        return Err(Error::Config("both labelled and unlabelled splits required".into()));
    }
    let pool_len = data.labeled.len() + data.unlabeled.len();
    if cfg.batch_size > pool_len {
        return Err(Error::Config(format!(
            "batch_size {} exceeds pool size {pool_len}",
            cfg.batch_size
        )));
    }
    infer_classes(&data.labeled)
}

fn accuracy(model: &ToyModel, set: &EmbeddingSet) -> f64 {
    let mut correct = 0usize;
    for s in &set.samples {
        if let Some(t) = s.target {
            if model.predict_class(&widen(&s.embedding)) == t as usize {
                correct += 1;
            }
        }
    }
    correct as f64 / set.len() as f64
}

fn example_for(sample: &Sample) -> TrainExample {
    TrainExample {
        x: widen(&sample.embedding),
        target: sample.target,
        neighbors: Vec::new(),
    }
}

/// Minibatch SGD on the supervised loss alone. Unlabelled batch members
/// carry no loss; they are sampled anyway so the batch schedule matches
/// the Okapi trainer's exactly.
pub fn train_erm(data: &SynthData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let n_classes = validate_config(data, cfg)?;
    let pool = data.training_pool();
    let mut model = ToyModel::init(pool.dim, cfg.hidden, cfg.d_z, n_classes, cfg.seed);
    let mut rng = seeded_rng(cfg.seed, stream::BATCH_SAMPLING);
    let spec = LossSpec {
        supervised: SupervisedLoss::CrossEntropy,
        lambda: 0.0,
    };

    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let idx = index_sample(&mut rng, pool.len(), cfg.batch_size);
        let batch: Vec<TrainExample> = idx.iter().map(|i| example_for(&pool.samples[i])).collect();
        let fb = model.forward_backward(&batch, &spec)?;
        model.apply_sgd_step(&fb.grads, cfg.lr)?;
        history.push(MetricsRow {
            step,
            loss_sup: fb.loss_sup,
            loss_unsup: 0.0,
            lambda: 0.0,
            retention: 0.0,
            id_acc: accuracy(&model, &data.labeled),
            ood_acc: accuracy(&model, &data.ood_test),
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        match_stats: MatchStats::default(),
    })
}

/// Full online Okapi state; step-by-step driver behind `train_okapi`,
/// exposed so runs can checkpoint and resume.
#[derive(Debug, Clone)]
pub struct OkapiTrainer {
    cfg: TrainConfig,
    pool: EmbeddingSet,
    model: ToyModel,
    ema: EmaState,
    bank: MemoryBankState,
    scorer: PropensityModel,
    lambda: LambdaSchedule,
    rng: ChaCha8Rng,
    step: usize,
    stats: MatchStats,
}

impl OkapiTrainer {
    pub fn new(data: &SynthData, cfg: &TrainConfig) -> Result<Self> {
        let n_classes = validate_config(data, cfg)?;
        let pool = data.training_pool();
        let model = ToyModel::init(pool.dim, cfg.hidden, cfg.d_z, n_classes, cfg.seed);
        let ema = EmaState::new(
            model.encoder.flat(),
            cfg.zeta_start,
            cfg.zeta_end,
            cfg.total_steps,
        );
        Ok(OkapiTrainer {
            pool,
            ema,
            bank: MemoryBankState::new(cfg.bank_capacity),
            // Binary scorer over the labelled/unlabelled reduction.
            scorer: PropensityModel::zeros(cfg.d_z, 2),
            lambda: LambdaSchedule {
                final_value: cfg.lambda_final,
                warmup_fraction: cfg.lambda_warmup_fraction,
                total_steps: cfg.total_steps,
            },
            rng: seeded_rng(cfg.seed, stream::BATCH_SAMPLING),
            step: 0,
            stats: MatchStats::default(),
            model,
            cfg: cfg.clone(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn match_stats(&self) -> &MatchStats {
        &self.stats
    }

    fn target_encoder(&self) -> Result<crate::toy::model::Encoder> {
        let mut enc = self.model.encoder.clone();
        enc.set_flat(&self.ema.shadow)?;
        Ok(enc)
    }

    pub fn step_once(&mut self, data: &SynthData) -> Result<MetricsRow> {
        // EMA update happens at the beginning of each step.
        ema_update(&mut self.ema, &self.model.encoder.flat())?;

        let idx = index_sample(&mut self.rng, self.pool.len(), self.cfg.batch_size);
        let samples: Vec<&Sample> = idx.iter().map(|i| &self.pool.samples[i]).collect();
        let mut batch: Vec<TrainExample> = samples.iter().map(|s| example_for(s)).collect();

        let lambda = self.lambda.at(self.step);
        let mut retention = 0.0;
        // A permanently zero schedule never contributes gradients; the
        // whole matching phase is skipped and the run reduces to ERM.
        if self.cfg.lambda_final != 0.0 {
            let target_enc = self.target_encoder()?;
            let items: Vec<OnlineBatchItem> = samples
                .iter()
                .map(|s| OnlineBatchItem {
                    id: s.id,
                    target_encoding: target_enc.forward(&widen(&s.embedding)),
                    domain: DomainLabel::binary(s.is_labelled()),
                })
                .collect();
            let online_encodings: Option<Vec<Vec<f64>>> = match self.cfg.query_source {
                QuerySource::Target => None,
                QuerySource::Online => Some(
                    samples
                        .iter()
                        .map(|s| self.model.encoder.forward(&widen(&s.embedding)))
                        .collect(),
                ),
            };
            let outcome = okapi_match_step(
                &items,
                online_encodings.as_deref(),
                &mut self.bank,
                &mut self.scorer,
                self.cfg.lr,
                &self.cfg.caliper,
                self.cfg.k,
                self.cfg.query_source,
            )?;

            let mut matched = 0usize;
            let mut dist_sum = 0.0;
            let mut dist_count = 0usize;
            for ((ex, rec), ns) in batch
                .iter_mut()
                .zip(&outcome.records)
                .zip(&outcome.neighbors)
            {
                if rec.is_matched() {
                    matched += 1;
                }
                for n in ns {
                    dist_sum += n.distance;
                    dist_count += 1;
                    self.stats.total_pairs += 1;
                    if n.domain != DomainLabel::binary(ex.target.is_some()) {
                        self.stats.cross_domain_pairs += 1;
                    }
                }
                ex.neighbors = ns.iter().map(|n| n.encoding.clone()).collect();
            }
            retention = matched as f64 / outcome.records.len() as f64;
            self.stats.total_queries += outcome.records.len() as u64;
            self.stats.matched_queries += matched as u64;
            if dist_count > 0 {
                self.stats.per_step_mean_distance.push(dist_sum / dist_count as f64);
            }
        }

        let fb = self.model.forward_backward(
            &batch,
            &LossSpec {
                supervised: SupervisedLoss::CrossEntropy,
                lambda,
            },
        )?;
        self.model.apply_sgd_step(&fb.grads, self.cfg.lr)?;

        let row = MetricsRow {
            step: self.step,
            loss_sup: fb.loss_sup,
            loss_unsup: fb.loss_unsup,
            lambda,
            retention,
            id_acc: accuracy(&self.model, &data.labeled),
            ood_acc: accuracy(&self.model, &data.ood_test),
        };
        self.step += 1;
        Ok(row)
    }

    pub fn run_to(&mut self, data: &SynthData, step: usize) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while self.step < step {
            rows.push(self.step_once(data)?);
        }
        Ok(rows)
    }

    /// Versioned binary snapshot of the full training state: parameters,
    /// EMA shadow, scorer, bank, step counter, RNG position, and the
    /// cumulative match counters. Loading it under the same config and
    /// data resumes the run bit for bit.
    pub fn checkpoint(&self) -> Vec<u8> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"OKCP");
        out.write_u32::<LittleEndian>(1).unwrap();
        out.write_u64::<LittleEndian>(self.step as u64).unwrap();

        let write_vec = |out: &mut Vec<u8>, v: &[f64]| {
            out.write_u64::<LittleEndian>(v.len() as u64).unwrap();
            for &x in v {
                out.write_f64::<LittleEndian>(x).unwrap();
            }
        };
        write_vec(&mut out, &self.model.flat());
        write_vec(&mut out, &self.ema.shadow);

        out.write_u32::<LittleEndian>(self.scorer.dim as u32).unwrap();
        out.write_u32::<LittleEndian>(self.scorer.domain_count as u32)
            .unwrap();
        write_vec(&mut out, &self.scorer.weights);
        write_vec(&mut out, &self.scorer.bias);

        let (capacity, entries, cursor) = self.bank.raw_parts();
        out.write_u64::<LittleEndian>(capacity as u64).unwrap();
        out.write_u64::<LittleEndian>(cursor as u64).unwrap();
        out.write_u64::<LittleEndian>(entries.len() as u64).unwrap();
        for e in entries {
            out.write_u64::<LittleEndian>(e.id).unwrap();
            out.write_u32::<LittleEndian>(e.domain.0).unwrap();
            write_vec(&mut out, &e.encoding);
        }

        out.extend_from_slice(&self.rng.get_seed());
        out.write_u64::<LittleEndian>(self.rng.get_stream()).unwrap();
        out.write_u128::<LittleEndian>(self.rng.get_word_pos()).unwrap();

        out.write_u64::<LittleEndian>(self.stats.total_queries).unwrap();
        out.write_u64::<LittleEndian>(self.stats.matched_queries).unwrap();
        out.write_u64::<LittleEndian>(self.stats.total_pairs).unwrap();
        out.write_u64::<LittleEndian>(self.stats.cross_domain_pairs).unwrap();
        out
    }

    pub fn resume(data: &SynthData, cfg: &TrainConfig, bytes: &[u8]) -> Result<Self> {
        let mut fresh = OkapiTrainer::new(data, cfg)?;
        let mut r = std::io::Cursor::new(bytes);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"OKCP" {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = r.read_u64::<LittleEndian>()? as usize;

        let read_vec = |r: &mut std::io::Cursor<&[u8]>| -> Result<Vec<f64>> {
            let len = r.read_u64::<LittleEndian>()? as usize;
            let mut v = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            Ok(v)
        };
        let params = read_vec(&mut r)?;
        fresh.model.set_flat(&params)?;
        let shadow = read_vec(&mut r)?;
        if shadow.len() != fresh.ema.shadow.len() {
            return Err(Error::LengthMismatch {
                expected: fresh.ema.shadow.len(),
                got: shadow.len(),
            });
        }
        fresh.ema.shadow = shadow;
        fresh.ema.step = step;

        let dim = r.read_u32::<LittleEndian>()? as usize;
        let domain_count = r.read_u32::<LittleEndian>()? as usize;
        if dim != fresh.scorer.dim || domain_count != fresh.scorer.domain_count {
            return Err(Error::Format("checkpoint scorer shape disagrees with config".into()));
        }
        fresh.scorer.weights = read_vec(&mut r)?;
        fresh.scorer.bias = read_vec(&mut r)?;
        if fresh.scorer.weights.len() != dim * domain_count || fresh.scorer.bias.len() != domain_count {
            return Err(Error::Format("checkpoint scorer parameters truncated".into()));
        }

        let capacity = r.read_u64::<LittleEndian>()? as usize;
        if capacity != cfg.bank_capacity {
            return Err(Error::Format("checkpoint bank capacity disagrees with config".into()));
        }
        let cursor = r.read_u64::<LittleEndian>()? as usize;
        let n_entries = r.read_u64::<LittleEndian>()? as usize;
        if n_entries > capacity {
            return Err(Error::Format("checkpoint bank overflows its capacity".into()));
        }
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let id = r.read_u64::<LittleEndian>()?;
            let domain = DomainLabel(r.read_u32::<LittleEndian>()?);
            let encoding = read_vec(&mut r)?;
            entries.push(crate::online::BankEntry {
                id,
                encoding,
                domain,
            });
        }
        fresh.bank = MemoryBankState::from_raw_parts(capacity, entries, cursor);

        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let rng_stream = r.read_u64::<LittleEndian>()?;
        let word_pos = r.read_u128::<LittleEndian>()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rng_stream);
        rng.set_word_pos(word_pos);
        fresh.rng = rng;

        fresh.stats.total_queries = r.read_u64::<LittleEndian>()?;
        fresh.stats.matched_queries = r.read_u64::<LittleEndian>()?;
        fresh.stats.total_pairs = r.read_u64::<LittleEndian>()?;
        fresh.stats.cross_domain_pairs = r.read_u64::<LittleEndian>()?;

        fresh.step = step;
        Ok(fresh)
    }

    pub fn into_outcome(self, history: Vec<MetricsRow>) -> TrainOutcome {
        TrainOutcome {
            model: self.model,
            history,
            match_stats: self.stats,
        }
    }
}

/// The full online pipeline: EMA target encoder, memory-bank CaliperNN
/// matching, consistency loss on matched pairs, online propensity
/// updates.
pub fn train_okapi(data: &SynthData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = OkapiTrainer::new(data, cfg)?;
    let history = trainer.run_to(data, cfg.total_steps)?;
    Ok(trainer.into_outcome(history))
}

/// Metrics history as CSV, one row per step.
pub fn history_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss_sup,loss_unsup,lambda,retention,id_acc,ood_acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.loss_sup, r.loss_unsup, r.lambda, r.retention, r.id_acc, r.ood_acc
        ));
    }
    out
}
