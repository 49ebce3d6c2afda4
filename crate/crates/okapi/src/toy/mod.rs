//! Desk-scale end-to-end training: a small MLP with exact manual
//! backprop, a synthetic multi-domain generator with controllable
//! rotation shift, and the ERM / Okapi training loops.

pub mod model;
pub mod synth;
pub mod train;

pub use model::{ForwardBackward, LossSpec, SupervisedLoss, ToyModel, TrainExample};
pub use synth::{gen_synth, SynthConfig, SynthData};
pub use train::{
    history_to_csv, train_erm, train_okapi, MatchStats, MetricsRow, OkapiTrainer, TrainConfig,
    TrainOutcome,
};
