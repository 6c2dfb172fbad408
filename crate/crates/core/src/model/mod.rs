//! End-to-end toy model and its two-stage training.

mod data;
mod readout;
mod toy;
mod train;

pub use data::{SyntheticBatch, BOS};
pub use readout::{DecoderBlock, ReadoutHead};
pub use toy::{ModelConfig, ParamGroup, ToyModel};
pub use train::{
    overfit_smoke, overfit_smoke_model, train_step, Clock, FreezeSchedule, OverfitReport,
    SmokeConfig, Stage, StageReport, StepRecord,
};
