use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamGroup, SyntheticBatch, ToyModel};
use crate::nn::Module;

/// Training stage of the freeze schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Alignment pretraining: only the adapter and projectors learn.
    Pretrain = 1,
    /// Instruction tuning: everything except the encoders learns.
    Finetune = 2,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> core::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::Finetune),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeSchedule {
    pub stage: Stage,
}

impl FreezeSchedule {
    pub fn new(stage: Stage) -> Self {
        FreezeSchedule { stage }
    }

    pub fn trainable(&self, group: ParamGroup) -> bool {
        match self.stage {
            Stage::Pretrain => matches!(group, ParamGroup::Adapter | ParamGroup::Projectors),
            Stage::Finetune => {
                !matches!(group, ParamGroup::VisualEncoder | ParamGroup::AudioEncoder)
            }
        }
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| self.trainable(g))
            .collect()
    }

    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| !self.trainable(g))
            .collect()
    }

    /// Sets each parameter's gradient tracking from its group.
    pub fn apply(&self, model: &mut ToyModel) {
        model.visit_mut(&mut |p| {
            let g = ParamGroup::of(p.name()).expect("model parameters carry a group");
            p.set_trainable(self.trainable(g));
        });
    }
}

/// One SGD step on `batch`. Returns the loss before the update.
///
/// Frozen parameters are never bound with gradient tracking, so their values
/// are not touched.
pub fn train_step(
    model: &mut ToyModel,
    batch: &SyntheticBatch,
    schedule: &FreezeSchedule,
    lr: f64,
) -> Result<f64> {
    step_with(model, batch, schedule, lr, 0)
}

fn step_with(
    model: &mut ToyModel,
    batch: &SyntheticBatch,
    schedule: &FreezeSchedule,
    lr: f64,
    step: usize,
) -> Result<f64> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )));
    }
    schedule.apply(model);
    let (loss, grads) = {
        // Non-finite values reach the loss, which is checked below, so the
        // per-op scan is skipped on the hot path.
        let tape = Tape::with_finite_checks(false);
        let loss = model.loss(&tape, batch).map_err(|e| match e {
            Error::NonFinite { op } => Error::Numeric {
                step,
                detail: format!("non-finite value from {op} in forward"),
            },
            other => other,
        })?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Numeric {
                step,
                detail: format!("loss is {value}"),
            });
        }
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for p in model.params() {
            if p.trainable() {
                if let Some(g) = tape.param_grad(p.name()) {
                    grads.insert(String::from(p.name()), g);
                }
            }
        }
        (value, grads)
    };
    if let Some((name, _)) = grads
        .iter()
        .find(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Numeric {
            step,
            detail: format!("non-finite gradient for {name}"),
        });
    }
    model.visit_mut(&mut |p| {
        if let Some(g) = grads.get(p.name()) {
            for (w, &d) in p.value_mut().data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    });
    Ok(loss)
}

/// Source of elapsed seconds for training reports.
pub trait Clock {
    fn seconds(&mut self) -> f64;
}

impl<F: FnMut() -> f64> Clock for F {
    fn seconds(&mut self) -> f64 {
        self()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmokeConfig {
    pub model: ModelConfig,
    pub samples: usize,
    pub target_len: usize,
    pub lr: f64,
    /// Steps per stage.
    pub steps: usize,
    pub stages: Vec<Stage>,
    pub seed: u64,
}

impl SmokeConfig {
    pub fn toy() -> Self {
        SmokeConfig {
            model: ModelConfig::toy(),
            samples: 8,
            target_len: 6,
            lr: 0.5,
            steps: 500,
            stages: alloc::vec![Stage::Finetune],
            seed: 0,
        }
    }
}

/// One line of the training trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub frozen: Vec<ParamGroup>,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub seed: u64,
    pub stages: Vec<StageReport>,
    pub trajectory: Vec<StepRecord>,
    pub wall_seconds: f64,
}

impl OverfitReport {
    pub fn initial_loss(&self) -> f64 {
        self.stages.first().map_or(f64::NAN, |s| s.initial_loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.final_loss)
    }

    pub fn steps(&self) -> usize {
        self.trajectory.len()
    }

    /// Everything except timings, with losses printed bit-exactly.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed {}", self.seed);
        for s in &self.stages {
            let frozen: Vec<String> = s.frozen.iter().map(|g| format!("{g}")).collect();
            let _ = writeln!(
                out,
                "stage {} steps {} initial {:e} final {:e} frozen [{}]",
                s.stage as u8,
                s.steps,
                s.initial_loss,
                s.final_loss,
                frozen.join(", ")
            );
        }
        for r in &self.trajectory {
            let _ = writeln!(out, "{} {} {:e}", r.step, r.stage as u8, r.loss);
        }
        out
    }
}

/// Overfits a fixed synthetic set through the configured stages.
pub fn overfit_smoke(cfg: &SmokeConfig, clock: &mut dyn Clock) -> Result<OverfitReport> {
    overfit_smoke_model(cfg, clock).map(|(report, _)| report)
}

/// [`overfit_smoke`], also returning the trained model.
pub fn overfit_smoke_model(
    cfg: &SmokeConfig,
    clock: &mut dyn Clock,
) -> Result<(OverfitReport, ToyModel)> {
    if cfg.stages.is_empty() {
        return Err(Error::Config(
            "at least one training stage is required".into(),
        ));
    }
    let start = clock.seconds();
    let mut model = ToyModel::new(&cfg.model, cfg.seed)?;
    let batch = SyntheticBatch::generate(&cfg.model, cfg.samples, cfg.target_len, cfg.seed)?;
    let mut trajectory = Vec::with_capacity(cfg.steps * cfg.stages.len());
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for &stage in &cfg.stages {
        let schedule = FreezeSchedule::new(stage);
        let mut initial = None;
        for _ in 0..cfg.steps {
            let step = trajectory.len();
            let loss = step_with(&mut model, &batch, &schedule, cfg.lr, step)?;
            initial.get_or_insert(loss);
            trajectory.push(StepRecord {
                step,
                stage,
                loss,
                seconds: clock.seconds() - start,
            });
        }
        let final_loss = {
            let tape = Tape::with_finite_checks(false);
            model.loss(&tape, &batch)?.item()
        };
        if !final_loss.is_finite() {
            return Err(Error::Numeric {
                step: trajectory.len(),
                detail: format!("final loss is {final_loss}"),
            });
        }
        stages.push(StageReport {
            stage,
            frozen: schedule.frozen_groups(),
            steps: cfg.steps,
            initial_loss: initial.unwrap_or(final_loss),
            final_loss,
        });
    }
    let report = OverfitReport {
        seed: cfg.seed,
        stages,
        trajectory,
        wall_seconds: clock.seconds() - start,
    };
    Ok((report, model))
}
