use alloc::format;

use serde::{Deserialize, Serialize};

use crate::avu::record::check_unit;
use crate::avu::{SampleRecord, SplitLabel};
use crate::error::{Error, Result};
use crate::hash::hash_unit;

/// Consistency thresholds for split assignment. The defaults are estimates;
/// the source gives no numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub tau_hi: f64,
    pub tau_lo: f64,
    /// Share of high-consistency records sent to MultiQA instead of Pretrain.
    pub multiqa_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            tau_hi: 0.8,
            tau_lo: 0.4,
            multiqa_fraction: 0.31,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.tau_lo) && unit(self.tau_hi) && self.tau_lo <= self.tau_hi) {
            return Err(Error::Validation(format!(
                "need 0 <= tau_lo <= tau_hi <= 1, got tau_lo={} tau_hi={}",
                self.tau_lo, self.tau_hi
            )));
        }
        if !unit(self.multiqa_fraction) {
            return Err(Error::Validation(format!(
                "multiqa_fraction {} outside [0, 1]",
                self.multiqa_fraction
            )));
        }
        Ok(())
    }
}

/// Position of `id` in `[0, 1)` for the MultiQA diversion.
pub fn multiqa_draw(id: &str) -> f64 {
    hash_unit(&[b"multiqa", id.as_bytes()])
}

pub fn assign_split(record: &SampleRecord, cfg: &SplitConfig) -> Result<SplitLabel> {
    if record.has_task_annotation {
        return Ok(SplitLabel::Tasks);
    }
    let c = record.scores.consistency.ok_or_else(|| {
        Error::Validation(format!("record `{}` has no consistency score", record.id))
    })?;
    check_unit("consistency", c)?;
    Ok(if c >= cfg.tau_hi {
        if multiqa_draw(&record.id) < cfg.multiqa_fraction {
            SplitLabel::MultiQA
        } else {
            SplitLabel::Pretrain
        }
    } else if c >= cfg.tau_lo {
        SplitLabel::Specific
    } else {
        SplitLabel::Negatives
    })
}
