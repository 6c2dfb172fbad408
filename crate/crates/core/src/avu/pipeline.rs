use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::{self, Write};

use serde::{Deserialize, Serialize};

use crate::avu::filter::filter_bottom_quartile_with;
use crate::avu::integrate::{integrate_captions, Integrator};
use crate::avu::score::{score_record, ConfidenceWeights, Scorer};
use crate::avu::split::{assign_split, SplitConfig};
use crate::avu::template::{render_prompt, TemplateSet};
use crate::avu::{SampleRecord, SplitLabel};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed for question and answer selection.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub splits: SplitConfig,
    #[serde(default)]
    pub weights: ConfidenceWeights,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        self.weights.validate()
    }
}

/// Where a record left the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Ingest,
    Score,
    Split,
    Integrate,
    Render,
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::Score => "score",
            PipelineStage::Split => "split",
            PipelineStage::Integrate => "integrate",
            PipelineStage::Render => "render",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quarantined {
    /// 1-based input line, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub stage: PipelineStage,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub records: usize,
    pub instructions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub input: usize,
    pub quarantined: usize,
    pub dropped: usize,
    pub kept: usize,
    pub splits: BTreeMap<SplitLabel, SplitCounts>,
}

impl PipelineStats {
    fn zeroed() -> Self {
        PipelineStats {
            splits: SplitLabel::ALL
                .iter()
                .map(|&s| (s, SplitCounts::default()))
                .collect(),
            ..Default::default()
        }
    }

    pub fn total(&self) -> SplitCounts {
        self.splits
            .values()
            .fold(SplitCounts::default(), |acc, c| SplitCounts {
                records: acc.records + c.records,
                instructions: acc.instructions + c.instructions,
            })
    }

    /// Per-subset record and instruction counts as a plain text table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "input {}  quarantined {}  dropped {}  kept {}",
            self.input, self.quarantined, self.dropped, self.kept
        );
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>13}",
            "subset", "records", "instructions"
        );
        for (split, c) in &self.splits {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>13}",
                format!("{split}"),
                c.records,
                c.instructions
            );
        }
        let t = self.total();
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>13}",
            "Total", t.records, t.instructions
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Surviving records in input order, with split, caption and instructions.
    pub records: Vec<SampleRecord>,
    /// Ids removed by the quartile filter, in input order.
    pub dropped: Vec<String>,
    pub quarantined: Vec<Quarantined>,
    pub stats: PipelineStats,
}

impl PipelineOutput {
    /// Folds failures from an earlier parsing step into the output and stats.
    pub fn add_ingest_failures(&mut self, failures: Vec<Quarantined>) {
        self.stats.input += failures.len();
        self.stats.quarantined += failures.len();
        let mut all = failures;
        all.append(&mut self.quarantined);
        self.quarantined = all;
    }
}

pub struct Backends<'a> {
    pub scorer: &'a mut dyn Scorer,
    pub integrator: &'a mut dyn Integrator,
    pub templates: &'a TemplateSet,
}

/// Score, rank and filter, split, integrate, render. Record-level failures
/// are quarantined with a reason; only an invalid configuration aborts.
pub fn run_pipeline(
    records: Vec<SampleRecord>,
    backends: Backends<'_>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    backends.templates.validate()?;
    let Backends {
        scorer,
        integrator,
        templates,
    } = backends;
    let mut stats = PipelineStats::zeroed();
    stats.input = records.len();
    let mut quarantined = Vec::new();
    let mut quarantine = |r: &SampleRecord, stage, reason: String| {
        quarantined.push(Quarantined {
            line: None,
            id: Some(r.id.clone()),
            stage,
            reason,
        });
    };

    let mut seen = BTreeSet::new();
    let mut scored = Vec::with_capacity(records.len());
    for mut r in records {
        if let Err(e) = r.validate() {
            quarantine(&r, PipelineStage::Ingest, format!("{e}"));
            continue;
        }
        if !seen.insert(r.id.clone()) {
            quarantine(
                &r,
                PipelineStage::Ingest,
                format!("duplicate id `{}`", r.id),
            );
            continue;
        }
        match score_record(&mut r, scorer) {
            Ok(()) => scored.push(r),
            Err(e) => quarantine(&r, PipelineStage::Score, format!("{e}")),
        }
    }

    let (kept, dropped) = filter_bottom_quartile_with(scored, &cfg.weights)?;
    stats.dropped = dropped.len();

    let mut out = Vec::with_capacity(kept.len());
    for mut r in kept {
        let split = match assign_split(&r, &cfg.splits) {
            Ok(s) => s,
            Err(e) => {
                quarantine(&r, PipelineStage::Split, format!("{e}"));
                continue;
            }
        };
        r.split = Some(split);
        match integrate_captions(&r, integrator) {
            Ok((caption, stamp)) => {
                r.av_caption = Some(caption);
                r.integrator = Some(stamp);
            }
            Err(e) => {
                quarantine(&r, PipelineStage::Integrate, format!("{e}"));
                continue;
            }
        }
        let rendered: Result<Vec<_>> = templates
            .for_split(split)
            .map(|t| render_prompt(templates, &t.id, &r, cfg.seed))
            .collect();
        match rendered {
            Ok(instructions) => {
                r.instructions = instructions;
                let c = stats.splits.entry(split).or_default();
                c.records += 1;
                c.instructions += r.instructions.len();
                out.push(r);
            }
            Err(e) => quarantine(&r, PipelineStage::Render, format!("{e}")),
        }
    }
    stats.kept = out.len();
    stats.quarantined = quarantined.len();
    Ok(PipelineOutput {
        records: out,
        dropped: dropped.into_iter().map(|r| r.id).collect(),
        quarantined,
        stats,
    })
}
