//! Plain-text reports printed by the commands.

use std::fmt::Write;

use dolphin_core::adapter::ModalitySpec;
use dolphin_core::gradcheck::blocks::{Block, BlockCheck};
use dolphin_core::model::{ModelConfig, OverfitReport};

use crate::error::Result;

/// Token layout and parameter totals, derived from the configuration alone.
pub fn shapes(cfg: &ModelConfig) -> Result<String> {
    cfg.validate()?;
    let a = &cfg.adapter;
    let mut out = String::new();
    let _ = writeln!(out, "frames T: {}", a.frames);
    let _ = writeln!(
        out,
        "adapter: {} blocks of {} layers, D = {}, {} heads",
        a.blocks, a.layers_per_block, a.dim, a.heads
    );
    for (name, spec) in [("visual", &a.visual), ("audio", &a.audio)] {
        let [s1, s2, s3] = spec.segments()?;
        let _ = writeln!(
            out,
            "{name}: input {}x{}x{}, padded {}x{}, patch {}, global tokens {}, multi-scale segments {s1}/{s2}/{s3} ({} tokens)",
            spec.height,
            spec.width,
            spec.channels,
            spec.padded_height(),
            spec.padded_width(),
            spec.patch,
            spec.global_tokens(),
            s1 + s2 + s3
        );
    }
    for (name, spec) in [("visual", &a.visual), ("audio", &a.audio)] {
        let _ = writeln!(
            out,
            "{name} global output: {}",
            global_shape(spec, a.frames, a.dim)
        );
    }
    let _ = writeln!(
        out,
        "LLM tokens: {} (B x {} x {})",
        cfg.av_tokens(),
        cfg.av_tokens(),
        cfg.llm_dim
    );
    let _ = writeln!(out, "parameters:");
    let counts = cfg.param_counts();
    for (group, n) in &counts {
        let _ = writeln!(out, "  {:<16} {n:>14}", group.prefix());
    }
    let _ = writeln!(
        out,
        "  {:<16} {:>14}",
        "total",
        counts.iter().map(|(_, n)| n).sum::<usize>()
    );
    Ok(out)
}

fn global_shape(spec: &ModalitySpec, frames: usize, dim: usize) -> String {
    format!("B x {frames} x {} x {dim}", spec.global_tokens())
}

/// One line per block with the worst error over its seeds, then a verdict.
pub fn gradcheck(results: &[BlockCheck], tolerance: f64) -> String {
    let mut out = String::new();
    for block in Block::ALL {
        let runs: Vec<&BlockCheck> = results.iter().filter(|r| r.block == block).collect();
        if runs.is_empty() {
            continue;
        }
        let worst = runs
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
            .expect("non-empty");
        let failed = runs.iter().filter(|r| !r.report.passed(tolerance)).count();
        let at = worst
            .report
            .worst
            .as_ref()
            .map_or(String::from("-"), |(n, i)| {
                format!("{n}[{i}] seed {}", worst.seed)
            });
        let _ = writeln!(
            out,
            "{:<16} seeds {:>3}  max rel err {:.3e}  at {at}  {}",
            block.as_str(),
            runs.len(),
            worst.report.max_rel_error,
            if failed == 0 {
                "PASS".to_string()
            } else {
                format!("FAIL ({failed} seeds)")
            }
        );
    }
    let failed = results
        .iter()
        .filter(|r| !r.report.passed(tolerance))
        .count();
    let _ = writeln!(
        out,
        "{} checks, tolerance {tolerance:e}: {}",
        results.len(),
        if failed == 0 {
            "all passed".to_string()
        } else {
            format!("{failed} failed")
        }
    );
    out
}

/// Stage summaries with frozen groups, then the final losses.
pub fn training(report: &OverfitReport) -> String {
    let mut out = String::new();
    for s in &report.stages {
        let frozen: Vec<&str> = s.frozen.iter().map(|g| g.prefix()).collect();
        let _ = writeln!(
            out,
            "stage {}: {} steps, loss {:.6} -> {:.6}, frozen: {}",
            s.stage as u8,
            s.steps,
            s.initial_loss,
            s.final_loss,
            frozen.join(", ")
        );
    }
    let _ = writeln!(
        out,
        "loss ratio {:.4} over {} steps in {:.1} s",
        report.final_loss() / report.initial_loss(),
        report.steps(),
        report.wall_seconds
    );
    out
}
