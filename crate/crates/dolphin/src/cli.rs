//! The `dolphin` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use dolphin_core::avu::{run_pipeline, synthetic_corpus, Backends, TemplateSet};
use dolphin_core::gradcheck::blocks::{check_all, default_seeds, Block};
use dolphin_core::gradcheck::{Fault, GradCheckOptions, DEFAULT_TOLERANCE};
use dolphin_core::model::{overfit_smoke_model, Stage};

use crate::config::RunConfig;
use crate::error::{AppError, Result};
use crate::{backend, checkpoint, corpus, fsio, report};

#[derive(Debug, Parser)]
#[command(
    name = "dolphin",
    version,
    about = "Audio-visual fusion model and dataset curation"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Base values for the model section, applied before the config file.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<PresetArg>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Toy,
    FullScale,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    /// Negate every analytic gradient; every block must then fail.
    FlipSign,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print token layouts, output shapes and parameter totals.
    Shapes,
    /// Finite-difference gradient checks for every block type.
    Gradcheck {
        /// Seeds per block; the built-in counts when omitted.
        #[arg(long)]
        seeds: Option<usize>,
        /// Restrict to these blocks (repeatable).
        #[arg(long = "block", value_parser = parse_block)]
        blocks: Vec<Block>,
        /// Inject a gradient fault to confirm the checker catches it.
        #[arg(long, value_enum)]
        fault: Option<FaultArg>,
        /// Also write the report to this file.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Overfit the seeded synthetic set through the configured stages.
    Train {
        /// Line-delimited step records {step, stage, loss, seconds}.
        #[arg(long, value_name = "PATH")]
        report: PathBuf,
        /// Stages to run, in order (repeatable); overrides train.stages.
        #[arg(long = "stage", value_parser = parse_stage)]
        stages: Vec<Stage>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Save the trained parameters to this new directory.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Score, filter, split, integrate and render a record corpus.
    Curate {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
        /// Write the per-split table here as well as to standard output.
        #[arg(long, value_name = "PATH")]
        stats: Option<PathBuf>,
        /// Write quarantined records with their reasons here.
        #[arg(long, value_name = "PATH")]
        quarantine: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a seeded synthetic corpus of unscored records.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "PATH")]
        output: PathBuf,
    },
}

fn parse_block(s: &str) -> std::result::Result<Block, String> {
    Block::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Block::ALL.iter().map(|b| b.as_str()).collect();
        format!("unknown block `{s}`; expected one of {}", names.join(", "))
    })
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse::<u8>()
        .map_err(|e| e.to_string())
        .and_then(Stage::try_from)
}

/// Entry point for the binary: parses `args`, runs, and maps errors to exit codes.
pub fn main_with<I, T>(args: I, env: Vec<(String, String)>) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    match run(cli, env, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, mut env: Vec<(String, String)>, out: &mut dyn Write) -> Result<()> {
    if let Some(p) = cli.preset {
        let name = match p {
            PresetArg::Toy => "toy",
            PresetArg::FullScale => "full_scale",
        };
        env.retain(|(k, _)| k != "DOLPHIN_PRESET");
        env.push(("DOLPHIN_PRESET".into(), name.into()));
    }
    for (k, v) in env
        .iter()
        .filter(|(k, _)| k.starts_with(crate::config::ENV_PREFIX))
    {
        log::info!("override {k}={v}");
    }
    let cfg = RunConfig::load(cli.config.as_deref(), env)?;
    let print = |out: &mut dyn Write, text: &str| {
        out.write_all(text.as_bytes())
            .map_err(|e| AppError::io("<stdout>", e))
    };
    match cli.command {
        Command::Shapes => print(out, &report::shapes(&cfg.model)?),
        Command::Gradcheck {
            seeds,
            blocks,
            fault,
            report: path,
        } => {
            let text = gradcheck(&cfg, seeds, &blocks, fault)?;
            print(out, &text.report)?;
            if let Some(p) = path {
                fsio::write_atomic(&p, text.report.as_bytes())?;
            }
            if text.failed > 0 {
                return Err(AppError::Failed(format!(
                    "{} gradient checks failed",
                    text.failed
                )));
            }
            Ok(())
        }
        Command::Train {
            report: path,
            stages,
            steps,
            lr,
            seed,
            checkpoint: ckpt,
        } => {
            let mut cfg = cfg;
            if !stages.is_empty() {
                cfg.train.stages = stages;
            }
            cfg.train.steps = steps.unwrap_or(cfg.train.steps);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            check_fresh(ckpt.as_deref())?;
            let start = Instant::now();
            let mut clock = || start.elapsed().as_secs_f64();
            let (result, model) = overfit_smoke_model(&cfg.smoke(), &mut clock)?;
            corpus::write(&path, &result.trajectory)?;
            if let Some(dir) = ckpt {
                checkpoint::save(&dir, &model)?;
            }
            print(out, &report::training(&result))
        }
        Command::Curate {
            input,
            output,
            stats,
            quarantine,
            seed,
        } => {
            let mut cfg = cfg;
            cfg.pipeline.seed = seed.unwrap_or(cfg.pipeline.seed);
            let (records, failures) = corpus::read(&input)?;
            let mut scorer = backend::scorer(&cfg.backends)?;
            let mut integrator = backend::integrator(&cfg.backends)?;
            let templates = TemplateSet::default();
            let backends = Backends {
                scorer: scorer.as_mut(),
                integrator: integrator.as_mut(),
                templates: &templates,
            };
            let mut result = run_pipeline(records, backends, &cfg.pipeline)?;
            result.add_ingest_failures(failures);
            for q in &result.quarantined {
                log::warn!(
                    "quarantined {} line {:?} at {}: {}",
                    q.id.as_deref().unwrap_or("?"),
                    q.line,
                    q.stage,
                    q.reason
                );
            }
            corpus::write(&output, &result.records)?;
            if let Some(p) = quarantine {
                corpus::write(&p, &result.quarantined)?;
            }
            let table = result.stats.table();
            if let Some(p) = stats {
                fsio::write_atomic(&p, table.as_bytes())?;
            }
            print(out, &table)
        }
        Command::Synth {
            count,
            seed,
            output,
        } => {
            corpus::write(&output, &synthetic_corpus(count, seed))?;
            print(
                out,
                &format!("wrote {count} records to {}\n", output.display()),
            )
        }
    }
}

fn check_fresh(dir: Option<&Path>) -> Result<()> {
    match dir {
        Some(d) if d.exists() => Err(AppError::Config(format!(
            "checkpoint directory {} already exists",
            d.display()
        ))),
        _ => Ok(()),
    }
}

struct GradcheckText {
    report: String,
    failed: usize,
}

fn gradcheck(
    cfg: &RunConfig,
    seeds: Option<usize>,
    blocks: &[Block],
    fault: Option<FaultArg>,
) -> Result<GradcheckText> {
    let blocks = if blocks.is_empty() {
        Block::ALL.to_vec()
    } else {
        blocks.to_vec()
    };
    let per_block = seeds.unwrap_or(cfg.gradcheck.seeds);
    let opts = GradCheckOptions {
        max_coords: Some(cfg.gradcheck.max_coords),
        fault: fault.map(|FaultArg::FlipSign| Fault::FlipSign),
        ..Default::default()
    };
    let count = |b: Block| {
        if per_block == 0 {
            default_seeds(b)
        } else {
            per_block
        }
    };
    let results = check_all(&cfg.model, &blocks, count, &opts)?;
    let failed = results
        .iter()
        .filter(|r| !r.report.passed(DEFAULT_TOLERANCE))
        .count();
    Ok(GradcheckText {
        report: report::gradcheck(&results, DEFAULT_TOLERANCE),
        failed,
    })
}
