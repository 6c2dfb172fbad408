//! Run configuration.
//!
//! A TOML file with optional sections; every key has a default, and any
//! key not listed below is rejected.
//!
//! ```toml
//! preset = "toy"            # or "full_scale": base values for [model]
//! seed = 0
//!
//! [model]                   # dims of the model; see ModelConfig
//! llm_dim = 48
//! [model.adapter]
//! dim = 32
//! [model.adapter.visual]
//! height = 64
//!
//! [train]
//! samples = 8
//! target_len = 6
//! lr = 0.5
//! steps = 500               # per stage
//! stages = [2]
//!
//! [gradcheck]
//! seeds = 20                # per block; 0 keeps the built-in counts
//! max_coords = 4
//!
//! [pipeline]                # see PipelineConfig
//! seed = 0
//! [pipeline.splits]
//! tau_hi = 0.8
//! [pipeline.weights]
//! annotation = 5.0
//!
//! [backends]
//! scorer = "mock"           # "mock" or a key of [backends.external]
//! integrator = "mock"
//! mock_salt = 0
//! [backends.external.judge]
//! command = ["python3", "judge.py"]
//! range = [1.0, 5.0]
//! ```
//!
//! Scalar keys can be overridden from the environment as
//! `DOLPHIN_<SECTION>__<KEY>`, for example `DOLPHIN_TRAIN__LR=0.1` or
//! `DOLPHIN_MODEL__ADAPTER__DIM=64`. Values are parsed as TOML literals and
//! fall back to plain strings.

use std::collections::BTreeMap;
use std::path::Path;

use dolphin_core::adapter::AdapterConfig;
use dolphin_core::avu::PipelineConfig;
use dolphin_core::model::{ModelConfig, SmokeConfig, Stage};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::{AppError, Result};
use crate::fsio;

pub const ENV_PREFIX: &str = "DOLPHIN_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    /// Full-size geometry. Fine for shape reports; far too large to train.
    FullScale,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::FullScale => ModelConfig {
                adapter: AdapterConfig::full_scale(),
                llm_dim: 4096,
                vocab: 32000,
                readout_layers: 2,
                readout_heads: 32,
                max_text_len: 512,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub pipeline: PipelineConfig,
    pub backends: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub samples: usize,
    pub target_len: usize,
    pub lr: f64,
    pub steps: usize,
    pub stages: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: usize,
    pub max_coords: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub scorer: String,
    pub integrator: String,
    pub mock_salt: u64,
    #[serde(default)]
    pub external: BTreeMap<String, ExternalBackend>,
}

/// A judge process spoken to over the text protocol in [`crate::backend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalBackend {
    /// Program and arguments.
    pub command: Vec<String>,
    /// Native score range, mapped linearly onto `[0, 1]`.
    #[serde(default = "unit_range")]
    pub range: [f64; 2],
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    /// Delay before the first retry; doubled on each further retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_version")]
    pub version: String,
}

fn unit_range() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_attempts() -> u32 {
    3
}

fn default_backoff() -> u64 {
    100
}

fn default_version() -> String {
    "unversioned".into()
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        let smoke = SmokeConfig::toy();
        RunConfig {
            preset,
            seed: smoke.seed,
            model: preset.model(),
            train: TrainConfig {
                samples: smoke.samples,
                target_len: smoke.target_len,
                lr: smoke.lr,
                steps: smoke.steps,
                stages: smoke.stages,
            },
            gradcheck: GradcheckConfig {
                seeds: 0,
                max_coords: 4,
            },
            pipeline: PipelineConfig::default(),
            backends: BackendConfig {
                scorer: "mock".into(),
                integrator: "mock".into(),
                mock_salt: 0,
                external: BTreeMap::new(),
            },
        }
    }

    /// Reads `path` (if any) over the preset defaults, then applies
    /// `DOLPHIN_` overrides from `env`, then validates.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = fsio::read_to_string(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| AppError::format(p, e.to_string()))?
            }
            None => toml::Table::new(),
        };
        Self::from_table(file, env)
    }

    pub fn from_toml(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        Self::from_table(
            text.parse()
                .map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?,
            env,
        )
    }

    fn from_table(
        mut file: toml::Table,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        // The preset decides the defaults, so it is resolved first.
        if let Some((_, v)) = overrides.iter().find(|(k, _)| k == "DOLPHIN_PRESET") {
            file.insert("preset".into(), Value::String(v.clone()));
        }
        let preset: Preset = match file.get("preset") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| AppError::Config(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        let mut merged = Value::try_from(Self::from_preset(preset)).expect("defaults serialize");
        merge(&mut merged, Value::Table(file));
        for (key, raw) in &overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            apply_override(&mut merged, &path, raw)
                .map_err(|e| AppError::Config(format!("{key}: {e}")))?;
        }
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| AppError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pipeline.validate()?;
        let t = &self.train;
        if t.samples == 0 || t.target_len == 0 || t.steps == 0 || t.stages.is_empty() {
            return Err(AppError::Config(
                "train: samples, target_len, steps and stages must be non-empty".into(),
            ));
        }
        if t.target_len > self.model.max_text_len {
            return Err(AppError::Config(format!(
                "train.target_len {} exceeds model.max_text_len {}",
                t.target_len, self.model.max_text_len
            )));
        }
        if !t.lr.is_finite() || t.lr < 0.0 {
            return Err(AppError::Config(format!(
                "train.lr must be finite and >= 0, got {}",
                t.lr
            )));
        }
        if self.gradcheck.max_coords == 0 {
            return Err(AppError::Config("gradcheck.max_coords must be >= 1".into()));
        }
        for name in [&self.backends.scorer, &self.backends.integrator] {
            if name != "mock" && !self.backends.external.contains_key(name) {
                return Err(AppError::Config(format!(
                    "backend `{name}` is neither `mock` nor in [backends.external]"
                )));
            }
        }
        for (name, b) in &self.backends.external {
            if b.command.is_empty()
                || b.attempts == 0
                || !(b.range[0] < b.range[1] && b.range.iter().all(|v| v.is_finite()))
            {
                return Err(AppError::Config(format!(
                    "backends.external.{name}: needs a command, attempts >= 1 and range lo < hi"
                )));
            }
        }
        Ok(())
    }

    pub fn smoke(&self) -> SmokeConfig {
        SmokeConfig {
            model: self.model.clone(),
            samples: self.train.samples,
            target_len: self.train.target_len,
            lr: self.train.lr,
            steps: self.train.steps,
            stages: self.train.stages.clone(),
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_override(root: &mut Value, path: &[String], raw: &str) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut table = root.as_table_mut().expect("root is a table");
    for seg in parents {
        table = table
            .get_mut(seg)
            .and_then(Value::as_table_mut)
            .ok_or_else(|| format!("no section `{seg}`"))?;
    }
    let slot = table
        .get_mut(last)
        .ok_or_else(|| format!("no key `{last}`"))?;
    if slot.is_table() || slot.is_array() {
        return Err(format!("`{last}` is not a scalar key"));
    }
    *slot = parse_scalar(raw);
    Ok(())
}

fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table() && !v.is_array())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
