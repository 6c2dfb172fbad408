//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A model small enough that a few training steps take well under a second.
pub const SMALL: &str = r#"
[model]
llm_dim = 24
vocab = 16
readout_layers = 1
readout_heads = 2
max_text_len = 8

[model.adapter]
blocks = 2
layers_per_block = 1
dim = 16
heads = 2
frames = 2

[model.adapter.visual]
channels = 3
height = 32
width = 32
patch = 16

[model.adapter.audio]
channels = 1
height = 32
width = 32
patch = 16

[train]
samples = 2
target_len = 3
steps = 4
stages = [1]
"#;

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/avu_100.jsonl")
}

/// Runs the binary with a clean `DOLPHIN_` environment.
pub fn dolphin(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dolphin"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DOLPHIN_")) {
        cmd.env_remove(k);
    }
    cmd.args(args)
        .envs(env.iter().copied())
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}
