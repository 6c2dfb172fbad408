//! Checkpoints: a directory with a text manifest and one tensor blob per
//! parameter.
//!
//! `manifest.txt` starts with `dolphin-checkpoint 1`, then one line per
//! parameter in visiting order: `<name>\t<d0>x<d1>x…` (`-` for a scalar).
//! The blob for parameter `p` is `p.dtns`.

use std::fs;
use std::path::Path;

use dolphin_core::nn::Module;

use crate::blob;
use crate::error::{AppError, Result};
use crate::fsio;

pub const MANIFEST: &str = "manifest.txt";
const HEADER: &str = "dolphin-checkpoint 1";

pub fn manifest<M: Module>(module: &M) -> String {
    let mut out = format!("{HEADER}\n");
    for p in module.params() {
        out.push_str(p.name());
        out.push('\t');
        out.push_str(&format_shape(p.value().shape()));
        out.push('\n');
    }
    out
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "-".into();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Parses a manifest into `(name, shape)` pairs.
pub fn parse_manifest(text: &str) -> std::result::Result<Vec<(String, Vec<usize>)>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(format!("manifest must start with `{HEADER}`"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (name, shape) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected `name<TAB>shape`", i + 2))?;
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(format!("line {}: invalid parameter name `{name}`", i + 2));
            }
            let shape = if shape == "-" {
                vec![]
            } else {
                shape
                    .split('x')
                    .map(|d| {
                        d.parse::<usize>()
                            .map_err(|_| format!("line {}: bad dimension `{d}`", i + 2))
                    })
                    .collect::<std::result::Result<_, _>>()?
            };
            Ok((name.to_string(), shape))
        })
        .collect()
}

/// Writes the checkpoint into a fresh directory next to `dir`, then renames
/// it into place. `dir` must not exist yet.
pub fn save<M: Module>(dir: &Path, module: &M) -> Result<()> {
    if dir.exists() {
        return Err(AppError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::AlreadyExists, "checkpoint exists"),
        ));
    }
    let parent = fsio::parent_dir(dir);
    let tmp = tempfile::Builder::new()
        .prefix(".checkpoint")
        .tempdir_in(parent)
        .map_err(|e| AppError::io(parent, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = tmp.path().join(name);
        fs::write(&path, bytes).map_err(|e| AppError::io(&path, e))
    };
    write(MANIFEST, manifest(module).as_bytes())?;
    for p in module.params() {
        write(&format!("{}.dtns", p.name()), &blob::encode(p.value()))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, dir).map_err(|e| {
        let _ = fs::remove_dir_all(&staged);
        AppError::io(dir, e)
    })
}

/// Loads values into `module`. The manifest must list exactly the module's
/// parameters, in order, with matching shapes; nothing is modified otherwise.
pub fn load_into<M: Module>(dir: &Path, module: &mut M) -> Result<()> {
    let path = dir.join(MANIFEST);
    let entries =
        parse_manifest(&fsio::read_to_string(&path)?).map_err(|r| AppError::format(&path, r))?;
    let expected: Vec<(String, Vec<usize>)> = module
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.value().shape().to_vec()))
        .collect();
    if entries != expected {
        let first = entries
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(entries.len().min(expected.len()));
        return Err(AppError::format(
            &path,
            format!(
                "does not match the model ({} entries vs {}; first difference at entry {first})",
                entries.len(),
                expected.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(entries.len());
    for (name, shape) in &entries {
        let t = blob::load(&dir.join(format!("{name}.dtns")))?;
        if t.shape() != shape.as_slice() {
            return Err(AppError::format(
                dir.join(format!("{name}.dtns")),
                "shape differs from the manifest",
            ));
        }
        values.push(t);
    }
    let mut values = values.into_iter();
    module.visit_mut(&mut |p| {
        let t = values.next().expect("counted above");
        p.value_mut().data_mut().copy_from_slice(t.data());
    });
    Ok(())
}
