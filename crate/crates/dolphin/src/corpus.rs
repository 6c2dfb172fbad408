//! Line-delimited JSON corpora: one `SampleRecord` object per line.

use std::path::Path;

use dolphin_core::avu::{PipelineStage, Quarantined, SampleRecord};

use crate::error::{AppError, Result};
use crate::fsio;

/// Parses a corpus. Blank lines are skipped; lines that fail to parse are
/// returned as ingest quarantine entries carrying their 1-based line number.
pub fn parse(text: &str) -> (Vec<SampleRecord>, Vec<Quarantined>) {
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SampleRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => failures.push(Quarantined {
                line: Some(i + 1),
                id: id_hint(line),
                stage: PipelineStage::Ingest,
                reason: e.to_string(),
            }),
        }
    }
    (records, failures)
}

/// The `id` field of a line that is valid JSON but not a valid record.
fn id_hint(line: &str) -> Option<String> {
    let v: serde_json::Value = serde_json::from_str(line).ok()?;
    v.get("id")?.as_str().map(String::from)
}

pub fn read(path: &Path) -> Result<(Vec<SampleRecord>, Vec<Quarantined>)> {
    let bytes = fsio::read(path)?;
    let text =
        String::from_utf8(bytes).map_err(|e| AppError::format(path, format!("not UTF-8: {e}")))?;
    Ok(parse(&text))
}

/// One compact JSON object per line, each line ending in `\n`.
pub fn to_jsonl<T: serde::Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    fsio::write_atomic(path, to_jsonl(items).as_bytes())
}
