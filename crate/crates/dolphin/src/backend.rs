//! Scorer and integrator backends by name.
//!
//! `mock` is built in. External backends are programs started once per
//! request. The request goes to standard input as `key: value` lines:
//!
//! ```text
//! dolphin-score 1            (or dolphin-integrate 1)
//! filter: clip               (scoring only)
//! id: avu-00001
//! video_caption: a dog runs in the park
//! audio_caption: barking can be heard
//! keywords: dog, barking
//! meta_info.event: dog barking
//! ```
//!
//! Newlines and backslashes inside values are escaped as `\n` and `\\`.
//! The program answers on standard output with a `score: <number>` line in
//! its native range (or `caption: <text>` when integrating) and exits 0.
//! Failed or malformed exchanges are retried with exponential backoff.

use std::io::Write;
use std::process::{Command, Stdio};
use std::thread;
use std::time::Duration;

use dolphin_core::avu::{
    normalize_linear, Filter, Integrator, MockIntegrator, MockScorer, SampleRecord, Scorer,
};
use dolphin_core::Error;

use crate::config::{BackendConfig, ExternalBackend};
use crate::error::{AppError, Result};

pub fn scorer(cfg: &BackendConfig) -> Result<Box<dyn Scorer>> {
    match cfg.scorer.as_str() {
        "mock" => Ok(Box::new(MockScorer::new(cfg.mock_salt))),
        name => Ok(Box::new(ExternalScorer(External::new(
            name,
            lookup(cfg, name)?,
        )))),
    }
}

pub fn integrator(cfg: &BackendConfig) -> Result<Box<dyn Integrator>> {
    match cfg.integrator.as_str() {
        "mock" => Ok(Box::new(MockIntegrator)),
        name => Ok(Box::new(ExternalIntegrator(External::new(
            name,
            lookup(cfg, name)?,
        )))),
    }
}

fn lookup<'a>(cfg: &'a BackendConfig, name: &str) -> Result<&'a ExternalBackend> {
    cfg.external
        .get(name)
        .ok_or_else(|| AppError::Config(format!("unknown backend `{name}`")))
}

struct External {
    name: String,
    spec: ExternalBackend,
}

impl External {
    fn new(name: &str, spec: &ExternalBackend) -> Self {
        External {
            name: name.into(),
            spec: spec.clone(),
        }
    }

    fn failure(&self, record: &SampleRecord, message: String, retryable: bool) -> Error {
        Error::Backend {
            backend: self.name.clone(),
            record: record.id.clone(),
            message,
            retryable,
        }
    }

    /// Runs the program until it returns a `<key>: <value>` answer, up to
    /// the configured number of attempts.
    fn exchange(
        &self,
        request: &str,
        key: &str,
        record: &SampleRecord,
    ) -> dolphin_core::Result<String> {
        let mut delay = Duration::from_millis(self.spec.backoff_ms);
        let mut last = String::new();
        for attempt in 1..=self.spec.attempts {
            match self.call(request).and_then(|out| answer(&out, key)) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    log::warn!(
                        "backend `{}` attempt {attempt} on `{}`: {e}",
                        self.name,
                        record.id
                    );
                    last = e;
                }
            }
            if attempt < self.spec.attempts {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
        }
        Err(self.failure(
            record,
            format!("gave up after {} attempts: {last}", self.spec.attempts),
            true,
        ))
    }

    fn call(&self, request: &str) -> std::result::Result<String, String> {
        let (program, args) = self.spec.command.split_first().ok_or("empty command")?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot start `{program}`: {e}"))?;
        // A program that answers without reading its input closes the pipe
        // early; its answer still counts.
        let _ = child
            .stdin
            .take()
            .expect("piped")
            .write_all(request.as_bytes());
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("exited with {}", out.status));
        }
        String::from_utf8(out.stdout).map_err(|_| "answer is not UTF-8".into())
    }
}

fn answer(output: &str, key: &str) -> std::result::Result<String, String> {
    output
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(':')))
        .map(|v| unescape(v.trim()))
        .ok_or_else(|| format!("no `{key}:` line in answer"))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// The request text for `record`; `filter` is set for scoring requests.
pub fn request(record: &SampleRecord, filter: Option<Filter>) -> String {
    let mut out = String::new();
    out.push_str(if filter.is_some() {
        "dolphin-score 1\n"
    } else {
        "dolphin-integrate 1\n"
    });
    let mut line = |k: &str, v: &str| out.push_str(&format!("{k}: {}\n", escape(v)));
    if let Some(f) = filter {
        line("filter", f.as_str());
    }
    line("id", &record.id);
    line("video_caption", &record.video_caption);
    line("audio_caption", &record.audio_caption);
    line("keywords", &record.keywords.join(", "));
    for (k, v) in &record.meta_info {
        line(&format!("meta_info.{k}"), &v.join(", "));
    }
    out
}

struct ExternalScorer(External);

impl Scorer for ExternalScorer {
    fn id(&self) -> &str {
        &self.0.name
    }

    fn score(&mut self, filter: Filter, record: &SampleRecord) -> dolphin_core::Result<f64> {
        let raw = self
            .0
            .exchange(&request(record, Some(filter)), "score", record)?;
        let v: f64 = raw.parse().map_err(|_| {
            self.0
                .failure(record, format!("score `{raw}` is not a number"), false)
        })?;
        let [lo, hi] = self.0.spec.range;
        normalize_linear(v, lo, hi).map_err(|e| self.0.failure(record, e.to_string(), false))
    }
}

struct ExternalIntegrator(External);

impl Integrator for ExternalIntegrator {
    fn id(&self) -> &str {
        &self.0.name
    }

    fn version(&self) -> &str {
        &self.0.spec.version
    }

    fn integrate(&mut self, record: &SampleRecord) -> dolphin_core::Result<String> {
        let caption = self.0.exchange(&request(record, None), "caption", record)?;
        if caption.trim().is_empty() {
            return Err(self.0.failure(record, "empty caption".into(), true));
        }
        Ok(caption)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaping_round_trips() {
        for s in ["plain", "two\nlines", "back\\slash\\n", "cr\r\n"] {
            assert_eq!(unescape(&escape(s)), s);
            assert!(!escape(s).contains('\n'));
        }
    }

    #[test]
    fn answers_are_found_by_key() {
        assert_eq!(answer("log line\nscore: 4.5\n", "score").unwrap(), "4.5");
        assert_eq!(answer("caption: a\\nb", "caption").unwrap(), "a\nb");
        assert!(answer("scores: 1", "score").is_err());
    }

    #[test]
    fn request_lists_fields_in_order() {
        let mut r = SampleRecord::new("id-1", "a dog\nruns", "barking");
        r.keywords = vec!["dog".into(), "bark".into()];
        let req = request(&r, Some(Filter::Annotation));
        assert_eq!(
            req,
            "dolphin-score 1\nfilter: annotation\nid: id-1\nvideo_caption: a dog\\nruns\naudio_caption: barking\nkeywords: dog, bark\n"
        );
    }
}
