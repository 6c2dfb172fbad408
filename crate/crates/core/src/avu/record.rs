use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::avu::Filter;
use crate::error::{Error, Result};

/// The six meta-information facets extracted for every clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaKey {
    Event,
    Object,
    Scene,
    Place,
    Action,
    Emotion,
}

impl MetaKey {
    pub const ALL: [MetaKey; 6] = [
        MetaKey::Event,
        MetaKey::Object,
        MetaKey::Scene,
        MetaKey::Place,
        MetaKey::Action,
        MetaKey::Emotion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetaKey::Event => "event",
            MetaKey::Object => "object",
            MetaKey::Scene => "scene",
            MetaKey::Place => "place",
            MetaKey::Action => "action",
            MetaKey::Emotion => "emotion",
        }
    }

    pub fn parse(s: &str) -> Option<MetaKey> {
        MetaKey::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for MetaKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Filter scores, each in `[0, 1]` once present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
}

impl Scores {
    pub fn new(clip: f64, self_consistency: f64, annotation: f64, consistency: f64) -> Self {
        Scores {
            clip: Some(clip),
            self_consistency: Some(self_consistency),
            annotation: Some(annotation),
            consistency: Some(consistency),
        }
    }

    pub fn get(&self, filter: Filter) -> Option<f64> {
        match filter {
            Filter::Clip => self.clip,
            Filter::SelfConsistency => self.self_consistency,
            Filter::Annotation => self.annotation,
            Filter::Consistency => self.consistency,
        }
    }

    pub fn set(&mut self, filter: Filter, value: f64) {
        let slot = match filter {
            Filter::Clip => &mut self.clip,
            Filter::SelfConsistency => &mut self.self_consistency,
            Filter::Annotation => &mut self.annotation,
            Filter::Consistency => &mut self.consistency,
        };
        *slot = Some(value);
    }

    pub fn fields(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("clip", self.clip),
            ("self_consistency", self.self_consistency),
            ("annotation", self.annotation),
            ("consistency", self.consistency),
        ]
    }

    /// Every present score is finite and in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if let Some(v) = v {
                check_unit(name, v)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "score `{name}` = {v} is outside [0, 1]"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitLabel {
    Pretrain,
    MultiQA,
    Specific,
    Negatives,
    Tasks,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 5] = [
        SplitLabel::Pretrain,
        SplitLabel::MultiQA,
        SplitLabel::Specific,
        SplitLabel::Negatives,
        SplitLabel::Tasks,
    ];
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitLabel::Pretrain => "Pretrain",
            SplitLabel::MultiQA => "MultiQA",
            SplitLabel::Specific => "Specific",
            SplitLabel::Negatives => "Negatives",
            SplitLabel::Tasks => "Tasks",
        })
    }
}

/// Which backend produced a record's integrated caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendStamp {
    pub backend: String,
    pub version: String,
}

/// One rendered question/answer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub template_id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub video_caption: String,
    pub audio_caption: String,
    #[serde(default)]
    pub meta_info: BTreeMap<MetaKey, Vec<String>>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub scores: Scores,
    #[serde(default)]
    pub has_task_annotation: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub av_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<BackendStamp>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructions: Vec<Instruction>,
}

impl SampleRecord {
    pub fn new(id: &str, video_caption: &str, audio_caption: &str) -> Self {
        SampleRecord {
            id: id.into(),
            video_caption: video_caption.into(),
            audio_caption: audio_caption.into(),
            meta_info: BTreeMap::new(),
            keywords: Vec::new(),
            scores: Scores::default(),
            has_task_annotation: false,
            split: None,
            av_caption: None,
            integrator: None,
            instructions: Vec::new(),
        }
    }

    /// Ingest-time checks: a non-empty id and in-range scores.
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::Validation("record id is empty".into()));
        }
        self.scores.validate()
    }
}
