//! Hand-written instruction templates, one family per split.
//!
//! Template text may reference `{video_caption}`, `{audio_caption}`,
//! `{av_caption}`, `{keywords}`, `{meta_info}` (all facets) or a single facet
//! such as `{meta_info.object}`. Rendering fails when a referenced field is
//! absent or empty.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::avu::{Instruction, MetaKey, SampleRecord, SplitLabel};
use crate::error::{Error, Result};
use crate::hash::hash_unit;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub id: String,
    pub split: SplitLabel,
    /// Question pool; one is chosen per record.
    pub questions: Vec<String>,
    /// Answer pool; one is chosen per record.
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    pub templates: Vec<PromptTemplate>,
}

fn template(id: &str, split: SplitLabel, questions: &[&str], answers: &[&str]) -> PromptTemplate {
    PromptTemplate {
        id: id.into(),
        split,
        questions: questions.iter().map(|&q| q.into()).collect(),
        answers: answers.iter().map(|&a| a.into()).collect(),
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        use SplitLabel::*;
        TemplateSet {
            templates: alloc::vec![
                template(
                    "pretrain.describe",
                    Pretrain,
                    &[
                        "Describe what you see and hear in this clip.",
                        "What is happening in the video and on its soundtrack?",
                        "Give a detailed audio-visual description of the clip.",
                        "Summarize the scene together with the sounds in it.",
                        "Explain the content of this video, including the audio.",
                    ],
                    &["{av_caption}"],
                ),
                template(
                    "multiqa.overview",
                    MultiQA,
                    &[
                        "What is going on in this clip, and how do the sounds relate to it?",
                        "Walk me through the events of this video and what can be heard.",
                    ],
                    &["{av_caption}"],
                ),
                template(
                    "multiqa.reasoning",
                    MultiQA,
                    &[
                        "Which visible {meta_info.object} is most likely producing the sound, and why?",
                        "Why does the audio fit the {meta_info.scene} shown in the video?",
                    ],
                    &["The video shows {video_caption}, and the audio contains {audio_caption}. Both point to {meta_info.event} involving the {meta_info.object}."],
                ),
                template(
                    "specific.visual",
                    Specific,
                    &[
                        "What can be seen in the video that the audio does not reveal?",
                        "Describe only the visual content of this clip.",
                    ],
                    &["{video_caption}"],
                ),
                template(
                    "specific.audio",
                    Specific,
                    &[
                        "What can be heard in this clip that is not visible in the frames?",
                        "Describe only the audio of this clip.",
                    ],
                    &["{audio_caption}"],
                ),
                template(
                    "negatives.source",
                    Negatives,
                    &[
                        "Can you see what is making the sound in this video?",
                        "Is the source of the sound visible in the frames?",
                    ],
                    &[
                        "No. The audio ({audio_caption}) does not come from anything shown in the video.",
                        "I cannot find the sound source in the frames. The video shows {video_caption}, which does not match what is heard.",
                    ],
                ),
                template(
                    "negatives.match",
                    Negatives,
                    &["Does the audio describe what happens in the video?"],
                    &[
                        "No, they do not match: the video shows {video_caption}, while the audio is {audio_caption}.",
                        "The audio and the video are unrelated, so I cannot answer from both modalities together.",
                    ],
                ),
                template(
                    "tasks.event",
                    Tasks,
                    &[
                        "Which audio-visual event takes place in this clip, and where?",
                        "What event happens in the {meta_info.place}?",
                    ],
                    &["{meta_info.event} at the {meta_info.place}: {av_caption}"],
                ),
                template(
                    "tasks.keywords",
                    Tasks,
                    &["List the annotated labels for this clip."],
                    &["{keywords}"],
                ),
            ],
        }
    }
}

impl TemplateSet {
    pub fn get(&self, id: &str) -> Result<&PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::Lookup(id.into()))
    }

    pub fn for_split(&self, split: SplitLabel) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter().filter(move |t| t.split == split)
    }

    /// Unique ids, non-empty pools, and placeholders that name known fields.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.templates.iter().enumerate() {
            if self.templates[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::Validation(format!(
                    "duplicate template id `{}`",
                    t.id
                )));
            }
            if t.questions.is_empty() || t.answers.is_empty() {
                return Err(Error::Validation(format!(
                    "template `{}` needs at least one question and one answer",
                    t.id
                )));
            }
            for text in t.questions.iter().chain(&t.answers) {
                for name in placeholders(text).map_err(|reason| render_error(&t.id, reason))? {
                    if !known_placeholder(name) {
                        return Err(render_error(
                            &t.id,
                            format!("unknown placeholder `{{{name}}}`"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

fn render_error(template: &str, reason: String) -> Error {
    Error::Render {
        template: template.into(),
        reason,
    }
}

fn known_placeholder(name: &str) -> bool {
    matches!(
        name,
        "video_caption" | "audio_caption" | "av_caption" | "keywords" | "meta_info"
    ) || name
        .strip_prefix("meta_info.")
        .is_some_and(|k| MetaKey::parse(k).is_some())
}

/// Placeholder names in order of appearance.
fn placeholders(text: &str) -> core::result::Result<Vec<&str>, String> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| String::from("unclosed `{`"))?;
        out.push(&after[..close]);
        rest = &after[close + 1..];
    }
    Ok(out)
}

fn field(record: &SampleRecord, name: &str) -> core::result::Result<String, String> {
    let non_empty = |v: &str, what: &str| {
        if v.trim().is_empty() {
            Err(format!("record has no {what}"))
        } else {
            Ok(String::from(v))
        }
    };
    match name {
        "video_caption" => non_empty(&record.video_caption, "video_caption"),
        "audio_caption" => non_empty(&record.audio_caption, "audio_caption"),
        "av_caption" => non_empty(record.av_caption.as_deref().unwrap_or(""), "av_caption"),
        "keywords" => non_empty(&record.keywords.join(", "), "keywords"),
        "meta_info" => {
            let parts: Vec<String> = record
                .meta_info
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(k, v)| format!("{k}: {}", v.join(", ")))
                .collect();
            non_empty(&parts.join("; "), "meta_info")
        }
        _ => {
            let key = name
                .strip_prefix("meta_info.")
                .and_then(MetaKey::parse)
                .ok_or_else(|| format!("unknown placeholder `{{{name}}}`"))?;
            match record.meta_info.get(&key) {
                Some(v) if !v.is_empty() => Ok(v.join(", ")),
                _ => Err(format!("record has no meta_info key `{key}`")),
            }
        }
    }
}

/// Substitutes every placeholder in `text` from `record`.
pub fn fill(template_id: &str, text: &str, record: &SampleRecord) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| render_error(template_id, "unclosed `{`".into()))?;
        out.push_str(
            &field(record, &after[..close]).map_err(|reason| render_error(template_id, reason))?,
        );
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn pick<'a>(
    pool: &'a [String],
    seed: u64,
    template_id: &str,
    record_id: &str,
    role: &str,
) -> &'a str {
    let u = hash_unit(&[
        &seed.to_le_bytes(),
        template_id.as_bytes(),
        record_id.as_bytes(),
        role.as_bytes(),
    ]);
    let i = ((u * pool.len() as f64) as usize).min(pool.len() - 1);
    &pool[i]
}

/// Renders one question/answer pair. The pool entries are chosen uniformly
/// from a hash of `(seed, template, record id)`, so re-runs agree.
pub fn render_prompt(
    set: &TemplateSet,
    template_id: &str,
    record: &SampleRecord,
    seed: u64,
) -> Result<Instruction> {
    let t = set.get(template_id)?;
    if t.questions.is_empty() || t.answers.is_empty() {
        return Err(render_error(
            template_id,
            "empty question or answer pool".into(),
        ));
    }
    let q = pick(&t.questions, seed, &t.id, &record.id, "question");
    let a = pick(&t.answers, seed, &t.id, &record.id, "answer");
    Ok(Instruction {
        template_id: t.id.clone(),
        question: fill(&t.id, q, record)?,
        answer: fill(&t.id, a, record)?,
    })
}
