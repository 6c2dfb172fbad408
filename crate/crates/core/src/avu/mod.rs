//! Audio-visual dataset curation.
//!
//! Records are scored by pluggable backends, ranked by a weighted confidence,
//! cut at the bottom quartile, split by audio-visual consistency, given an
//! integrated caption, and rendered into instruction pairs.

mod filter;
mod integrate;
mod pipeline;
mod record;
mod score;
mod split;
mod synth;
mod template;

pub use filter::{filter_bottom_quartile, filter_bottom_quartile_with, rank_order};
pub use integrate::{integrate_captions, Integrator, MockIntegrator};
pub use pipeline::{
    run_pipeline, Backends, PipelineConfig, PipelineOutput, PipelineStage, PipelineStats,
    Quarantined, SplitCounts,
};
pub use record::{BackendStamp, Instruction, MetaKey, SampleRecord, Scores, SplitLabel};
pub use score::{
    compute_confidence, compute_confidence_with, normalize_linear, score_record, ConfidenceWeights,
    Filter, MockScorer, Scorer,
};
pub use split::{assign_split, multiqa_draw, SplitConfig};
pub use synth::synthetic_corpus;
pub use template::{fill, render_prompt, PromptTemplate, TemplateSet};
