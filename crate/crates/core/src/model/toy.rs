use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AvAdapter, Backbones, Encoder, ModalitySpec};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ReadoutHead, SyntheticBatch};
use crate::nn::{impl_module, Module};
use crate::temporal::{JointProjector, TemporalMerger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub adapter: AdapterConfig,
    /// Width of the readout head's token space, `D_llm`.
    pub llm_dim: usize,
    pub vocab: usize,
    pub readout_layers: usize,
    pub readout_heads: usize,
    pub max_text_len: usize,
}

impl ModelConfig {
    /// D=32, D_llm=48, vocabulary 64, two decoder blocks.
    pub fn toy() -> Self {
        ModelConfig {
            adapter: AdapterConfig::toy(),
            llm_dim: 48,
            vocab: 64,
            readout_layers: 2,
            readout_heads: 2,
            max_text_len: 16,
        }
    }

    /// Tokens handed to the readout head per sample: two per frame.
    pub fn av_tokens(&self) -> usize {
        2 * self.adapter.frames
    }

    /// Parameter totals per group, computed from the layout alone so that
    /// full-size configurations can be reported without allocating them.
    pub fn param_counts(&self) -> Vec<(ParamGroup, usize)> {
        let a = &self.adapter;
        let (d, dl) = (a.dim, self.llm_dim);
        let linear = |i: usize, o: usize| i * o + o;
        let attention = |w: usize| 4 * w * w + 3 * w;
        let ffn = |w: usize| linear(w, 4 * w) + linear(4 * w, w);
        let norm = |w: usize| 2 * w;
        let vit = norm(d) * 2 + attention(d) + ffn(d);
        let encoder = |s: &ModalitySpec| {
            linear(s.patch * s.patch * s.channels, d)
                + s.global_tokens() * d
                + a.backbone_depth() * vit
        };
        let pathway = |s: &ModalitySpec| {
            let pyramid = linear(16 * s.channels, d) + 3 * linear(9 * d, d) + 3 * linear(d, d);
            pyramid + a.blocks * (3 * attention(d) + d + ffn(d))
        };
        let decoder = 3 * norm(dl) + 2 * attention(dl) + ffn(dl);
        alloc::vec![
            (ParamGroup::VisualEncoder, encoder(&a.visual)),
            (ParamGroup::AudioEncoder, encoder(&a.audio)),
            (ParamGroup::Adapter, pathway(&a.visual) + pathway(&a.audio)),
            (
                ParamGroup::Projectors,
                2 * attention(d) + linear(d, dl) + linear(dl, dl)
            ),
            (
                ParamGroup::Readout,
                (self.vocab + self.max_text_len) * dl
                    + self.readout_layers * decoder
                    + norm(dl)
                    + linear(dl, self.vocab),
            ),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        if self.vocab < 2 || self.readout_layers == 0 || self.max_text_len == 0 {
            return Err(Error::Config(
                "vocab >= 2, readout_layers >= 1, max_text_len >= 1 required".into(),
            ));
        }
        if self.readout_heads == 0 || !self.llm_dim.is_multiple_of(self.readout_heads) {
            return Err(Error::Config(format!(
                "llm_dim {} is not divisible by {} readout heads",
                self.llm_dim, self.readout_heads
            )));
        }
        Ok(())
    }
}

/// Owner group of a parameter; the first segment of its name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisualEncoder,
    AudioEncoder,
    Adapter,
    Projectors,
    Readout,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::VisualEncoder,
        ParamGroup::AudioEncoder,
        ParamGroup::Adapter,
        ParamGroup::Projectors,
        ParamGroup::Readout,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::VisualEncoder => "visual_encoder",
            ParamGroup::AudioEncoder => "audio_encoder",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Projectors => "projectors",
            ParamGroup::Readout => "readout",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == head)
    }
}

impl core::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.prefix())
    }
}

/// Encoders, dual adapter, temporal merger, joint projector, readout head.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub visual_encoder: Encoder,
    pub audio_encoder: Encoder,
    pub adapter: AvAdapter,
    pub merger: TemporalMerger,
    pub projector: JointProjector,
    pub readout: ReadoutHead,
    config: ModelConfig,
}

impl_module!(ToyModel => visual_encoder, audio_encoder, adapter, merger, projector, readout);

impl ToyModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = &config.adapter;
        let g = |group: ParamGroup, rest: &str| format!("{}.{rest}", group.prefix());
        let model = ToyModel {
            visual_encoder: Encoder::new(ParamGroup::VisualEncoder.prefix(), &a.visual, a, seed)?,
            audio_encoder: Encoder::new(ParamGroup::AudioEncoder.prefix(), &a.audio, a, seed)?,
            adapter: AvAdapter::new(ParamGroup::Adapter.prefix(), a, seed)?,
            merger: TemporalMerger::new(&g(ParamGroup::Projectors, "merge"), a.dim, a.heads, seed)?,
            projector: JointProjector::new(
                &g(ParamGroup::Projectors, "joint"),
                a.dim,
                config.llm_dim,
                seed,
            )?,
            readout: ReadoutHead::new(
                ParamGroup::Readout.prefix(),
                config.vocab,
                config.llm_dim,
                config.readout_heads,
                config.readout_layers,
                config.max_text_len,
                seed,
            )?,
            config: config.clone(),
        };
        model.check_names()?;
        Ok(model)
    }

    fn check_names(&self) -> Result<()> {
        let mut names: Vec<&str> = self.params().iter().map(|p| p.name()).collect();
        if let Some(bad) = names.iter().find(|n| ParamGroup::of(n).is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{bad}` has no owner group"
            )));
        }
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "duplicate parameter name `{}`",
                w[0]
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbones(&self) -> Backbones<'_> {
        Backbones {
            visual: &self.visual_encoder,
            audio: &self.audio_encoder,
        }
    }

    /// Parameter names with their groups, in visiting order.
    pub fn manifest(&self) -> Vec<(String, ParamGroup, Vec<usize>)> {
        self.params()
            .into_iter()
            .map(|p| {
                let g = ParamGroup::of(p.name()).expect("checked at construction");
                (p.name().into(), g, p.value().shape().to_vec())
            })
            .collect()
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        self.params()
            .iter()
            .filter(|p| ParamGroup::of(p.name()) == Some(group))
            .map(|p| p.value().numel())
            .sum()
    }

    /// The `[B, 2T, D_llm]` tokens the readout head cross-attends to.
    pub fn av_tokens<'t>(&self, tape: &'t Tape, batch: &SyntheticBatch) -> Result<Var<'t>> {
        let (v, a) = self
            .adapter
            .forward(tape, self.backbones(), &batch.frames, &batch.specs)?;
        self.merger.forward(tape, v, a, &self.projector)
    }

    /// Next-token logits `[B, n, vocab]`.
    pub fn forward<'t>(&self, tape: &'t Tape, batch: &SyntheticBatch) -> Result<Var<'t>> {
        let av = self.av_tokens(tape, batch)?;
        self.readout.forward(tape, &batch.inputs, Some(av))
    }

    /// Readout over text alone, with no AV path at all.
    pub fn forward_text_only<'t>(&self, tape: &'t Tape, batch: &SyntheticBatch) -> Result<Var<'t>> {
        self.readout.forward(tape, &batch.inputs, None)
    }

    /// Mean next-token cross-entropy.
    pub fn loss<'t>(&self, tape: &'t Tape, batch: &SyntheticBatch) -> Result<Var<'t>> {
        self.forward(tape, batch)?
            .cross_entropy(&batch.flat_targets())
    }
}
