//! Audio-visual multi-scale adapter.
//!
//! Each modality has a global token stream (the backbone's patch tokens) and
//! a multi-scale stream (pyramid tokens). Per block `i`, for the visual side:
//!
//! ```text
//! av   = CrossAttn(v,  A,  A)            audio global context into visual multi-scale
//! V̂    = V + β ⊙ CrossAttn(V, av, av)     gated back into the visual global stream
//! V'   = ViT-Block(V̂)
//! v̂    = v + CrossAttn(v, V', V')
//! v'   = v̂ + FFN(v̂)
//! ```
//!
//! and the same with modality roles swapped for audio. Both pathways read the
//! other modality's global tokens from the start of the block. `β` starts at
//! zero, so an untrained adapter leaves the backbone output untouched.
//! All attention is frame-local: frames are folded into the batch axis.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::patch::padded;
use crate::nn::{
    impl_module, pyramid_segments, CrossAttention, FeatureMap, FeedForward, MultiScaleFeature,
    Param, PatchEmbed, Pyramid, ViTBlock,
};
use crate::tensor::Tensor;

/// Input geometry of one modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ModalitySpec {
    pub fn padded_height(&self) -> usize {
        padded(self.height)
    }

    pub fn padded_width(&self) -> usize {
        padded(self.width)
    }

    /// Global (backbone) tokens per frame.
    pub fn global_tokens(&self) -> usize {
        (self.padded_height() / self.patch) * (self.padded_width() / self.patch)
    }

    pub fn segments(&self) -> Result<[usize; 3]> {
        pyramid_segments(self.height, self.width)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.channels == 0 || self.patch == 0 {
            return Err(Error::Config(format!(
                "{what}: channels and patch must be positive"
            )));
        }
        self.segments()?;
        if !self.padded_height().is_multiple_of(self.patch)
            || !self.padded_width().is_multiple_of(self.patch)
        {
            return Err(Error::Config(format!(
                "{what}: padded size {}x{} is not divisible by patch {}",
                self.padded_height(),
                self.padded_width(),
                self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// Adapter blocks `N`.
    pub blocks: usize,
    /// Backbone layers per adapter block.
    pub layers_per_block: usize,
    /// Token width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Frames per sample `T`.
    pub frames: usize,
    pub visual: ModalitySpec,
    pub audio: ModalitySpec,
}

impl AdapterConfig {
    /// Desk-scale defaults: D=32, two heads, N=2 blocks of one layer, eight
    /// 64×64 frames, 32×48 spectrograms.
    pub fn toy() -> Self {
        AdapterConfig {
            blocks: 2,
            layers_per_block: 1,
            dim: 32,
            heads: 2,
            frames: 8,
            visual: ModalitySpec {
                channels: 3,
                height: 64,
                width: 64,
                patch: 16,
            },
            audio: ModalitySpec {
                channels: 1,
                height: 32,
                width: 48,
                patch: 16,
            },
        }
    }

    /// Full-size layout: N=4 blocks of 6 layers, eight 224×224 frames and
    /// 128×204 spectrograms. The width here is illustrative only.
    pub fn full_scale() -> Self {
        AdapterConfig {
            blocks: 4,
            layers_per_block: 6,
            dim: 1024,
            heads: 16,
            frames: 8,
            visual: ModalitySpec {
                channels: 3,
                height: 224,
                width: 224,
                patch: 14,
            },
            audio: ModalitySpec {
                channels: 1,
                height: 128,
                width: 204,
                patch: 16,
            },
        }
    }

    pub fn backbone_depth(&self) -> usize {
        self.blocks * self.layers_per_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 || self.frames == 0 {
            return Err(Error::Config(
                "blocks, layers_per_block, and frames must be >= 1".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        self.visual.validate("visual")?;
        self.audio.validate("audio")
    }
}

/// Patch embedding plus a stack of ViT blocks, split into adapter stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch: PatchEmbed,
    pub blocks: Vec<ViTBlock>,
    layers_per_block: usize,
}

impl_module!(Encoder => patch, blocks);

impl Encoder {
    pub fn new(name: &str, spec: &ModalitySpec, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let patch = PatchEmbed::new(
            &format!("{name}.patch"),
            spec.patch,
            spec.channels,
            spec.padded_height(),
            spec.padded_width(),
            cfg.dim,
            seed,
        )?;
        let blocks = (0..cfg.backbone_depth())
            .map(|i| ViTBlock::new(&format!("{name}.block{i}"), cfg.dim, cfg.heads, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder {
            patch,
            blocks,
            layers_per_block: cfg.layers_per_block,
        })
    }

    pub fn embed<'t>(&self, tape: &'t Tape, map: &FeatureMap) -> Result<Var<'t>> {
        self.patch.forward(tape, map)
    }

    /// Runs backbone stage `index` (0-based): `layers_per_block` ViT blocks.
    pub fn stage<'t>(&self, tape: &'t Tape, index: usize, mut x: Var<'t>) -> Result<Var<'t>> {
        let start = index * self.layers_per_block;
        let layers = self
            .blocks
            .get(start..start + self.layers_per_block)
            .ok_or(Error::Sequencing {
                index: index + 1,
                blocks: self.blocks.len() / self.layers_per_block,
            })?;
        for b in layers {
            x = b.forward(tape, x)?;
        }
        Ok(x)
    }

    /// The plain backbone: patch embedding then every block, no adapter.
    pub fn forward<'t>(&self, tape: &'t Tape, map: &FeatureMap) -> Result<Var<'t>> {
        let mut x = self.embed(tape, map)?;
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        Ok(x)
    }
}

/// Per-channel gate `β`, zero at construction.
#[derive(Debug, Clone)]
pub struct FusionGate {
    pub beta: Param,
}

impl_module!(FusionGate => beta);

impl FusionGate {
    pub fn new(name: &str, dim: usize) -> Result<Self> {
        Ok(FusionGate {
            beta: Param::zeros(format!("{name}.beta"), &[dim])?,
        })
    }
}

/// Adapter weights for one block of one pathway.
#[derive(Debug, Clone)]
pub struct AdapterBlock {
    /// Other modality's global tokens into this modality's multi-scale tokens.
    pub inject: CrossAttention,
    /// Injected multi-scale tokens back into this modality's global tokens.
    pub fuse: CrossAttention,
    pub gate: FusionGate,
    /// Updated global tokens into the multi-scale tokens.
    pub refine: CrossAttention,
    pub ffn: FeedForward,
}

impl_module!(AdapterBlock => inject, fuse, gate, refine, ffn);

impl AdapterBlock {
    fn new(name: &str, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let (d, h) = (cfg.dim, cfg.heads);
        Ok(AdapterBlock {
            inject: CrossAttention::new(&format!("{name}.inject"), d, h, seed)?,
            fuse: CrossAttention::new(&format!("{name}.fuse"), d, h, seed)?,
            gate: FusionGate::new(&format!("{name}.gate"), d)?,
            refine: CrossAttention::new(&format!("{name}.refine"), d, h, seed)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), d, 4 * d, seed)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct AdapterPathway {
    pub pyramid: Pyramid,
    pub blocks: Vec<AdapterBlock>,
}

impl_module!(AdapterPathway => pyramid, blocks);

impl AdapterPathway {
    pub fn new(name: &str, spec: &ModalitySpec, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        Ok(AdapterPathway {
            pyramid: Pyramid::new(&format!("{name}.pyramid"), spec.channels, cfg.dim, seed)?,
            blocks: (0..cfg.blocks)
                .map(|i| AdapterBlock::new(&format!("{name}.block{i}"), cfg, seed))
                .collect::<Result<_>>()?,
        })
    }
}

/// Two same-topology pathways with independent weights.
#[derive(Debug, Clone)]
pub struct AvAdapter {
    pub visual: AdapterPathway,
    pub audio: AdapterPathway,
    config: AdapterConfig,
}

impl_module!(AvAdapter => visual, audio);

/// The frozen backbones the adapter runs alongside.
#[derive(Debug, Clone, Copy)]
pub struct Backbones<'a> {
    pub visual: &'a Encoder,
    pub audio: &'a Encoder,
}

#[derive(Debug, Clone, Copy)]
pub struct PathwayState<'t> {
    /// `[frames, L, D]`
    pub global: Var<'t>,
    pub multi_scale: MultiScaleFeature<'t>,
}

/// Both pathways between adapter blocks. `block` is 1-based; after the last
/// block it equals `N + 1`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterState<'t> {
    pub visual: PathwayState<'t>,
    pub audio: PathwayState<'t>,
    pub block: usize,
}

/// Cross-modal injection: queries are multi-scale tokens, keys and values the
/// other modality's global tokens of the same frame.
pub fn inject_cross_modal<'t>(
    tape: &'t Tape,
    ms: &MultiScaleFeature<'t>,
    other_global: Var<'t>,
    layer: &CrossAttention,
) -> Result<Var<'t>> {
    let (q, kv) = (ms.tokens.shape(), other_global.shape());
    if q.len() != kv.len() || q[..q.len() - 2] != kv[..kv.len() - 2] {
        return Err(Error::Alignment(format!(
            "multi-scale tokens {q:?} and other-modality tokens {kv:?} do not cover the same frames"
        )));
    }
    layer.forward(tape, ms.tokens, other_global)
}

/// Gated fusion: `global + β ⊙ CrossAttn(global, av, av)`.
pub fn fuse_global<'t>(
    tape: &'t Tape,
    global: Var<'t>,
    av: Var<'t>,
    gate: &FusionGate,
    layer: &CrossAttention,
) -> Result<Var<'t>> {
    let d = *global.shape().last().unwrap();
    if gate.beta.value().shape() != [d] {
        return Err(Error::shape("fuse_global", gate.beta.value().shape(), &[d]));
    }
    let read = layer.forward(tape, global, av)?;
    if read.to_vec().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "fuse_global" });
    }
    global.add(read.mul(tape.param(&gate.beta)?)?)
}

impl AvAdapter {
    pub fn new(name: &str, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(AvAdapter {
            visual: AdapterPathway::new(&format!("{name}.visual"), &cfg.visual, cfg, seed)?,
            audio: AdapterPathway::new(&format!("{name}.audio"), &cfg.audio, cfg, seed)?,
            config: cfg.clone(),
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    /// Block-1 state: backbone patch tokens and pyramid tokens per modality.
    pub fn init_state<'t>(
        &self,
        tape: &'t Tape,
        backbones: Backbones<'_>,
        visual: &FeatureMap,
        audio: &FeatureMap,
    ) -> Result<AdapterState<'t>> {
        if visual.frames() != audio.frames() {
            return Err(Error::Alignment(format!(
                "{} visual frames vs {} audio frames",
                visual.frames(),
                audio.frames()
            )));
        }
        Ok(AdapterState {
            visual: PathwayState {
                global: backbones.visual.embed(tape, visual)?,
                multi_scale: self.visual.pyramid.features(tape, visual)?,
            },
            audio: PathwayState {
                global: backbones.audio.embed(tape, audio)?,
                multi_scale: self.audio.pyramid.features(tape, audio)?,
            },
            block: 1,
        })
    }

    /// Runs adapter block `state.block` on both pathways.
    pub fn advance_block<'t>(
        &self,
        tape: &'t Tape,
        backbones: Backbones<'_>,
        state: AdapterState<'t>,
    ) -> Result<AdapterState<'t>> {
        let n = self.config.blocks;
        if state.block == 0 || state.block > n {
            return Err(Error::Sequencing {
                index: state.block,
                blocks: n,
            });
        }
        let i = state.block - 1;
        let (vb, ab) = (&self.visual.blocks[i], &self.audio.blocks[i]);
        let (v, a) = (state.visual, state.audio);

        let av = inject_cross_modal(tape, &v.multi_scale, a.global, &vb.inject)?;
        let va = inject_cross_modal(tape, &a.multi_scale, v.global, &ab.inject)?;

        let v_hat = fuse_global(tape, v.global, av, &vb.gate, &vb.fuse)?;
        let a_hat = fuse_global(tape, a.global, va, &ab.gate, &ab.fuse)?;

        let v_next = backbones.visual.stage(tape, i, v_hat)?;
        let a_next = backbones.audio.stage(tape, i, a_hat)?;

        Ok(AdapterState {
            visual: PathwayState {
                global: v_next,
                multi_scale: refine(tape, v.multi_scale, v_next, vb)?,
            },
            audio: PathwayState {
                global: a_next,
                multi_scale: refine(tape, a.multi_scale, a_next, ab)?,
            },
            block: state.block + 1,
        })
    }

    /// Full spatial stage for `frames: [B, T, C, H, W]` and
    /// `specs: [B, T, 1, H_a, W_a]`. Returns the global tokens after the last
    /// block as `[B, T, L_v, D]` and `[B, T, L_a, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        backbones: Backbones<'_>,
        frames: &Tensor,
        specs: &Tensor,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (b, t) = check_clip(frames, specs, &self.config)?;
        let visual = FeatureMap::from_images(&fold_frames(frames)?)?;
        let audio = FeatureMap::from_images(&fold_frames(specs)?)?;
        let mut state = self.init_state(tape, backbones, &visual, &audio)?;
        while state.block <= self.config.blocks {
            state = self.advance_block(tape, backbones, state)?;
        }
        Ok((
            unfold(state.visual.global, b, t)?,
            unfold(state.audio.global, b, t)?,
        ))
    }
}

fn refine<'t>(
    tape: &'t Tape,
    ms: MultiScaleFeature<'t>,
    global: Var<'t>,
    block: &AdapterBlock,
) -> Result<MultiScaleFeature<'t>> {
    let hat = ms
        .tokens
        .add(block.refine.forward(tape, ms.tokens, global)?)?;
    let next = hat.add(block.ffn.forward(tape, hat)?)?;
    Ok(MultiScaleFeature {
        tokens: next,
        segments: ms.segments,
    })
}

/// Validates a `[B, T, C, H, W]` clip pair against the config; returns `(B, T)`.
pub fn check_clip(frames: &Tensor, specs: &Tensor, cfg: &AdapterConfig) -> Result<(usize, usize)> {
    let (fs, ss) = (frames.shape(), specs.shape());
    if fs.len() != 5 || ss.len() != 5 {
        return Err(Error::shape("adapter_forward", fs, ss));
    }
    if fs[0] != ss[0] {
        return Err(Error::Alignment(format!(
            "batch {} of frames vs {} of spectrograms",
            fs[0], ss[0]
        )));
    }
    if fs[1] != cfg.frames || ss[1] != cfg.frames {
        return Err(Error::Alignment(format!(
            "expected {} frames per sample, got {} visual and {} audio",
            cfg.frames, fs[1], ss[1]
        )));
    }
    let expect = |spec: &ModalitySpec, s: &[usize], what: &str| {
        if s[2..] != [spec.channels, spec.height, spec.width] {
            Err(Error::Config(format!(
                "{what} frames are {:?}, config expects {}x{}x{}",
                &s[2..],
                spec.channels,
                spec.height,
                spec.width
            )))
        } else {
            Ok(())
        }
    };
    expect(&cfg.visual, fs, "visual")?;
    expect(&cfg.audio, ss, "audio")?;
    Ok((fs[0], fs[1]))
}

/// `[B, T, C, H, W]` → `[B·T, C, H, W]`.
pub fn fold_frames(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    x.reshape(&[s[0] * s[1], s[2], s[3], s[4]])
}

fn unfold<'t>(x: Var<'t>, b: usize, t: usize) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[b, t, s[1], s[2]])
}

/// Average over the frame axis: `[B, T, L, D]` → `[B, L, D]`.
pub fn temporal_pool(tokens: Var<'_>) -> Result<Var<'_>> {
    if tokens.shape().len() != 4 {
        return Err(Error::shape(
            "temporal_pool",
            &tokens.shape(),
            &[0, 0, 0, 0],
        ));
    }
    tokens.mean(1)
}
