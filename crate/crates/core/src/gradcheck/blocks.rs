//! Gradient checks for every composite block at a given configuration.
//!
//! Each check perturbs the block's parameters away from their initial values
//! (so zero-initialized gates and unit norms do not hide errors), then
//! compares gradients of a random weighted sum of the block's outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{probe_module as probe, GradCheckOptions, GradCheckReport};
use crate::adapter::{AvAdapter, Backbones, Encoder};
use crate::error::{Error, Result};
use crate::model::{DecoderBlock, ModelConfig, ReadoutHead};
use crate::nn::{impl_module, CrossAttention, FeatureMap, FeedForward, Module, ViTBlock};
use crate::temporal::{JointProjector, TemporalMerger};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    CrossAttention,
    FeedForward,
    ViT,
    /// One adapter block on both pathways, with the pyramids that feed it.
    Adapter,
    TemporalMerge,
    Decoder,
    Readout,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::CrossAttention,
        Block::FeedForward,
        Block::ViT,
        Block::Adapter,
        Block::TemporalMerge,
        Block::Decoder,
        Block::Readout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Block::CrossAttention => "cross_attention",
            Block::FeedForward => "feed_forward",
            Block::ViT => "vit",
            Block::Adapter => "adapter",
            Block::TemporalMerge => "temporal_merge",
            Block::Decoder => "decoder",
            Block::Readout => "readout",
        }
    }

    pub fn parse(s: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

impl core::fmt::Display for Block {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome for one block at one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: Block,
    pub seed: u64,
    pub report: GradCheckReport,
}

/// Adds zero-mean uniform noise to every trainable parameter: standard
/// deviation `1/√fan_in` for matrices and [`VECTOR_JITTER`] for vectors, so
/// attention is far from uniform and activations stay O(1).
pub fn jitter<M: Module>(module: &mut M, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    module.visit_mut(&mut |p| {
        if !p.trainable() {
            return;
        }
        let shape = p.value().shape().to_vec();
        let std = if shape.len() >= 2 {
            1.0 / libm::sqrt(shape[0] as f64)
        } else {
            VECTOR_JITTER
        };
        let half_width = std * libm::sqrt(3.0);
        for v in p.value_mut().data_mut() {
            *v += rng.random_range(-half_width..half_width);
        }
    });
}

pub const VECTOR_JITTER: f64 = 0.2;
const TOKENS_Q: usize = 4;
const TOKENS_KV: usize = 6;
const BATCH: usize = 2;

pub fn check_block(
    block: Block,
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (d, h) = (cfg.adapter.dim, cfg.adapter.heads);
    let rseed = seed ^ 0xabcd;
    let input =
        |shape: &[usize], k: u64| Tensor::randn(shape, seed.wrapping_mul(31).wrapping_add(k), 1.0);
    match block {
        Block::CrossAttention => {
            let mut m = CrossAttention::new("ca", d, h, seed)?;
            jitter(&mut m, seed);
            let xs = [
                input(&[BATCH, TOKENS_Q, d], 1)?,
                input(&[BATCH, TOKENS_KV, d], 2)?,
            ];
            probe(
                &mut m,
                &xs,
                |t, m, v| Ok(vec![m.forward(t, v[0], v[1])?]),
                rseed,
                opts,
            )
        }
        Block::FeedForward => {
            let mut m = FeedForward::new("ffn", d, 4 * d, seed)?;
            jitter(&mut m, seed);
            let xs = [input(&[BATCH, TOKENS_Q, d], 1)?];
            probe(
                &mut m,
                &xs,
                |t, m, v| Ok(vec![m.forward(t, v[0])?]),
                rseed,
                opts,
            )
        }
        Block::ViT => {
            let mut m = ViTBlock::new("vit", d, h, seed)?;
            jitter(&mut m, seed);
            let xs = [input(&[BATCH, TOKENS_KV, d], 1)?];
            probe(
                &mut m,
                &xs,
                |t, m, v| Ok(vec![m.forward(t, v[0])?]),
                rseed,
                opts,
            )
        }
        Block::Adapter => check_adapter(cfg, seed, opts),
        Block::TemporalMerge => {
            let mut m = MergeRig {
                merger: TemporalMerger::new("merge", d, h, seed)?,
                projector: JointProjector::new("joint", d, cfg.llm_dim, seed)?,
            };
            jitter(&mut m, seed);
            let frames = 3;
            let xs = [
                input(&[1, frames, TOKENS_KV, d], 1)?,
                input(&[1, frames, TOKENS_Q, d], 2)?,
            ];
            probe(
                &mut m,
                &xs,
                |t, m, v| Ok(vec![m.merger.forward(t, v[0], v[1], &m.projector)?]),
                rseed,
                opts,
            )
        }
        Block::Decoder => {
            let dl = cfg.llm_dim;
            let mut m = DecoderBlock::new("dec", dl, cfg.readout_heads, seed)?;
            jitter(&mut m, seed);
            let xs = [
                input(&[BATCH, TOKENS_Q, dl], 1)?,
                input(&[BATCH, TOKENS_KV, dl], 2)?,
            ];
            probe(
                &mut m,
                &xs,
                |t, m, v| Ok(vec![m.forward(t, v[0], Some(v[1]))?]),
                rseed,
                opts,
            )
        }
        Block::Readout => {
            let dl = cfg.llm_dim;
            let mut m = ReadoutHead::new(
                "readout",
                cfg.vocab,
                dl,
                cfg.readout_heads,
                cfg.readout_layers,
                cfg.max_text_len,
                seed,
            )?;
            jitter(&mut m, seed);
            let n = TOKENS_Q.min(cfg.max_text_len);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<Vec<usize>> = (0..BATCH)
                .map(|_| (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect())
                .collect();
            let targets: Vec<usize> = (0..BATCH * n)
                .map(|_| rng.random_range(0..cfg.vocab))
                .collect();
            let xs = [input(&[BATCH, TOKENS_KV, dl], 1)?];
            probe(
                &mut m,
                &xs,
                |t, m, v| {
                    let logits = m.forward(t, &ids, Some(v[0]))?;
                    Ok(vec![logits, logits.cross_entropy(&targets)?])
                },
                rseed,
                opts,
            )
        }
    }
}

#[derive(Debug, Clone)]
struct MergeRig {
    merger: TemporalMerger,
    projector: JointProjector,
}

impl_module!(MergeRig => merger, projector);

#[derive(Debug, Clone)]
struct AdapterRig {
    visual: Encoder,
    audio: Encoder,
    adapter: AvAdapter,
}

impl_module!(AdapterRig => visual, audio, adapter);

/// First adapter block of both pathways on a single frame. Backbones are
/// frozen (their blocks are covered by the ViT check); the pyramids and the
/// block's own layers are checked, with the fusion gates far from zero.
fn check_adapter(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let a = &cfg.adapter;
    let mut rig = AdapterRig {
        visual: Encoder::new("visual", &a.visual, a, seed)?,
        audio: Encoder::new("audio", &a.audio, a, seed)?,
        adapter: AvAdapter::new("adapter", a, seed)?,
    };
    jitter(&mut rig, seed);
    rig.visual.visit_mut(&mut |p| p.set_trainable(false));
    rig.audio.visit_mut(&mut |p| p.set_trainable(false));
    rig.adapter.visit_mut(&mut |p| {
        let later = (1..a.blocks).any(|i| p.name().contains(&format!(".block{i}.")));
        p.set_trainable(!later);
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7a);
    rig.adapter.visit_mut(&mut |p| {
        if p.name().ends_with(".beta") {
            p.value_mut()
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.random_range(0.5..1.5));
        }
    });
    let image = |spec: &crate::adapter::ModalitySpec, k: u64| {
        Tensor::randn(
            &[1, spec.channels, spec.height, spec.width],
            seed.wrapping_add(k),
            1.0,
        )
    };
    let visual = FeatureMap::from_images(&image(&a.visual, 11)?)?;
    let audio = FeatureMap::from_images(&image(&a.audio, 12)?)?;
    probe(
        &mut rig,
        &[],
        |t, m, _| {
            let bb = Backbones {
                visual: &m.visual,
                audio: &m.audio,
            };
            let s = m.adapter.init_state(t, bb, &visual, &audio)?;
            let s = m.adapter.advance_block(t, bb, s)?;
            Ok(vec![
                s.visual.global,
                s.audio.global,
                s.visual.multi_scale.tokens,
                s.audio.multi_scale.tokens,
            ])
        },
        seed ^ 0xabcd,
        opts,
    )
}

/// Seeds per block used by [`check_all`]: 110 in total.
pub fn default_seeds(block: Block) -> usize {
    match block {
        Block::Adapter => 10,
        Block::Decoder => 10,
        Block::Readout => 10,
        _ => 20,
    }
}

/// Runs `seeds(block)` checks per block, seeds `0..n`.
pub fn check_all(
    cfg: &ModelConfig,
    blocks: &[Block],
    seeds: impl Fn(Block) -> usize,
    opts: &GradCheckOptions,
) -> Result<Vec<BlockCheck>> {
    let mut out = vec![];
    for &block in blocks {
        for seed in 0..seeds(block) as u64 {
            let opts = GradCheckOptions {
                seed,
                ..opts.clone()
            };
            let report = check_block(block, cfg, seed, &opts)
                .map_err(|e| Error::Oracle(format!("{block} seed {seed}: {e}")))?;
            out.push(BlockCheck {
                block,
                seed,
                report,
            });
        }
    }
    Ok(out)
}
