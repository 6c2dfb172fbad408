use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, impl_module, CrossAttention, FeedForward, LayerNorm, Linear, Param};
use crate::tensor::INIT_STD;

/// Causal self-attention, cross-attention over AV tokens, then FFN; all pre-norm.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: CrossAttention,
    pub norm2: LayerNorm,
    pub cross_attn: CrossAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl_module!(DecoderBlock => norm1, self_attn, norm2, cross_attn, norm3, ffn);

impl DecoderBlock {
    pub fn new(name: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        Ok(DecoderBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), dim)?,
            self_attn: CrossAttention::new(&format!("{name}.self_attn"), dim, heads, seed)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), dim)?,
            cross_attn: CrossAttention::new(&format!("{name}.cross_attn"), dim, heads, seed)?,
            norm3: LayerNorm::new(&format!("{name}.norm3"), dim)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, 4 * dim, seed)?,
        })
    }

    /// `x: [B, n, D]`; `av: [B, L, D]` or `None` to skip cross-attention.
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, av: Option<Var<'t>>) -> Result<Var<'t>> {
        let len = x.shape()[x.shape().len() - 2];
        let h = self.norm1.forward(tape, x)?;
        let mut x = x.add(
            self.self_attn
                .forward_masked(tape, h, h, Some(&causal_mask(len)))?,
        )?;
        if let Some(av) = av {
            let h = self.norm2.forward(tape, x)?;
            x = x.add(self.cross_attn.forward(tape, h, av)?)?;
        }
        let h = self.norm3.forward(tape, x)?;
        x.add(self.ffn.forward(tape, h)?)
    }
}

/// Small autoregressive decoder standing in for the language model.
#[derive(Debug, Clone)]
pub struct ReadoutHead {
    pub embed: Param,
    pub pos: Param,
    pub blocks: Vec<DecoderBlock>,
    pub norm: LayerNorm,
    pub logits: Linear,
}

impl_module!(ReadoutHead => embed, pos, blocks, norm, logits);

impl ReadoutHead {
    pub fn new(
        name: &str,
        vocab: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(ReadoutHead {
            embed: Param::normal(format!("{name}.embed"), &[vocab, dim], seed, INIT_STD)?,
            pos: Param::normal(format!("{name}.pos"), &[max_len, dim], seed, INIT_STD)?,
            blocks: (0..layers)
                .map(|i| DecoderBlock::new(&format!("{name}.block{i}"), dim, heads, seed))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&format!("{name}.norm"), dim)?,
            logits: Linear::new(&format!("{name}.logits"), dim, vocab, seed)?,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embed.value().shape()[0]
    }

    pub fn max_len(&self) -> usize {
        self.pos.value().shape()[0]
    }

    /// Logits `[B, n, vocab]` for token ids `[B][n]`. With `av = None` the
    /// cross-attention sublayers are skipped entirely (text-only forward).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        ids: &[Vec<usize>],
        av: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let b = ids.len();
        let n = ids.first().map_or(0, Vec::len);
        if b == 0 || n == 0 || ids.iter().any(|r| r.len() != n) {
            return Err(Error::Config(
                "token batch must be a non-empty rectangle".into(),
            ));
        }
        if n > self.max_len() {
            return Err(Error::Config(format!(
                "sequence length {n} exceeds {}",
                self.max_len()
            )));
        }
        if let Some(av) = av {
            let s = av.shape();
            if s.len() != 3 || s[0] != b {
                return Err(Error::Alignment(format!(
                    "AV tokens {s:?} do not match a batch of {b}"
                )));
            }
        }
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let tok = tape.gather(tape.param(&self.embed)?, &flat, &[b, n])?;
        let pos = tape.param(&self.pos)?.narrow(0, 0, n)?;
        let mut x = tok.add(pos)?;
        for block in &self.blocks {
            x = block.forward(tape, x, av)?;
        }
        let x = self.norm.forward(tape, x)?;
        self.logits.forward(tape, x)
    }
}
