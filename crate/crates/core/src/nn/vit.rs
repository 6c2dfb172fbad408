use alloc::format;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{impl_module, CrossAttention, FeedForward, LayerNorm};

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct ViTBlock {
    pub norm1: LayerNorm,
    pub attn: CrossAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl_module!(ViTBlock => norm1, attn, norm2, ffn);

impl ViTBlock {
    pub fn new(name: &str, width: usize, heads: usize, seed: u64) -> Result<Self> {
        Ok(ViTBlock {
            norm1: LayerNorm::new(&format!("{name}.norm1"), width)?,
            attn: CrossAttention::new(&format!("{name}.attn"), width, heads, seed)?,
            norm2: LayerNorm::new(&format!("{name}.norm2"), width)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), width, 4 * width, seed)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, tokens: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm1.forward(tape, tokens)?;
        let x = tokens.add(self.attn.forward(tape, h, h)?)?;
        let h = self.norm2.forward(tape, x)?;
        x.add(self.ffn.forward(tape, h)?)
    }
}
