use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{impl_module, Linear};
use crate::tensor::Tensor;

/// Multi-head attention with separate query and key/value inputs.
///
/// Queries come from `q_tokens: [..., L_q, D]`, keys and values from
/// `kv_tokens: [..., L_kv, D]`; batch prefixes must match (or both be empty).
/// Per head: `softmax(Q Kᵀ / √(D/h)) V`, heads concatenated, then `W_o`.
/// The key projection has no bias: it would only add a per-query constant to
/// every score, which softmax cancels.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl_module!(CrossAttention => q, k, v, o);

impl CrossAttention {
    pub fn new(name: &str, width: usize, heads: usize, seed: u64) -> Result<Self> {
        check_heads(width, heads)?;
        Ok(CrossAttention {
            q: Linear::new(&format!("{name}.q"), width, width, seed)?,
            k: Linear::without_bias(&format!("{name}.k"), width, width, seed)?,
            v: Linear::new(&format!("{name}.v"), width, width, seed)?,
            o: Linear::new(&format!("{name}.o"), width, width, seed)?,
            heads,
        })
    }

    /// All four projections set to the identity with zero bias.
    pub fn identity(name: &str, width: usize, heads: usize) -> Result<Self> {
        check_heads(width, heads)?;
        Ok(CrossAttention {
            q: Linear::identity(&format!("{name}.q"), width)?,
            k: Linear::without_bias(&format!("{name}.k"), width, width, 0)?.into_identity(),
            v: Linear::identity(&format!("{name}.v"), width)?,
            o: Linear::identity(&format!("{name}.o"), width)?,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.q.input_width()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        q_tokens: Var<'t>,
        kv_tokens: Var<'t>,
    ) -> Result<Var<'t>> {
        self.forward_masked(tape, q_tokens, kv_tokens, None)
    }

    /// Like [`forward`](Self::forward) with an additive `[L_q, L_kv]` score mask.
    pub fn forward_masked<'t>(
        &self,
        tape: &'t Tape,
        q_tokens: Var<'t>,
        kv_tokens: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let heads = self.head_outputs(tape, q_tokens, kv_tokens, mask, |w, v| w.matmul(v))?;
        let last = q_tokens.shape().len() - 1;
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, last)?
        };
        self.o.forward(tape, merged)
    }

    /// Per-head attention weights `[..., L_q, L_kv]`, for inspection.
    pub fn attention_weights<'t>(
        &self,
        tape: &'t Tape,
        q_tokens: Var<'t>,
        kv_tokens: Var<'t>,
    ) -> Result<Vec<Var<'t>>> {
        self.head_outputs(tape, q_tokens, kv_tokens, None, |w, _| Ok(w))
    }

    fn head_outputs<'t>(
        &self,
        tape: &'t Tape,
        q_tokens: Var<'t>,
        kv_tokens: Var<'t>,
        mask: Option<&Tensor>,
        finish: impl Fn(Var<'t>, Var<'t>) -> Result<Var<'t>>,
    ) -> Result<Vec<Var<'t>>> {
        let (qs, ks) = (q_tokens.shape(), kv_tokens.shape());
        let d = self.width();
        let r = qs.len();
        if r < 2 || ks.len() != r || qs[r - 1] != d || ks[r - 1] != d || qs[..r - 2] != ks[..r - 2]
        {
            return Err(Error::shape("cross_attention", &qs, &ks));
        }
        let mask = match mask {
            Some(m) if m.shape() != [qs[r - 2], ks[r - 2]] => {
                return Err(Error::shape(
                    "attention_mask",
                    m.shape(),
                    &[qs[r - 2], ks[r - 2]],
                ))
            }
            Some(m) => Some(tape.constant(m)),
            None => None,
        };
        let q = self.q.forward(tape, q_tokens)?;
        let k = self.k.forward(tape, kv_tokens)?;
        let v = self.v.forward(tape, kv_tokens)?;
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let last = r - 1;
        let mut out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    q.narrow(last, h * dh, dh)?,
                    k.narrow(last, h * dh, dh)?,
                    v.narrow(last, h * dh, dh)?,
                )
            };
            let mut scores = qh.matmul(kh.transpose()?)?.scale(scale)?;
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            out.push(finish(scores.softmax(last)?, vh)?);
        }
        Ok(out)
    }
}

fn check_heads(width: usize, heads: usize) -> Result<()> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Additive causal mask: 0 on and below the diagonal, a large negative above.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = alloc::vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e9;
        }
    }
    Tensor::new(&[len, len], data).expect("finite mask")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Module;

    #[test]
    fn single_kv_token_is_copied_to_every_query() {
        let attn = CrossAttention::identity("a", 4, 1).unwrap();
        let tape = Tape::new();
        let q = tape.constant(&Tensor::randn(&[3, 4], 1, 1.0).unwrap());
        let kv_t = Tensor::new(&[1, 4], alloc::vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let out = attn.forward(&tape, q, tape.constant(&kv_t)).unwrap();
        assert_eq!(out.shape(), alloc::vec![3, 4]);
        for row in out.to_vec().chunks(4) {
            assert_eq!(row, kv_t.data());
        }
    }

    #[test]
    fn duplicated_kv_matches_single() {
        let attn = CrossAttention::new("a", 4, 2, 3).unwrap();
        let tape = Tape::new();
        let q = tape.constant(&Tensor::randn(&[2, 4], 1, 1.0).unwrap());
        let one = Tensor::randn(&[1, 4], 2, 1.0).unwrap();
        let two = Tensor::stack(&[one.index0(0).unwrap(), one.index0(0).unwrap()]).unwrap();
        let a = attn.forward(&tape, q, tape.constant(&one)).unwrap().value();
        let b = attn.forward(&tape, q, tape.constant(&two)).unwrap().value();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let attn = CrossAttention::new("a", 4, 2, 3).unwrap();
        let tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(&[2, 4]).unwrap());
        let kv = tape.constant(&Tensor::zeros(&[2, 6]).unwrap());
        assert!(matches!(
            attn.forward(&tape, q, kv),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(
            CrossAttention::new("a", 6, 4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_value_path_gives_zero_output() {
        let mut attn = CrossAttention::new("a", 4, 2, 3).unwrap();
        attn.v.fill(0.0);
        attn.o.bias.fill(0.0);
        let tape = Tape::new();
        let q = tape.constant(&Tensor::randn(&[2, 4], 1, 1.0).unwrap());
        let kv = tape.constant(&Tensor::randn(&[5, 4], 2, 1.0).unwrap());
        assert!(attn
            .forward(&tape, q, kv)
            .unwrap()
            .to_vec()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(3);
        assert_eq!(m.at(&[0, 1]), -1e9);
        assert_eq!(m.at(&[2, 1]), 0.0);
    }
}
