//! Audio-visual interleaved merging.
//!
//! Frame `t` of a sample forms one AV group. Within a group, each modality
//! attends to the other using the pre-update tokens of both:
//! `V_temp = CrossAttn(A, V, V)` and `A_temp = CrossAttn(V, A, A)`.
//! Each contextualized set is mean-pooled to a single vector, passed through
//! the shared joint projector, and emitted as `[v_1, a_1, …, v_T, a_T]`.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{impl_module, CrossAttention, Linear};

/// One frame's visual and audio tokens, `[B, L, D]` each.
#[derive(Debug, Clone, Copy)]
pub struct AvGroup<'t> {
    pub frame: usize,
    pub visual: Var<'t>,
    pub audio: Var<'t>,
    /// Audio-queried visual context, `[B, L_a, D]`.
    pub visual_ctx: Option<Var<'t>>,
    /// Visual-queried audio context, `[B, L_v, D]`.
    pub audio_ctx: Option<Var<'t>>,
}

/// Two-layer GELU MLP `D → D_llm → D_llm`, shared by both modalities.
#[derive(Debug, Clone)]
pub struct JointProjector {
    pub fc1: Linear,
    pub fc2: Linear,
    bypass: bool,
}

impl_module!(JointProjector => fc1, fc2);

impl JointProjector {
    pub fn new(name: &str, dim: usize, llm_dim: usize, seed: u64) -> Result<Self> {
        Ok(JointProjector {
            fc1: Linear::new(&format!("{name}.fc1"), dim, llm_dim, seed)?,
            fc2: Linear::new(&format!("{name}.fc2"), llm_dim, llm_dim, seed)?,
            bypass: false,
        })
    }

    /// Passes tokens through unchanged; output width is then `D`.
    pub fn set_bypass(&mut self, on: bool) {
        self.bypass = on;
    }

    pub fn output_width(&self) -> usize {
        if self.bypass {
            self.fc1.input_width()
        } else {
            self.fc2.output_width()
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        if self.bypass {
            return Ok(x);
        }
        let h = self.fc1.forward(tape, x)?.gelu()?;
        self.fc2.forward(tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct TemporalMerger {
    /// Query audio, key/value visual.
    pub visual_ctx: CrossAttention,
    /// Query visual, key/value audio.
    pub audio_ctx: CrossAttention,
}

impl_module!(TemporalMerger => visual_ctx, audio_ctx);

impl TemporalMerger {
    pub fn new(name: &str, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        Ok(TemporalMerger {
            visual_ctx: CrossAttention::new(&format!("{name}.visual_ctx"), dim, heads, seed)?,
            audio_ctx: CrossAttention::new(&format!("{name}.audio_ctx"), dim, heads, seed)?,
        })
    }

    /// Bidirectional contextual attention over one group.
    pub fn bidir_context<'t>(&self, tape: &'t Tape, group: AvGroup<'t>) -> Result<AvGroup<'t>> {
        let (v, a) = (group.visual, group.audio);
        Ok(AvGroup {
            visual_ctx: Some(self.visual_ctx.forward(tape, a, v)?),
            audio_ctx: Some(self.audio_ctx.forward(tape, v, a)?),
            ..group
        })
    }

    /// The whole merge for `[B, T, L_v, D]` / `[B, T, L_a, D]` inputs with all
    /// frames batched together. Equivalent to [`build_groups`], then
    /// [`bidir_context`](Self::bidir_context) per group, then
    /// [`condense_and_project`].
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        visual: Var<'t>,
        audio: Var<'t>,
        proj: &JointProjector,
    ) -> Result<Var<'t>> {
        let (b, t) = check_pair(&visual, &audio)?;
        let (vs, as_) = (visual.shape(), audio.shape());
        let v = visual.reshape(&[b * t, vs[2], vs[3]])?;
        let a = audio.reshape(&[b * t, as_[2], as_[3]])?;
        let v_ctx = self.visual_ctx.forward(tape, a, v)?;
        let a_ctx = self.audio_ctx.forward(tape, v, a)?;
        let v_tok = proj.forward(tape, v_ctx.mean(1)?)?;
        let a_tok = proj.forward(tape, a_ctx.mean(1)?)?;
        let w = proj.output_width();
        let pair = tape.concat(
            &[
                v_tok.reshape(&[b * t, 1, w])?,
                a_tok.reshape(&[b * t, 1, w])?,
            ],
            1,
        )?;
        pair.reshape(&[b, 2 * t, w])
    }
}

fn check_pair(visual: &Var<'_>, audio: &Var<'_>) -> Result<(usize, usize)> {
    let (vs, as_) = (visual.shape(), audio.shape());
    if vs.len() != 4 || as_.len() != 4 || vs[3] != as_[3] {
        return Err(Error::shape("temporal_merge", &vs, &as_));
    }
    if vs[..2] != as_[..2] {
        return Err(Error::Alignment(format!(
            "visual is {}x{} (batch x frames) but audio is {}x{}",
            vs[0], vs[1], as_[0], as_[1]
        )));
    }
    Ok((vs[0], vs[1]))
}

/// Splits `[B, T, L, D]` streams into `T` frame-ordered groups.
pub fn build_groups<'t>(visual: Var<'t>, audio: Var<'t>) -> Result<Vec<AvGroup<'t>>> {
    let (b, t) = check_pair(&visual, &audio)?;
    let (vs, as_) = (visual.shape(), audio.shape());
    (0..t)
        .map(|frame| {
            Ok(AvGroup {
                frame,
                visual: visual.narrow(1, frame, 1)?.reshape(&[b, vs[2], vs[3]])?,
                audio: audio.narrow(1, frame, 1)?.reshape(&[b, as_[2], as_[3]])?,
                visual_ctx: None,
                audio_ctx: None,
            })
        })
        .collect()
}

/// Mean-pools each group's contextualized tokens, projects them, and emits
/// `[B, 2T, D_llm]` in `v_1, a_1, v_2, a_2, …` order.
pub fn condense_and_project<'t>(
    tape: &'t Tape,
    groups: &[AvGroup<'t>],
    proj: &JointProjector,
) -> Result<Var<'t>> {
    let w = proj.output_width();
    let mut tokens = Vec::with_capacity(2 * groups.len());
    for g in groups {
        let missing = || Error::Contract(format!("group {} has not been contextualized", g.frame));
        let v = g.visual_ctx.ok_or_else(missing)?;
        let a = g.audio_ctx.ok_or_else(missing)?;
        let b = v.shape()[0];
        tokens.push(proj.forward(tape, v.mean(1)?)?.reshape(&[b, 1, w])?);
        tokens.push(proj.forward(tape, a.mean(1)?)?.reshape(&[b, 1, w])?);
    }
    if tokens.is_empty() {
        return Err(Error::Contract("no groups to condense".into()));
    }
    tape.concat(&tokens, 1)
}
