//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends one node holding its output value and enough context to
//! run its vector-Jacobian product. Nodes are created in topological order,
//! so `backward` is a single reverse sweep over node ids.
//!
//! Broadcasting is limited to a right-hand operand whose shape is a suffix of
//! the left-hand shape (bias vectors, positional tables, attention masks).
//! All reductions sum left to right in index order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{axis_split, check_shape, numel, Tensor};

type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, f64),
    MatMul {
        a: Id,
        b: Id,
        shared_b: bool,
    },
    Transpose(Id),
    Softmax {
        x: Id,
        axis: usize,
    },
    Gelu(Id),
    LayerNorm {
        x: Id,
        gamma: Id,
        beta: Id,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        x: Id,
        axis: usize,
    },
    Mean {
        x: Id,
        axis: usize,
    },
    SumAll(Id),
    Reshape(Id),
    Narrow {
        x: Id,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Id>,
        axis: usize,
    },
    Gather {
        table: Id,
        ids: Vec<usize>,
    },
    Im2Col(Id, Im2Col),
    CrossEntropy {
        logits: Id,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Softmax { .. } => "softmax",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll(_) => "sum_all",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Im2Col(..) => "im2col",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Geometry of a patch-extraction (im2col) over token-major feature maps.
///
/// Input rows are pixels in row-major `(y, x)` order with `channels` columns;
/// output rows are output pixels with `kernel * kernel * channels` columns
/// ordered `(ky, kx, c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2Col {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2Col {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Calls `f(out_row, out_col, in_row)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let cols = self.kernel * self.kernel * self.channels;
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = oy * wo + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let irow = iy as usize * self.width + ix as usize;
                        let col = (ky * self.kernel + kx) * self.channels;
                        debug_assert!(col < cols);
                        f(orow, col, irow);
                    }
                }
            }
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable computation for one forward/backward pass.
///
/// A tape is single-threaded and meant to be dropped after the step it served.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    params: RefCell<BTreeMap<String, Id>>,
    check_finite: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// New tape; non-finite outputs are flagged after every op in debug builds.
    pub fn new() -> Self {
        Tape::with_finite_checks(cfg!(debug_assertions))
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            params: RefCell::new(BTreeMap::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies `t` onto the tape; gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Copies `t` onto the tape without gradient tracking.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Binds a named parameter. Repeated binds of the same name share one leaf,
    /// so gradients from every use accumulate in one place.
    pub fn param(&self, p: &Param) -> Result<Var<'_>> {
        if let Some(&id) = self.params.borrow().get(p.name()) {
            let shape = &self.nodes.borrow()[id].shape;
            if shape.as_slice() != p.value().shape() {
                return Err(Error::shape("param", shape, p.value().shape()));
            }
            return Ok(Var { tape: self, id });
        }
        let v = self.leaf(p.value());
        self.params.borrow_mut().insert(p.name().into(), v.id);
        Ok(v)
    }

    /// Gradient for a parameter bound with [`Tape::param`], after `backward`.
    pub fn param_grad(&self, name: &str) -> Option<Tensor> {
        let id = *self.params.borrow().get(name)?;
        Var { tape: self, id }.grad()
    }

    /// Names of every bound parameter, in sorted order.
    pub fn bound_params(&self) -> Vec<String> {
        self.params.borrow().keys().cloned().collect()
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat needs at least one input".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for p in parts {
            self.same_tape(p)?;
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        {
            let nodes = self.nodes.borrow();
            for o in 0..outer {
                for p in parts {
                    let n = &nodes[p.id];
                    let chunk = n.shape[axis] * inner;
                    out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                }
            }
        }
        let ids: Vec<Id> = parts.iter().map(|p| p.id).collect();
        self.push(shape, out, Op::Concat { parts: ids, axis })
    }

    /// Row lookup: `ids` index rows of a `[rows, width]` table; the result has
    /// shape `prefix ++ [width]` where `prefix` multiplies out to `ids.len()`.
    pub fn gather<'t>(
        &'t self,
        table: Var<'t>,
        ids: &[usize],
        prefix: &[usize],
    ) -> Result<Var<'t>> {
        self.same_tape(&table)?;
        let ts = table.shape();
        if ts.len() != 2 || numel(prefix) != ids.len() || prefix.is_empty() {
            return Err(Error::shape("gather", &ts, prefix));
        }
        let (rows, width) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {rows} rows"
            )));
        }
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            let mut out = Vec::with_capacity(ids.len() * width);
            for &i in ids {
                out.extend_from_slice(&t[i * width..(i + 1) * width]);
            }
            out
        };
        let mut shape = prefix.to_vec();
        shape.push(width);
        self.push(
            shape,
            out,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
        )
    }

    fn same_tape(&self, v: &Var<'_>) -> Result<()> {
        if core::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::Contract(
                "variables belong to different tapes".into(),
            ))
        }
    }

    fn push_unchecked(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'_>> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients for every node
    /// that requires one. Replaces gradients from any earlier sweep.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.same_tape(&loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            } else if grads[id].is_none() && matches!(node.op, Op::Leaf) {
                // Tracked leaf the loss does not depend on.
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn inputs(op: &Op) -> Vec<Id> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Transpose(x)
        | Op::Softmax { x, .. }
        | Op::Gelu(x)
        | Op::Sum { x, .. }
        | Op::Mean { x, .. }
        | Op::SumAll(x)
        | Op::Reshape(x)
        | Op::Narrow { x, .. }
        | Op::Im2Col(x, _) => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Gather { table, .. } => vec![*table],
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Adds into the gradient buffer of `id`, creating it on first use.
fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: Id, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, |buf| {
                for (d, &gi) in buf.iter_mut().zip(g) {
                    *d += gi;
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for chunk in g.chunks_exact(buf.len()) {
                    for (d, &gi) in buf.iter_mut().zip(chunk) {
                        *d += sign * gi;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let m = bv.len();
            accumulate(nodes, grads, *a, |buf| {
                for (dc, gc) in buf.chunks_exact_mut(m).zip(g.chunks_exact(m)) {
                    for ((d, &gi), &b) in dc.iter_mut().zip(gc).zip(bv) {
                        *d += gi * b;
                    }
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for (gc, ac) in g.chunks_exact(m).zip(av.chunks_exact(m)) {
                    for ((d, &gi), &a) in buf.iter_mut().zip(gc).zip(ac) {
                        *d += gi * a;
                    }
                }
            });
        }
        Op::Scale(x, s) => accumulate(nodes, grads, *x, |buf| {
            for (d, &gi) in buf.iter_mut().zip(g) {
                *d += gi * s;
            }
        }),
        Op::MatMul { a, b, shared_b } => {
            let (an, bn) = (&nodes[*a], &nodes[*b]);
            let r = an.shape.len();
            let (m, k) = (an.shape[r - 2], an.shape[r - 1]);
            let n = bn.shape[bn.shape.len() - 1];
            let batch = an.value.len() / (m * k);
            let (batch, m) = if *shared_b {
                (1, batch * m)
            } else {
                (batch, m)
            };
            accumulate(nodes, grads, *a, |buf| {
                for bi in 0..batch {
                    let boff = if *shared_b { 0 } else { bi * k * n };
                    matmul_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bn.value[boff..boff + k * n],
                        &mut buf[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            });
            accumulate(nodes, grads, *b, |buf| {
                for bi in 0..batch {
                    let boff = if *shared_b { 0 } else { bi * k * n };
                    matmul_tn(
                        &an.value[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut buf[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
            });
        }
        Op::Transpose(x) => {
            let s = &nodes[*x].shape;
            let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
            accumulate(nodes, grads, *x, |buf| {
                let batch = buf.len() / (rows * cols);
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            buf[off + i * cols + j] += g[off + j * rows + i];
                        }
                    }
                }
            });
        }
        Op::Softmax { x, axis } => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(&node.shape, *axis);
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = &nodes[*x].value;
            accumulate(nodes, grads, *x, |buf| {
                for (i, d) in buf.iter_mut().enumerate() {
                    *d += g[i] * gelu_grad(xv[i]);
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let width = *node.shape.last().unwrap();
            let rows = xhat.len() / width;
            let gm = &nodes[*gamma].value;
            accumulate(nodes, grads, *x, |buf| {
                let mut dxhat = vec![0.0; width];
                for r in 0..rows {
                    let row = r * width..(r + 1) * width;
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for (j, d) in dxhat.iter_mut().enumerate() {
                        *d = g[row.start + j] * gm[j];
                        s1 += *d;
                        s2 += *d * xhat[row.start + j];
                    }
                    let inv_n = 1.0 / width as f64;
                    for j in 0..width {
                        let xh = xhat[row.start + j];
                        buf[row.start + j] += rstd[r] * (dxhat[j] - inv_n * s1 - xh * inv_n * s2);
                    }
                }
            });
            accumulate(nodes, grads, *gamma, |buf| {
                for r in 0..rows {
                    for j in 0..width {
                        buf[j] += g[r * width + j] * xhat[r * width + j];
                    }
                }
            });
            accumulate(nodes, grads, *beta, |buf| {
                for r in 0..rows {
                    for j in 0..width {
                        buf[j] += g[r * width + j];
                    }
                }
            });
        }
        Op::Sum { x, axis } | Op::Mean { x, axis } => {
            let s = &nodes[*x].shape;
            let (outer, n, inner) = axis_split(s, *axis);
            let w = if matches!(node.op, Op::Mean { .. }) {
                1.0 / n as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            buf[o * n * inner + j * inner + i] += g[o * inner + i] * w;
                        }
                    }
                }
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, |buf| {
            for d in buf.iter_mut() {
                *d += g[0];
            }
        }),
        Op::Reshape(x) => accumulate(nodes, grads, *x, |buf| {
            for (d, &gi) in buf.iter_mut().zip(g) {
                *d += gi;
            }
        }),
        Op::Narrow { x, axis, start } => {
            let s = &nodes[*x].shape;
            let (outer, n, inner) = axis_split(s, *axis);
            let len = node.shape[*axis];
            accumulate(nodes, grads, *x, |buf| {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut buf[(o * n + start) * inner..(o * n + start + len) * inner];
                    for (d, &gi) in dst.iter_mut().zip(src) {
                        *d += gi;
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_split(&node.shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].shape[*axis];
                accumulate(nodes, grads, p, |buf| {
                    for o in 0..outer {
                        let src =
                            &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut buf[o * len * inner..(o + 1) * len * inner];
                        for (d, &gi) in dst.iter_mut().zip(src) {
                            *d += gi;
                        }
                    }
                });
                offset += len;
            }
        }
        Op::Gather { table, ids } => {
            let width = nodes[*table].shape[1];
            accumulate(nodes, grads, *table, |buf| {
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..width {
                        buf[i * width + j] += g[r * width + j];
                    }
                }
            });
        }
        Op::Im2Col(x, geo) => {
            let cols = geo.kernel * geo.kernel * geo.channels;
            let in_len = geo.height * geo.width * geo.channels;
            let out_len = geo.out_height() * geo.out_width() * cols;
            let c = geo.channels;
            accumulate(nodes, grads, *x, |buf| {
                let batch = buf.len() / in_len;
                for bi in 0..batch {
                    let gin = &g[bi * out_len..(bi + 1) * out_len];
                    let dst = &mut buf[bi * in_len..(bi + 1) * in_len];
                    geo.for_each_tap(|orow, col, irow| {
                        for ch in 0..c {
                            dst[irow * c + ch] += gin[orow * cols + col + ch];
                        }
                    });
                }
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let v = *nodes[*logits].shape.last().unwrap();
            let scale = g[0] / targets.len() as f64;
            accumulate(nodes, grads, *logits, |buf| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        buf[r * v + j] += (probs[r * v + j] - onehot) * scale;
                    }
                }
            });
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
///
/// Works on 4×8 output tiles held in registers across the whole `k` loop.
/// Every output element still accumulates over `p` in order, so the result
/// does not depend on the tiling.
fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let (mt, nt) = (m - m % MR, n - n % NR);
    for i in (0..mt).step_by(MR) {
        for j in (0..nt).step_by(NR) {
            let mut acc = [[0.0; NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i + r) * n + j..(i + r) * n + j + NR]);
            }
            for p in 0..k {
                let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * k + p];
                    for c in 0..NR {
                        row[c] += av * bv[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
        }
    }
    // Ragged edges: leftover columns of the tiled rows, then leftover rows.
    if nt < n {
        for i in 0..mt {
            for p in 0..k {
                let av = a[i * k + p];
                for j in nt..n {
                    out[i * n + j] += av * b[p * n + j];
                }
            }
        }
    }
    for i in mt..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_nn(g, &bt, out, m, n, k);
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut at = vec![0.0; k * m];
    for i in 0..m {
        for p in 0..k {
            at[p * m + i] = a[i * k + p];
        }
    }
    matmul_nn(&at, g, out, k, m, n);
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Snapshot of the forward value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are finite-checked")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    /// Gradient from the last `backward`; `None` for untracked nodes.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        let shape = self.shape();
        let mut t = Tensor::new(&shape, g.clone()).ok()?;
        t.set_requires_grad(false);
        Some(t)
    }

    fn unary(self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var<'t>> {
        self.tape.push(shape, value, op)
    }

    fn binary_elementwise(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.tape.same_tape(&rhs)?;
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
        if !is_suffix(&a.shape, &b.shape) {
            return Err(Error::shape(name, &a.shape, &b.shape));
        }
        let m = b.value.len();
        let mut out = Vec::with_capacity(a.value.len());
        for chunk in a.value.chunks_exact(m) {
            out.extend(chunk.iter().zip(&b.value).map(|(&x, &y)| f(x, y)));
        }
        Ok((a.shape.clone(), out))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = self.binary_elementwise(rhs, "add", |a, b| a + b)?;
        self.unary(shape, v, Op::Add(self.id, rhs.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = self.binary_elementwise(rhs, "sub", |a, b| a - b)?;
        self.unary(shape, v, Op::Sub(self.id, rhs.id))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = self.binary_elementwise(rhs, "mul", |a, b| a * b)?;
        self.unary(shape, v, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let (shape, v) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|x| x * s).collect())
        };
        self.unary(shape, v, Op::Scale(self.id, s))
    }

    /// `[..., m, k] · [k, n]` (shared right operand) or
    /// `[..., m, k] · [..., k, n]` with identical batch prefixes.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.same_tape(&rhs)?;
        let (shape, out, shared_b) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            let (ra, rb) = (a.shape.len(), b.shape.len());
            if ra < 2 || rb < 2 || a.shape[ra - 1] != b.shape[rb - 2] {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let shared_b = rb == 2;
            if !shared_b && a.shape[..ra - 2] != b.shape[..rb - 2] {
                return Err(Error::shape("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[ra - 2], a.shape[ra - 1], b.shape[rb - 1]);
            let batch = a.value.len() / (m * k);
            let mut out = vec![0.0; batch * m * n];
            // A shared right operand lets the whole batch run as one tall product.
            let (batch, m) = if shared_b { (1, batch * m) } else { (batch, m) };
            for bi in 0..batch {
                let boff = if shared_b { 0 } else { bi * k * n };
                matmul_nn(
                    &a.value[bi * m * k..(bi + 1) * m * k],
                    &b.value[boff..boff + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = a.shape[..ra - 1].to_vec();
            shape.push(n);
            (shape, out, shared_b)
        };
        self.unary(
            shape,
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                shared_b,
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, out) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let r = n.shape.len();
            if r < 2 {
                return Err(Error::shape("transpose", &n.shape, &[]));
            }
            let (rows, cols) = (n.shape[r - 2], n.shape[r - 1]);
            let mut out = vec![0.0; n.value.len()];
            for bi in 0..n.value.len() / (rows * cols) {
                let off = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[off + j * rows + i] = n.value[off + i * cols + j];
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.swap(r - 2, r - 1);
            (shape, out)
        };
        self.unary(shape, out, Op::Transpose(self.id))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, &shape, &[axis]));
        }
        Ok(shape)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "softmax")?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let max = (0..n).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for j in 0..n {
                        let e = libm::exp(x[at(j)] - max);
                        out[at(j)] = e;
                        sum += e;
                    }
                    for j in 0..n {
                        out[at(j)] /= sum;
                    }
                }
            }
            out
        };
        self.unary(shape, out, Op::Softmax { x: self.id, axis })
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(self) -> Result<Var<'t>> {
        let (shape, v) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| gelu(x)).collect())
        };
        self.unary(shape, v, Op::Gelu(self.id))
    }

    /// Normalizes over the last axis, then applies per-channel `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.tape.same_tape(&gamma)?;
        self.tape.same_tape(&beta)?;
        let (shape, out, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gm, bt) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let width = *x.shape.last().unwrap();
            if gm.shape != [width] || bt.shape != [width] {
                return Err(Error::shape("layer_norm", &x.shape, &gm.shape));
            }
            let rows = x.value.len() / width;
            let mut out = vec![0.0; x.value.len()];
            let mut xhat = vec![0.0; x.value.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &x.value[r * width..(r + 1) * width];
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let rs = 1.0 / libm::sqrt(var + eps);
                rstd[r] = rs;
                for j in 0..width {
                    let h = (row[j] - mean) * rs;
                    xhat[r * width + j] = h;
                    out[r * width + j] = h * gm.value[j] + bt.value[j];
                }
            }
            (x.shape.clone(), out, xhat, rstd)
        };
        self.unary(
            shape,
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        )
    }

    fn reduce(self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, if mean { "mean" } else { "sum" })?;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += x[o * n * inner + j * inner + i];
                    }
                    out[o * inner + i] = if mean { acc / n as f64 } else { acc };
                }
            }
            out
        };
        let mut oshape = shape;
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let op = if mean {
            Op::Mean { x: self.id, axis }
        } else {
            Op::Sum { x: self.id, axis }
        };
        self.unary(oshape, out, op)
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    /// Averages out `axis` (the axis is removed).
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.iter().sum::<f64>()
        };
        self.unary(vec![1], vec![v], Op::SumAll(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        check_shape(shape)?;
        let (old, v) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].shape.clone(), nodes[self.id].value.clone())
        };
        if numel(shape) != v.len() {
            return Err(Error::shape("reshape", &old, shape));
        }
        self.unary(shape.to_vec(), v, Op::Reshape(self.id))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (outer, n, inner) = axis_split(&shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&x[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            out
        };
        let mut oshape = shape;
        oshape[axis] = len;
        self.unary(
            oshape,
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        )
    }

    /// Patch extraction over a token-major map `[..., height·width, channels]`.
    pub fn im2col(self, geo: Im2Col) -> Result<Var<'t>> {
        let shape = self.shape();
        let r = shape.len();
        let ok = r >= 2
            && shape[r - 2] == geo.height * geo.width
            && shape[r - 1] == geo.channels
            && geo.kernel >= 1
            && geo.stride >= 1
            && geo.height + 2 * geo.pad >= geo.kernel
            && geo.width + 2 * geo.pad >= geo.kernel;
        if !ok {
            return Err(Error::shape(
                "im2col",
                &shape,
                &[geo.height, geo.width, geo.channels],
            ));
        }
        let cols = geo.kernel * geo.kernel * geo.channels;
        let rows_out = geo.out_height() * geo.out_width();
        let in_len = geo.height * geo.width * geo.channels;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let batch = x.len() / in_len;
            let mut out = vec![0.0; batch * rows_out * cols];
            let c = geo.channels;
            for bi in 0..batch {
                let src = &x[bi * in_len..(bi + 1) * in_len];
                let dst = &mut out[bi * rows_out * cols..(bi + 1) * rows_out * cols];
                geo.for_each_tap(|orow, col, irow| {
                    dst[orow * cols + col..orow * cols + col + c]
                        .copy_from_slice(&src[irow * c..(irow + 1) * c]);
                });
            }
            out
        };
        let mut oshape = shape[..r - 2].to_vec();
        oshape.push(rows_out);
        oshape.push(cols);
        self.unary(oshape, out, Op::Im2Col(self.id, geo))
    }

    /// Mean negative log-likelihood of `targets` under softmax of the last axis.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let v = *shape.last().unwrap();
        let rows = numel(&shape) / v;
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!(
                "target {bad} outside vocabulary of {v}"
            )));
        }
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut probs = vec![0.0; x.len()];
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let row = &x[r * v..(r + 1) * v];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (j, &l) in row.iter().enumerate() {
                    let e = libm::exp(l - max);
                    probs[r * v + j] = e;
                    sum += e;
                }
                for p in &mut probs[r * v..(r + 1) * v] {
                    *p /= sum;
                }
                total += libm::log(sum) + max - row[t];
            }
            (total / rows as f64, probs)
        };
        self.unary(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::new();
        let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(&t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]));
        assert_eq!(i.matmul(x).unwrap().to_vec(), vec![3.0, -1.0, 0.5, 2.0]);
    }

    #[test]
    fn one_by_one_matmul() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(b).unwrap().to_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        match a.matmul(b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_known_values() {
        let tape = Tape::new();
        let s = tape
            .constant(&t(&[2], &[0.0, 0.0]))
            .softmax(0)
            .unwrap()
            .to_vec();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = tape
            .constant(&t(&[2], &[libm::log(2.0), 0.0]))
            .softmax(0)
            .unwrap()
            .to_vec();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15 && (s[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = tape
            .constant(&t(&[2], &[1000.0, 0.0]))
            .softmax(0)
            .unwrap()
            .to_vec();
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(&Tensor::ones(&[4]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[4]).unwrap());
        assert_eq!(x.layer_norm(g, b, 1e-5).unwrap().to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn mean_of_identical_frames() {
        let tape = Tape::new();
        let frame = [1.0, -2.0, 0.25];
        let stacked: Vec<f64> = frame.iter().copied().cycle().take(9).collect();
        let x = tape.constant(&t(&[3, 3], &stacked));
        assert_eq!(x.mean(0).unwrap().to_vec(), frame.to_vec());
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1], &[3.0]).with_requires_grad());
        let loss = x.mul(x).unwrap().sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn untracked_leaf_has_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let w = tape.leaf(&t(&[2], &[1.0, 1.0]).with_requires_grad());
        let loss = x.mul(w).unwrap().sum_all().unwrap();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_checks_flag_overflow() {
        let tape = Tape::with_finite_checks(true);
        let x = tape.constant(&t(&[1], &[1e200]));
        assert!(matches!(x.mul(x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn cross_entropy_uniform_is_log_vocab() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 64]).unwrap());
        let l = x.cross_entropy(&[0, 5, 63]).unwrap().item();
        assert!((l - libm::log(64.0)).abs() < 1e-12);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]));
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 3).unwrap();
        assert_eq!(b.to_vec(), vec![1., 2., 3., 5., 6., 7.]);
        assert_eq!(tape.concat(&[a, b], 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn im2col_matches_manual_patches() {
        // 4x4 single-channel map, 2x2 non-overlapping patches.
        let tape = Tape::new();
        let x = tape.constant(&t(&[16, 1], &(0..16).map(f64::from).collect::<Vec<_>>()));
        let geo = Im2Col {
            height: 4,
            width: 4,
            channels: 1,
            kernel: 2,
            stride: 2,
            pad: 0,
        };
        let p = x.im2col(geo).unwrap();
        assert_eq!(p.shape(), vec![4, 4]);
        assert_eq!(&p.to_vec()[..4], &[0., 1., 4., 5.]);
        assert_eq!(&p.to_vec()[12..], &[10., 11., 14., 15.]);
    }

    #[test]
    fn broadcasting_is_suffix_only() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 3]).unwrap());
        let bias = tape.constant(&Tensor::ones(&[3]).unwrap());
        assert_eq!(x.add(bias).unwrap().to_vec(), vec![1.0; 6]);
        let wrong = tape.constant(&Tensor::ones(&[2]).unwrap());
        assert!(x.add(wrong).is_err());
    }
}
