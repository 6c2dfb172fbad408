//! Explicit-loop reference implementations, written independently of the
//! tape. Matrices are `Vec` of rows.
#![allow(dead_code)]

use dolphin_core::nn::{CrossAttention, FeedForward, LayerNorm, Linear, ViTBlock};
use dolphin_core::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    let w = *t.shape().last().unwrap();
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i][p] * b[p][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn transpose(a: &Rows) -> Rows {
    (0..a[0].len())
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

pub fn softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn linear(x: &Rows, l: &Linear) -> Rows {
    let w = rows(l.weight.value());
    let mut y = matmul(x, &w);
    let Some(bias) = &l.bias else { return y };
    let b = bias.value().data();
    for r in &mut y {
        for (v, bi) in r.iter_mut().zip(b) {
            *v += bi;
        }
    }
    y
}

pub fn layer_norm(x: &Rows, ln: &LayerNorm) -> Rows {
    let (g, b) = (ln.gamma.value().data(), ln.beta.value().data());
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + ln.eps).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

pub fn ffn(x: &Rows, f: &FeedForward) -> Rows {
    let h: Rows = linear(x, &f.fc1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &f.fc2)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention for one frame: queries `q`, keys/values `kv`.
pub fn attention(q: &Rows, kv: &Rows, a: &CrossAttention) -> Rows {
    let (qp, kp, vp) = (linear(q, &a.q), linear(kv, &a.k), linear(kv, &a.v));
    let d = a.width();
    let dh = d / a.heads();
    let mut merged = vec![vec![0.0; d]; q.len()];
    for h in 0..a.heads() {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| {
                    let mut s = 0.0;
                    for c in cols.clone() {
                        s += qi[c] * kj[c];
                    }
                    s / (dh as f64).sqrt()
                })
                .collect();
            let w = softmax_row(&scores);
            for c in cols.clone() {
                merged[i][c] = w.iter().zip(&vp).map(|(wj, vj)| wj * vj[c]).sum();
            }
        }
    }
    linear(&merged, &a.o)
}

pub fn vit_block(x: &Rows, b: &ViTBlock) -> Rows {
    let h = layer_norm(x, &b.norm1);
    let x = add(x, &attention(&h, &h, &b.attn));
    let h = layer_norm(&x, &b.norm2);
    add(&x, &ffn(&h, &b.ffn))
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Splits a `[F, L, D]` tensor into per-frame row lists.
pub fn frames(t: &Tensor) -> Vec<Rows> {
    let s = t.shape();
    let (l, d) = (s[s.len() - 2], s[s.len() - 1]);
    t.data()
        .chunks(l * d)
        .map(|f| f.chunks(d).map(<[f64]>::to_vec).collect())
        .collect()
}

pub fn flatten(fs: &[Rows]) -> Vec<f64> {
    fs.iter().flatten().flatten().copied().collect()
}

/// A small random adapter configuration; sizes need not be multiples of 32.
pub fn random_adapter_config(seed: u64) -> dolphin_core::adapter::AdapterConfig {
    use dolphin_core::adapter::{AdapterConfig, ModalitySpec};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let mut spec = |channels: usize| ModalitySpec {
        channels,
        height: rng.random_range(32..=72),
        width: rng.random_range(32..=80),
        patch: [8, 16, 32][rng.random_range(0..3)],
    };
    let visual = spec(3);
    let audio = spec(1);
    AdapterConfig {
        blocks: rng.random_range(1..=3),
        layers_per_block: rng.random_range(1..=2),
        dim: heads * [2, 4, 8][rng.random_range(0..3)],
        heads,
        frames: rng.random_range(1..=3),
        visual,
        audio,
    }
}
