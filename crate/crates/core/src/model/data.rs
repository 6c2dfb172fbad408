use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Token id that opens every input sequence; never used as a target.
pub const BOS: usize = 0;

/// Seeded clips plus token sequences for next-token training.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBatch {
    /// `[B, T, C_v, H_v, W_v]`
    pub frames: Tensor,
    /// `[B, T, C_a, H_a, W_a]`
    pub specs: Tensor,
    /// `[BOS, y_1, …, y_{n-1}]` per sample.
    pub inputs: Vec<Vec<usize>>,
    /// `[y_1, …, y_n]` per sample.
    pub targets: Vec<Vec<usize>>,
    pub seed: u64,
}

impl SyntheticBatch {
    pub fn generate(
        cfg: &ModelConfig,
        samples: usize,
        target_len: usize,
        seed: u64,
    ) -> Result<Self> {
        if samples == 0 || target_len == 0 || cfg.vocab < 2 {
            return Err(Error::Config(
                "synthetic batch needs samples, targets, and a vocabulary of >= 2".into(),
            ));
        }
        let a = &cfg.adapter;
        let (v, s) = (&a.visual, &a.audio);
        let frames = clip(samples, a.frames, [v.channels, v.height, v.width], seed)?;
        let specs = clip(
            samples,
            a.frames,
            [s.channels, s.height, s.width],
            seed ^ 0x5eed,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let targets: Vec<Vec<usize>> = (0..samples)
            .map(|_| {
                (0..target_len)
                    .map(|_| rng.random_range(1..cfg.vocab))
                    .collect()
            })
            .collect();
        let inputs = targets
            .iter()
            .map(|t| {
                core::iter::once(BOS)
                    .chain(t[..t.len() - 1].iter().copied())
                    .collect()
            })
            .collect();
        Ok(SyntheticBatch {
            frames,
            specs,
            inputs,
            targets,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn flat_targets(&self) -> Vec<usize> {
        self.targets.iter().flatten().copied().collect()
    }
}

/// `[B, T, C, H, W]` clips that stay coherent over time: each sample has a
/// per-channel level and a spatial pattern shared by all its frames, plus a
/// little per-frame noise.
fn clip(samples: usize, frames: usize, [c, h, w]: [usize; 3], seed: u64) -> Result<Tensor> {
    let level = Tensor::randn(&[samples, c], seed, 1.0)?;
    let pattern = Tensor::randn(&[samples, c * h * w], seed.wrapping_add(0x9e37), 0.5)?;
    let noise = Tensor::randn(
        &[samples, frames, c * h * w],
        seed.wrapping_add(0x79b9),
        0.1,
    )?;
    let mut data = noise.into_data();
    let plane = h * w;
    for (i, x) in data.iter_mut().enumerate() {
        let b = i / (frames * c * plane);
        let p = i % (c * plane);
        *x += level.data()[b * c + p / plane] + pattern.data()[b * c * plane + p];
    }
    Tensor::new(&[samples, frames, c, h, w], data)
}
