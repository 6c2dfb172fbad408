use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Im2Col, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::patch::{padded, PYRAMID_MULTIPLE};
use crate::nn::{impl_module, FeatureMap, Linear};

/// Concatenated 1/8, 1/16, 1/32 resolution tokens, in that order.
#[derive(Debug, Clone, Copy)]
pub struct MultiScaleFeature<'t> {
    /// `[..., L_ms, D]`
    pub tokens: Var<'t>,
    pub segments: [usize; 3],
}

impl MultiScaleFeature<'_> {
    pub fn len(&self) -> usize {
        self.segments.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token counts of the three pyramid levels for a raw `height × width` input,
/// after padding to the 32-pixel grid.
pub fn pyramid_segments(height: usize, width: usize) -> Result<[usize; 3]> {
    if height < PYRAMID_MULTIPLE || width < PYRAMID_MULTIPLE {
        return Err(Error::Size { height, width });
    }
    let (h, w) = (padded(height), padded(width));
    Ok([(h / 8) * (w / 8), (h / 16) * (w / 16), (h / 32) * (w / 32)])
}

/// Convolutional pyramid: a stride-4 patchify stem followed by three
/// 3×3 stride-2 convolutions, each level projected to `D` channels.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub stem: Linear,
    pub downs: Vec<Linear>,
    pub projs: Vec<Linear>,
    channels: usize,
}

impl_module!(Pyramid => stem, downs, projs);

const STEM: usize = 4;

impl Pyramid {
    pub fn new(name: &str, channels: usize, dim: usize, seed: u64) -> Result<Self> {
        let downs = (0..3)
            .map(|i| Linear::new(&format!("{name}.down{i}"), 9 * dim, dim, seed))
            .collect::<Result<Vec<_>>>()?;
        let projs = (0..3)
            .map(|i| Linear::new(&format!("{name}.proj{i}"), dim, dim, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pyramid {
            stem: Linear::new(&format!("{name}.stem"), STEM * STEM * channels, dim, seed)?,
            downs,
            projs,
            channels,
        })
    }

    pub fn features<'t>(&self, tape: &'t Tape, map: &FeatureMap) -> Result<MultiScaleFeature<'t>> {
        if map.height < PYRAMID_MULTIPLE
            || map.width < PYRAMID_MULTIPLE
            || !map.height.is_multiple_of(PYRAMID_MULTIPLE)
            || !map.width.is_multiple_of(PYRAMID_MULTIPLE)
        {
            return Err(Error::Size {
                height: map.height,
                width: map.width,
            });
        }
        if map.channels != self.channels {
            return Err(Error::shape("pyramid", &[map.channels], &[self.channels]));
        }
        let dim = self.stem.output_width();
        let stem_geo = Im2Col {
            height: map.height,
            width: map.width,
            channels: map.channels,
            kernel: STEM,
            stride: STEM,
            pad: 0,
        };
        let mut x = self
            .stem
            .forward(tape, tape.constant(&map.tokens).im2col(stem_geo)?)?
            .gelu()?;
        let (mut h, mut w) = (stem_geo.out_height(), stem_geo.out_width());
        let mut levels = Vec::with_capacity(3);
        let mut segments = [0; 3];
        for (i, (down, proj)) in self.downs.iter().zip(&self.projs).enumerate() {
            let geo = Im2Col {
                height: h,
                width: w,
                channels: dim,
                kernel: 3,
                stride: 2,
                pad: 1,
            };
            x = down.forward(tape, x.im2col(geo)?)?.gelu()?;
            h = geo.out_height();
            w = geo.out_width();
            segments[i] = h * w;
            levels.push(proj.forward(tape, x)?);
        }
        let axis = levels[0].shape().len() - 2;
        Ok(MultiScaleFeature {
            tokens: tape.concat(&levels, axis)?,
            segments,
        })
    }
}
