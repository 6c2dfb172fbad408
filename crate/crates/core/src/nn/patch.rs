use alloc::format;
use alloc::vec;

use crate::autograd::{Im2Col, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{impl_module, Linear, Param};
use crate::tensor::{Tensor, INIT_STD};

/// Spatial sizes are zero-padded (right and bottom) to a multiple of this so
/// the 1/32 pyramid level has an integral grid.
pub const PYRAMID_MULTIPLE: usize = 32;

/// A batch of images in token-major layout `[frames, height·width, channels]`,
/// already padded to the pyramid grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureMap {
    /// Converts `[frames, C, H, W]` (or a single `[C, H, W]`) images, padding
    /// both spatial dims up to the next multiple of [`PYRAMID_MULTIPLE`].
    pub fn from_images(images: &Tensor) -> Result<Self> {
        let s = images.shape();
        let (frames, c, h, w) = match *s {
            [c, h, w] => (1, c, h, w),
            [f, c, h, w] => (f, c, h, w),
            _ => return Err(Error::shape("feature_map", s, &[0, 0, 0, 0])),
        };
        if h < PYRAMID_MULTIPLE || w < PYRAMID_MULTIPLE {
            return Err(Error::Size {
                height: h,
                width: w,
            });
        }
        let (hp, wp) = (padded(h), padded(w));
        let src = images.data();
        let mut data = vec![0.0; frames * hp * wp * c];
        for f in 0..frames {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let from = ((f * c + ch) * h + y) * w + x;
                        let to = (f * hp * wp + y * wp + x) * c + ch;
                        data[to] = src[from];
                    }
                }
            }
        }
        Ok(FeatureMap {
            tokens: Tensor::new(&[frames, hp * wp, c], data)?,
            height: hp,
            width: wp,
            channels: c,
        })
    }

    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }
}

/// Rounds a spatial size up to the pyramid grid.
pub fn padded(n: usize) -> usize {
    n.div_ceil(PYRAMID_MULTIPLE) * PYRAMID_MULTIPLE
}

/// Non-overlapping `p×p` patches projected to width `D`, plus a learned
/// positional table.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: Param,
    patch: usize,
    grid: (usize, usize),
}

impl_module!(PatchEmbed => proj, pos);

impl PatchEmbed {
    /// Patch embedding for maps of `height × width` (padded) with `channels`.
    pub fn new(
        name: &str,
        patch: usize,
        channels: usize,
        height: usize,
        width: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "{height}x{width} is not divisible into {patch}x{patch} patches"
            )));
        }
        let grid = (height / patch, width / patch);
        Ok(PatchEmbed {
            proj: Linear::new(&format!("{name}.proj"), patch * patch * channels, dim, seed)?,
            pos: Param::normal(
                format!("{name}.pos"),
                &[grid.0 * grid.1, dim],
                seed,
                INIT_STD,
            )?,
            patch,
            grid,
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn forward<'t>(&self, tape: &'t Tape, map: &FeatureMap) -> Result<Var<'t>> {
        if (map.height, map.width) != (self.grid.0 * self.patch, self.grid.1 * self.patch) {
            return Err(Error::shape(
                "patch_embed",
                &[map.height, map.width],
                &[self.grid.0 * self.patch, self.grid.1 * self.patch],
            ));
        }
        let geo = Im2Col {
            height: map.height,
            width: map.width,
            channels: map.channels,
            kernel: self.patch,
            stride: self.patch,
            pad: 0,
        };
        let patches = tape.constant(&map.tokens).im2col(geo)?;
        self.proj
            .forward(tape, patches)?
            .add(tape.param(&self.pos)?)
    }
}
