//! Neural building blocks composed by the adapter, merger, and readout head.

mod attention;
mod linear;
mod param;
pub(crate) mod patch;
mod pyramid;
mod vit;

pub use attention::{causal_mask, CrossAttention};
pub use linear::{FeedForward, LayerNorm, Linear};
pub(crate) use param::impl_module;
pub use param::{Module, Param};
pub use patch::{FeatureMap, PatchEmbed, PYRAMID_MULTIPLE};
pub use pyramid::{pyramid_segments, MultiScaleFeature, Pyramid};
pub use vit::ViTBlock;
