//! Audio-visual fusion at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains every algorithm in the
//! stack: a reverse-mode tensor engine, transformer building blocks, the
//! audio-visual multi-scale adapter, interleaved temporal merging, a toy
//! end-to-end model with a two-stage freeze schedule, and the dataset
//! curation engine. File formats, configuration, and the command line live
//! in the companion `dolphin` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adapter;
pub mod autograd;
pub mod avu;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod model;
pub mod nn;
pub mod temporal;
pub mod tensor;

pub use autograd::{Im2Col, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Init, Tensor};
