//! Reparameterizable hybrid vision backbone and anchor-free detector.
//!
//! Models are built from presets with seeded weights, evaluated on NHWC
//! `f32` tensors, and converted from their multi-branch training form to a
//! single-kernel deploy form with [`backbone::fuse_model`]. The guide in
//! `book/` walks through each part.

pub mod backbone;
pub mod blocks;
pub mod cli;
pub mod detector;
pub mod error;
pub mod init;
pub mod layers;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/reparameterization.md")]
    mod reparameterization {}
    #[doc = include_str!("../../../book/src/blocks.md")]
    mod blocks {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
