//! Dense vision-transformer features lifted onto RGB-D point clouds.
//!
//! The crate covers the whole offline pipeline:
//!
//! 1. [`superpixel`] partitions each image crop with SLIC.
//! 2. [`regions`] schedules multi-scale crops, maps encoder patches onto
//!    super-pixels and stitches per-crop feature maps back onto the view.
//! 3. [`vit_local`] runs a ViT encoder with one extra classification token per
//!    super-pixel whose attention is restricted to that super-pixel's patches.
//! 4. [`projection`] projects scene points into every RGB-D view, rejects
//!    occluded pairs by depth consistency and averages pixel features per point.
//! 5. [`distill`] trains a small point network on those targets with a
//!    negative-cosine objective.
//! 6. [`openvocab`] and [`metrics`] classify points against text embeddings,
//!    build open-world query masks, pseudo-labels and evaluation reports.
//!
//! [`pipeline`] wires the stages into the `featlift` command line tool and
//! [`synthetic`] renders planted RGB-D scenes used by the self-test.

pub mod distill;
mod error;
pub mod extract;
pub mod features;
pub mod metrics;
pub mod openvocab;
pub mod pipeline;
pub mod projection;
pub mod regions;
pub mod superpixel;
pub mod synthetic;
pub mod tensorio;
pub mod vit_local;

pub use error::{Error, Result};
