//! Controllable style transfer on a differentiable voxel radiance field.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`] stores density and spherical-harmonics radiance on a dense lattice.
//! * [`render`] ray-marches the grid and back-propagates pixel gradients to radiance.
//! * [`feat`] turns images into per-pixel feature maps (synthetic extractors or
//!   precomputed tensors) and aligns resolutions.
//! * [`matching`] performs nearest-neighbour feature matching, optionally restricted
//!   to matching semantic labels with a blended texture/semantic distance.
//! * [`loss`] holds every loss term plus the label-dispatched composite.
//! * [`stylize`] drives pretraining, color transfer and radiance fine-tuning.
//! * [`maskgen`] extracts label masks from semantic feature maps.
//! * [`fixtures`] builds deterministic synthetic scenes for tests and demos.
//! * [`io`] and [`cli`] implement the on-disk formats and the command line.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iteration otherwise.

// `!(x >= 0.0)` is how NaN gets rejected alongside negatives; index loops
// mirror the tensor layouts.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod feat;
pub mod fixtures;
pub mod grid;
pub mod image;
pub mod io;
pub mod loss;
pub mod maskgen;
pub mod matching;
pub mod par;
pub mod render;
pub mod stylize;

pub use error::{Error, Result};
pub use feat::{Extractor, FeatureMap, FeatureSpace};
pub use grid::VoxelGrid;
pub use image::{Image, LabelMask};
pub use render::{Camera, RenderAux, RenderOptions};
