//! Patch-wise conditional GAN that synthesises arbitrarily large tissue
//! images from component masks.
//!
//! A generator is trained on small mask patches (with a context margin) while
//! the discriminator judges whole tiles assembled from overlapping generator
//! outputs by a differentiable running-average stitch. Because gradients flow
//! through the stitch back into every patch, the generator learns to produce
//! patches that blend seamlessly, and at inference time the same stitch can
//! assemble images of any size at constant transient memory.
//!
//! Module map:
//! - [`geometry`]: tile/patch layout, mask padding, patch extraction, stitching
//! - [`maskgen`]: synthetic component-mask generation
//! - [`nn`]: minimal neural-network layers with explicit forward/backward
//! - [`nets`]: generator / discriminator assembly, init, checkpoints
//! - [`training`]: losses, optimiser, adversarial training loop
//! - [`inference`]: tile generation, streaming generation for huge rasters
//! - [`evaluation`]: Fréchet distance, Dice, seam statistics, segmentation probe
//! - [`resources`]: compute / memory cost model
//! - [`data`]: image/mask pair loading, tile extraction, toy dataset

pub mod data;
pub mod diag;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod maskgen;
pub mod nets;
pub mod nn;
pub mod resources;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{ComponentMask, PatchGrid, Tile, TileGeometry, TissueClass};

pub use ndarray;
