//! Two-stage 3D image generation: a latent diffusion model produces coarse
//! volumes, and a patch-based conditional diffusion model refines them
//! patch by patch from the centre outwards. Includes a synthetic phantom
//! generator and a suite of realism metrics.

pub mod config;
pub mod diffusion;
pub mod error;
pub mod filter;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod refiner;
pub mod train;
pub mod util;
pub mod volume;
pub mod workflow;

pub use error::{Error, Result};
pub use volume::{PatchGrid, RegionMask, Shape3, Volume};
