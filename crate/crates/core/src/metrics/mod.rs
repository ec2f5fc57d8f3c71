//! Realism metrics: noise-distribution KL, Laplacian-variance sharpness,
//! HOG textural distance, patch perceptual distance, FID, coverage/density,
//! and the batch report that runs them over image sets.

mod backbone;
mod coverage;
mod fid;
mod hog;
mod lpips;
mod noise;
pub mod report;
mod sharpness;

pub use backbone::{FeatureMap, PerceptualBackbone, RandomConvBackbone};
pub use coverage::{coverage_density, knn_radii};
pub use fid::{fid, FeatureSet, FID_JITTER};
pub use hog::{cell_histograms, hog_descriptor, hog_similarity, HogParams, Plane};
pub use lpips::{lpips_patches, perceptual_distance, read_patch, sample_slice_patches, SlicePatch};
pub use noise::{extract_noise, histogram_kl, noise_kl, NoiseEstimate, KL_BIN_EPSILON};
pub use report::{
    evaluate_sets, list_volumes, volume_id, EvalInputs, MetricProtocol, MetricReport, MetricRow,
};
pub use sharpness::{
    laplacian_response, laplacian_variance_at, laplacian_variance_sharpness, sample_cube_origins,
};
