//! Unsupervised semantic segmentation of grayscale (ultrasound) images with
//! deep-spectral methods.
//!
//! Step I fuses optional self-supervised patch features with SSD, mutual
//! information and positional patch affinities, then oversegments each image
//! by k-means on the low eigenvectors of the normalized Laplacian. Step II
//! describes every segment by crop, shape and position and clusters the whole
//! dataset into semantic classes. Masks can be refined with a mean-field CRF
//! and scored with DICE, label consistency, undersegmentation error and
//! boundary recall, next to SLIC and Felzenszwalb baselines.

pub mod affinity;
pub mod baselines;
pub mod config;
pub mod error;
pub mod gray;
pub mod kmeans;
pub mod manifest;
pub mod mask;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod semantic;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use gray::GrayImage;
pub use mask::SegmentationMask;
