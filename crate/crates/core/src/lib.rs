//! Language-embedded Gaussian scenes.
//!
//! Data model, splatting renderer with gradients, confidence-weighted voxel
//! sparsification with a decoupled semantic set, coverage-based view selection,
//! training losses, multi-view feature aggregation, open-vocabulary queries and
//! evaluation metrics, plus the file formats and CLI that tie them together.

pub mod aggregate;
pub mod cli;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod quat;
pub mod query;
pub mod raster;
pub mod sparsify;
pub mod synth;
pub mod sh;

pub use error::{Error, Result};
pub use maps::{BinaryMask, CoverageMask, DepthMap, FeatureMap, Image, InstanceMask, PointMap, ScalarMap};
pub use model::{canonicalize, validate_scene, Camera, Gaussian3D, LossConfig, Scene, SemanticGaussian, Vec3};
pub use quat::Quat;
