//! Compact unsigned distance field representations.
//!
//! The crate covers the whole pipeline: turning triangle meshes into
//! truncated unsigned distance volumes, compressing them with a learnable
//! separable 3D wavelet filter bank, generating new coefficient volumes with
//! a denoising diffusion model, extracting open or closed surfaces back out
//! of a distance field, and scoring generated shape sets.

// `!(x > 0.0)` is used on purpose so NaN fails parameter checks; index loops
// mirror the tap arithmetic.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod meshing;
pub mod metrics;
pub mod shapes;
pub mod volume;
pub mod wavelet;

pub use error::{Error, Result};
pub use geometry::{DistanceAccelerator, PointCloud, TriangleMesh, Vec3};
pub use grid::Grid3;
pub use volume::{UdfVolume, WeightMask};
pub use wavelet::{FilterBank, WaveletPyramid};
