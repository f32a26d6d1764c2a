//! Deep statistical shape model segmentation in 2D.
//!
//! Shapes are ordered point clouds (inner chain, then outer chain) generated
//! as `P = θ(P_m + β·C_β)` from a PCA point-distribution model, rendered to
//! masks with a differentiable triangle-strip rasterizer, and fitted either
//! per image by gradient descent or by a small trained regressor.

pub mod alignment;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod raster;
pub mod ssm;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{AffineParams, Point2, PointCloud, SimilarityParams};
pub use mask::{BinaryMask, Image, RasterMask};
