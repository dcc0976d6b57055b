//! Self-supervised monocular depth and ego-motion with low-rank adapted
//! transformer backbones.

pub mod adapters;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{AxisAngle, PoseSE3, RotationMatrix};
pub use tensor::Tensor;
pub use warp::{DepthMap, Image, Intrinsics, ValidityMask};
