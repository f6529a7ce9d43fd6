//! Ground depth maps from camera geometry, camera pose from horizon and
//! vanishing-point observations, and a transformer that fuses image features
//! with ground-depth location queries.
//!
//! The geometry and model code is generic over [`Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f64`, which the tolerances in this crate assume.

pub mod camera;
pub mod error;
pub mod ground;
pub mod kitti;
pub mod pose;
pub mod scalar;
pub mod fusion;
pub mod scene;

pub use scalar::Scalar;

pub type Intrinsics = camera::CameraIntrinsics<f64>;
pub type Pixel = camera::PixelCoord<f64>;
pub type Point = camera::Point3D<f64>;
pub type Pose = pose::CameraPose<f64>;
pub type GroundConfig = ground::GroundPlaneConfig<f64>;
pub type DepthMap = ground::GroundDepthMap<f64>;
pub type Model = fusion::FusionModel<f64>;
pub type Features = fusion::FeatureMap<f64>;
