//! Set-prediction transformer for global 3D two-hand pose estimation.
//!
//! The pipeline detects both hands of a frame in one pass: a small
//! transformer turns an image into a fixed set of query predictions (hand
//! type plus 21 joints in normalized image-and-depth space), Hungarian
//! matching pairs queries with ground-truth hands for training, and at
//! inference the per-side best query is decoded, optionally depth-rescaled
//! toward the training-set mean hand scale, and lifted to camera space.
//!
//! Numeric modules are generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the double-precision types used by the data, training and CLI
//! layers.

pub mod cli;
pub mod config;
pub mod data;
pub mod geometry;
pub mod hand_model;
pub mod image;
pub mod matching;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod train_eval;

pub use scalar::Scalar;

pub type Camera = geometry::CameraIntrinsics<f64>;
pub type PoseUvd = geometry::JointSetUVD<f64>;
pub type Pose3d = geometry::JointSet3D<f64>;
pub type Stats = hand_model::ScaleStats<f64>;
pub type Params = nn::ParamStore<f64>;
pub type Grads = nn::Gradients<f64>;
pub type Detections = model::DetectionSet<f64>;
pub type Loss = matching::LossBreakdown<f64>;

pub type CameraF32 = geometry::CameraIntrinsics<f32>;
pub type PoseUvdF32 = geometry::JointSetUVD<f32>;
pub type Pose3dF32 = geometry::JointSet3D<f32>;
pub type ParamsF32 = nn::ParamStore<f32>;
