//! Core library for dynamic-aware RGB-D fusion: geometry, per-pixel maps,
//! perception post-processing, odometry, dynamicity scoring and the sparse
//! TSDF model with Marching Cubes extraction.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to [`Scalar`].

pub mod dynamicity;
pub mod frame;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod odometry;
pub mod perception;
pub mod pipeline;
pub mod scalar;

pub use dynamicity::{Classification, MotionLabel};
pub use frame::{DepthRange, FrameError, InstanceMap, InstanceMeta, Rgb, UncertaintyPolicy};
pub use fusion::{BlockCoord, FusionParams, McBlock, Mesh, TsdfVoxel, VoxelBlock, VoxelBlockMap};
pub use geometry::GeometryError;
pub use image::Grid;
pub use perception::{PerceptionParams, ProviderKind, RegionProposal};
pub use pipeline::PoseSource;
pub use scalar::Real;

/// Default scalar type.
pub type Scalar = f64;
pub type Vec2 = geometry::Vec2<Scalar>;
pub type Vec3 = geometry::Vec3<Scalar>;
pub type Pose = geometry::Pose<Scalar>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<Scalar>;
pub type RgbdFrame = frame::RgbdFrame<Scalar>;
pub type FlowField = frame::FlowField<Scalar>;
pub type ScoreMap = frame::ScoreMap<Scalar>;
pub type DynParams = frame::DynParams<Scalar>;
pub type FrameScores = dynamicity::FrameScores<Scalar>;
pub type OdometryResult = odometry::OdometryResult<Scalar>;
pub type PipelineParams = pipeline::PipelineParams<Scalar>;
pub type Reconstructor = pipeline::Reconstructor<Scalar>;
pub type FrameOutput = pipeline::FrameOutput<Scalar>;
