//! Occupancy-aware 3D instance segmentation on sparse voxel grids.
//!
//! Stages: [`geometry`] voxelizes labeled point clouds, [`supervoxel`]
//! over-segments the grid, [`oracle`] stands in for a trained network,
//! [`losses`] implements the training objective with analytic gradients,
//! [`cluster`] merges supervoxels into instances and [`eval`] scores them.

pub mod cluster;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod oracle;
pub mod pipeline;
pub mod ply;
pub mod prediction;
pub mod scene;
pub mod supervoxel;

pub use cluster::{ClusterGraph, ClusterParams, InstancePrediction, SuperVoxelStats};
pub use config::PipelineConfig;
pub use error::{Error, Location, Result};
pub use eval::EvalReport;
pub use geometry::{voxelize, InstanceGroundTruth, PointCloud, VoxelCell, VoxelGrid};
pub use prediction::{Predictions, VoxelPrediction};
pub use supervoxel::SuperVoxelPartition;
