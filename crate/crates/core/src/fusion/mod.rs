//! Sparse TSDF volume on hashed 8³ voxel blocks, dynamicity-aware
//! integration and per-block Marching Cubes extraction.

mod block_map;
mod integrate;
pub mod mc;
mod mesh;

pub use block_map::{BlockCoord, TsdfVoxel, VoxelBlock, VoxelBlockMap, BLOCK_SIDE, BLOCK_VOXELS};
pub use integrate::{allocate_blocks, block_for_voxel, integrate, ray_blocks, weight_cap, FusionInput, FusionParams};
pub use mc::{extract_mc_block, McBlock, McCell, McEdge, McError};
pub use mesh::{Mesh, MeshVertex, VertexKey};
