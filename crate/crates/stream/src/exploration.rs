//! Headless exploration-client state: the streamed mesh store, the latest
//! dynamic point cloud and poses.

use std::collections::{BTreeMap, HashMap};

use dynfuse_core::fusion::{BlockCoord, McBlock, MeshVertex, VertexKey};
use dynfuse_core::Rgb;
use sha2::{Digest, Sha256};

use crate::payload::{encode_mc_block, Message, MetricsPayload, PosePayload, Role};
use crate::wire::Writer;

pub type StateDigest = [u8; 32];

pub fn hex(d: &StateDigest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the canonical encodings of the non-empty blocks, in coordinate order.
pub fn mc_digest<'a>(blocks: impl IntoIterator<Item = &'a McBlock>) -> StateDigest {
    let mut sorted: Vec<&McBlock> = blocks.into_iter().filter(|b| !b.is_empty()).collect();
    sorted.sort_by_key(|b| b.coord);
    let mut h = Sha256::new();
    for b in sorted {
        h.update(encode_mc_block(b));
    }
    h.finalize().into()
}

/// Indexed triangles of one block, vertices welded within the block in first-use order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMesh {
    pub coord: BlockCoord,
    pub vertices: Vec<MeshVertex>,
    pub triangles: Vec<[u32; 3]>,
}

impl BlockMesh {
    pub fn from_block(b: &McBlock, voxel_size: f64) -> Self {
        let mut vertices = Vec::new();
        let mut index: HashMap<VertexKey, u32> = HashMap::new();
        let triangles = b
            .triangles(voxel_size)
            .into_iter()
            .map(|tri| {
                tri.map(|(k, v)| {
                    *index.entry(k).or_insert_with(|| {
                        vertices.push(v);
                        vertices.len() as u32 - 1
                    })
                })
            })
            .collect();
        Self {
            coord: b.coord,
            vertices,
            triangles,
        }
    }

    /// Byte layout pushed to viewers: coordinate, vertices (xyz f32, rgb, motion f32), triangles (3 u32).
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(20 + self.vertices.len() * 19 + self.triangles.len() * 12);
        for c in self.coord.0 {
            w.i32(c);
        }
        w.u32(self.vertices.len() as u32);
        for v in &self.vertices {
            for p in v.position {
                w.f32(p as f32);
            }
            w.bytes(&v.rgb).f32(v.motion as f32);
        }
        w.u32(self.triangles.len() as u32);
        for t in &self.triangles {
            for i in t {
                w.u32(*i);
            }
        }
        w.finish()
    }
}

/// SHA-256 over the viewer encodings of blocks with at least one triangle, in coordinate order.
pub fn mesh_digest<'a>(blocks: impl IntoIterator<Item = &'a BlockMesh>) -> StateDigest {
    let mut sorted: Vec<&BlockMesh> = blocks.into_iter().filter(|b| !b.triangles.is_empty()).collect();
    sorted.sort_by_key(|b| b.coord);
    let mut h = Sha256::new();
    for b in sorted {
        h.update(b.encode());
    }
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicCloud {
    pub frame_index: u64,
    pub timestamp_us: u64,
    pub points: Vec<([f64; 3], Rgb)>,
}

/// What an applied message changed.
#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    None,
    Blocks(Vec<BlockCoord>),
    Removed(Vec<BlockCoord>),
    Cloud,
    Pose(u32),
    VoxelSize,
    Ended,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExplorationState {
    pub voxel_size: Option<f64>,
    pub blocks: BTreeMap<BlockCoord, McBlock>,
    pub cloud: Option<DynamicCloud>,
    pub sensor_pose: Option<PosePayload>,
    pub user_poses: BTreeMap<u32, PosePayload>,
    pub ended: Option<MetricsPayload>,
}

impl ExplorationState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, msg: &Message) -> Change {
        match msg {
            Message::Hello(h) if h.role != Role::Exploration && h.voxel_size > 0.0 => {
                self.voxel_size = Some(h.voxel_size);
                Change::VoxelSize
            }
            Message::McBlocks(blocks) => {
                for b in blocks {
                    self.blocks.insert(b.coord, b.clone());
                }
                Change::Blocks(blocks.iter().map(|b| b.coord).collect())
            }
            Message::BlockRemove(coords) => {
                Change::Removed(coords.iter().filter(|c| self.blocks.remove(c).is_some()).copied().collect())
            }
            Message::DynFrame(f) => {
                if self.cloud.as_ref().is_some_and(|c| f.frame_index < c.frame_index) {
                    return Change::None;
                }
                self.cloud = Some(DynamicCloud {
                    frame_index: f.frame_index,
                    timestamp_us: f.timestamp_us,
                    points: f.points(),
                });
                Change::Cloud
            }
            Message::Pose(p) if p.source == 0 => {
                if self.sensor_pose.as_ref().is_some_and(|s| p.frame_index < s.frame_index) {
                    return Change::None;
                }
                self.sensor_pose = Some(p.clone());
                Change::Pose(0)
            }
            Message::Pose(p) => {
                self.user_poses.insert(p.source, p.clone());
                Change::Pose(p.source)
            }
            Message::Metrics(m) if m.end_of_stream => {
                self.ended = Some(*m);
                Change::Ended
            }
            _ => Change::None,
        }
    }

    pub fn mc_digest(&self) -> StateDigest {
        mc_digest(self.blocks.values())
    }

    pub fn block_meshes(&self) -> Vec<BlockMesh> {
        let vs = self.voxel_size.unwrap_or(0.0);
        self.blocks.values().map(|b| BlockMesh::from_block(b, vs)).collect()
    }

    pub fn mesh_digest(&self) -> StateDigest {
        mesh_digest(&self.block_meshes())
    }

    pub fn mesh(&self) -> dynfuse_core::Mesh {
        dynfuse_core::Mesh::from_blocks(self.blocks.values(), self.voxel_size.unwrap_or(0.0))
    }

    pub fn triangle_count(&self) -> usize {
        self.mesh().triangles.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::payload::{DynFramePayload, WireIntrinsics};
    use dynfuse_core::fusion::{extract_mc_block, VoxelBlock, VoxelBlockMap};

    fn sample_blocks() -> Vec<McBlock> {
        let mut map = VoxelBlockMap::new(0.01, 0.04);
        for c in [BlockCoord::new(0, 0, 0), BlockCoord::new(1, 0, 0)] {
            let mut b = VoxelBlock::new(c);
            for z in 0..8 {
                for y in 0..8 {
                    for x in 0..8 {
                        let v = b.voxel_mut(x, y, z);
                        v.sdf = (z as f32 - 3.5) / 4.0;
                        v.weight = 1.0;
                        v.color = [x as u8 * 10, 0, 0];
                    }
                }
            }
            map.insert(b);
        }
        map.coords_sorted().into_iter().map(|c| extract_mc_block(&map, c).unwrap()).collect()
    }

    #[test]
    fn duplicate_mc_blocks_are_idempotent() {
        let blocks = sample_blocks();
        let mut s = ExplorationState::new();
        s.apply(&Message::McBlocks(blocks.clone()));
        let once = s.clone();
        s.apply(&Message::McBlocks(blocks));
        assert_eq!(s, once);
        assert_ne!(s.mc_digest(), mc_digest([]));
    }

    #[test]
    fn remove_and_unknown_remove() {
        let blocks = sample_blocks();
        let mut s = ExplorationState::new();
        s.apply(&Message::McBlocks(blocks.clone()));
        assert_eq!(s.apply(&Message::BlockRemove(vec![BlockCoord::new(9, 9, 9)])), Change::Removed(vec![]));
        s.apply(&Message::BlockRemove(vec![blocks[0].coord]));
        assert_eq!(s.blocks.len(), 1);
        assert_eq!(s.mc_digest(), mc_digest(&blocks[1..]));
    }

    #[test]
    fn older_dyn_frame_is_ignored() {
        let frame = |i| {
            Message::DynFrame(DynFramePayload {
                frame_index: i,
                timestamp_us: i * 10,
                pose: [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.],
                intrinsics: WireIntrinsics {
                    fx: 1.0,
                    fy: 1.0,
                    cx: 0.0,
                    cy: 0.0,
                    width: 4,
                    height: 4,
                },
                pixels: vec![],
            })
        };
        let mut s = ExplorationState::new();
        s.apply(&frame(5));
        assert_eq!(s.apply(&frame(4)), Change::None);
        assert_eq!(s.cloud.as_ref().unwrap().frame_index, 5);
    }

    #[test]
    fn digests_ignore_empty_blocks_and_order() {
        let mut blocks = sample_blocks();
        let d = mc_digest(&blocks);
        blocks.reverse();
        blocks.push(McBlock::empty(BlockCoord::new(5, 5, 5)));
        assert_eq!(mc_digest(&blocks), d);
        let meshes: Vec<_> = blocks.iter().map(|b| BlockMesh::from_block(b, 0.01)).collect();
        let mut s = ExplorationState::new();
        s.voxel_size = Some(0.01);
        s.apply(&Message::McBlocks(blocks));
        assert_eq!(mesh_digest(&meshes), s.mesh_digest());
    }

    #[test]
    fn block_mesh_welds_vertices() {
        let b = &sample_blocks()[0];
        let m = BlockMesh::from_block(b, 0.01);
        assert_eq!(m.triangles.len(), b.triangles(0.01).len());
        assert!(m.vertices.len() < 3 * m.triangles.len());
        assert!(m.vertices.iter().all(|v| (v.position[2] - 0.035).abs() < 0.01 / 255.0 + 1e-12));
    }
}
