use std::collections::HashMap;
use std::fmt::Write as _;

use super::mc::McBlock;
use crate::frame::Rgb;

/// Identifies a vertex by the lattice edge it lies on: the edge's lower
/// voxel and its axis (0 = x, 1 = y, 2 = z). Shared by all cells touching the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexKey {
    pub voxel: [i64; 3],
    pub axis: u8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshVertex {
    /// World position, meters.
    pub position: [f64; 3],
    pub rgb: Rgb,
    /// Accumulated motion, meters.
    pub motion: f64,
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<MeshVertex>,
    pub keys: Vec<VertexKey>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    /// Welds the triangles of all blocks on their shared edge keys.
    pub fn from_blocks<'a>(blocks: impl IntoIterator<Item = &'a McBlock>, voxel_size: f64) -> Self {
        let mut mesh = Mesh::default();
        let mut index: HashMap<VertexKey, u32> = HashMap::new();
        for block in blocks {
            for tri in block.triangles(voxel_size) {
                let ids = tri.map(|(key, v)| {
                    *index.entry(key).or_insert_with(|| {
                        mesh.vertices.push(v);
                        mesh.keys.push(key);
                        (mesh.vertices.len() - 1) as u32
                    })
                });
                mesh.triangles.push(ids);
            }
        }
        mesh
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    fn edge_uses(&self) -> HashMap<(u32, u32), usize> {
        let mut uses: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &self.triangles {
            for i in 0..3 {
                let (a, b) = (t[i], t[(i + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        uses
    }

    /// Edges used by exactly one triangle.
    pub fn open_edges(&self) -> usize {
        self.edge_uses().values().filter(|n| **n == 1).count()
    }

    /// ASCII PLY with per-vertex color and a `motion` property (meters).
    pub fn to_ply(&self) -> String {
        let mut s = String::new();
        s.push_str("ply\nformat ascii 1.0\n");
        let _ = writeln!(s, "element vertex {}", self.vertices.len());
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        s.push_str("property float motion\n");
        let _ = writeln!(s, "element face {}", self.triangles.len());
        s.push_str("property list uchar int vertex_indices\nend_header\n");
        for v in &self.vertices {
            let p = v.position;
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                p[0] as f32, p[1] as f32, p[2] as f32, v.rgb[0], v.rgb[1], v.rgb[2], v.motion as f32
            );
        }
        for t in &self.triangles {
            let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_header_counts() {
        let m = Mesh {
            vertices: vec![
                MeshVertex {
                    position: [0.0, 0.0, 0.0],
                    rgb: [1, 2, 3],
                    motion: 0.5,
                };
                3
            ],
            keys: vec![],
            triangles: vec![[0, 1, 2]],
        };
        let ply = m.to_ply();
        assert!(ply.contains("element vertex 3\n"));
        assert!(ply.contains("element face 1\n"));
        assert!(ply.ends_with("3 0 1 2\n"));
        assert!(ply.contains("0 0 0 1 2 3 0.5\n"));
        assert_eq!(m.open_edges(), 3);
    }
}
