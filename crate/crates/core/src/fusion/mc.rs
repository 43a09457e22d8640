//! Marching Cubes over voxel blocks.
//!
//! The triangle table is derived at first use from face-by-face contour
//! tracing. On every cube face the crossings are connected so that inside
//! corners stay separated; both cells sharing a face therefore agree on its
//! contour and the mesh is closed across cell and block seams.

use std::sync::OnceLock;

use thiserror::Error;

use super::block_map::{BlockCoord, TsdfVoxel, VoxelBlock, VoxelBlockMap, BLOCK_SIDE};
use super::mesh::{MeshVertex, VertexKey};
use crate::frame::Rgb;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum McError {
    #[error("block {0:?} does not exist")]
    MissingBlock(BlockCoord),
}

/// Corner `c` of a cell sits at offset `(c & 1, c >> 1 & 1, c >> 2 & 1)`.
pub fn corner_offset(c: usize) -> [i64; 3] {
    [(c & 1) as i64, (c >> 1 & 1) as i64, (c >> 2 & 1) as i64]
}

/// Cell edges as corner pairs, lower corner first. Edges 0–3 run along x,
/// 4–7 along y, 8–11 along z.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Cube faces, corners counter-clockwise seen from outside the cell.
const FACES: [[usize; 4]; 6] = [
    [0, 4, 6, 2],
    [1, 3, 7, 5],
    [0, 1, 5, 4],
    [2, 6, 7, 3],
    [0, 2, 3, 1],
    [4, 5, 7, 6],
];

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    EDGES.iter().position(|e| *e == (lo, hi)).expect("corners share an edge")
}

pub fn edge_axis(e: usize) -> usize {
    e / 4
}

/// Edges whose endpoints straddle the surface for a case.
pub fn active_edges(case: u8) -> impl Iterator<Item = usize> {
    (0..12).filter(move |e| {
        let (a, b) = EDGES[*e];
        (case >> a & 1) != (case >> b & 1)
    })
}

fn edge_midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (pa, pb) = (corner_offset(a), corner_offset(b));
    [0, 1, 2].map(|i| (pa[i] + pb[i]) as f64 * 0.5)
}

fn build_case(case: u8) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut next: [Option<usize>; 12] = [None; 12];
    for face in FACES {
        let n_in = face.iter().filter(|c| inside(**c)).count();
        if n_in == 0 || n_in == 4 {
            continue;
        }
        for s in 0..4 {
            let before = face[(s + 3) % 4];
            if !(inside(face[s]) && !inside(before)) {
                continue;
            }
            let mut e = s;
            while inside(face[(e + 1) % 4]) {
                e = (e + 1) % 4;
            }
            let entry = edge_between(before, face[s]);
            let exit = edge_between(face[e], face[(e + 1) % 4]);
            debug_assert!(next[entry].is_none());
            next[entry] = Some(exit);
        }
    }

    let mut used = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if used[start] || next[start].is_none() {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut cur = next[start].unwrap();
        while cur != start {
            used[cur] = true;
            lp.push(cur);
            cur = next[cur].expect("contour segments form closed loops");
        }
        // orient so the normal points from inside corners to outside ones
        let pts: Vec<[f64; 3]> = lp.iter().map(|e| edge_midpoint(*e)).collect();
        let mut normal = [0.0; 3];
        for i in 0..pts.len() {
            let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut outward = [0.0; 3];
        for e in &lp {
            let (a, b) = EDGES[*e];
            let (pin, pout) = if inside(a) { (a, b) } else { (b, a) };
            let (pi, po) = (corner_offset(pin), corner_offset(pout));
            for k in 0..3 {
                outward[k] += (po[k] - pi[k]) as f64;
            }
        }
        let dot: f64 = (0..3).map(|k| normal[k] * outward[k]).sum();
        if dot < 0.0 {
            lp.reverse();
        }
        for i in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[i] as u8, lp[i + 1] as u8]);
        }
    }
    tris
}

/// Triangles (as edge ids) for every case.
pub fn triangle_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..=255u8).map(build_case).collect())
}

/// Interpolated sample on one active edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct McEdge {
    /// Position along the edge from its lower corner, `t/255`.
    pub t: u8,
    pub rgb: Rgb,
    /// Accumulated motion, millimeters.
    pub motion_mm: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct McCell {
    /// `x + 8y + 64z` of the cell's lower corner within the block.
    pub index: u16,
    pub case: u8,
    /// One sample per active edge of `case`, ascending edge id.
    pub edges: Vec<McEdge>,
}

impl McCell {
    pub fn local(&self) -> [usize; 3] {
        let i = self.index as usize;
        [i % BLOCK_SIDE, i / BLOCK_SIDE % BLOCK_SIDE, i / (BLOCK_SIDE * BLOCK_SIDE)]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct McBlock {
    pub coord: BlockCoord,
    pub cells: Vec<McCell>,
}

impl McBlock {
    pub fn empty(coord: BlockCoord) -> Self {
        Self { coord, cells: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Rebuilds the block's triangles; vertices are keyed by the global edge they lie on.
    pub fn triangles(&self, voxel_size: f64) -> Vec<[(VertexKey, MeshVertex); 3]> {
        let table = triangle_table();
        let origin = self.coord.origin_voxel();
        let mut out = Vec::new();
        for cell in &self.cells {
            let l = cell.local();
            let g = [0, 1, 2].map(|k| origin[k] + l[k] as i64);
            let mut slots: [Option<(VertexKey, MeshVertex)>; 12] = [None; 12];
            for (e, sample) in active_edges(cell.case).zip(&cell.edges) {
                let (a, _) = EDGES[e];
                let axis = edge_axis(e);
                let off = corner_offset(a);
                let lower = [0, 1, 2].map(|k| g[k] + off[k]);
                let t = sample.t as f64 / 255.0;
                let mut pos = lower.map(|v| v as f64 * voxel_size);
                pos[axis] += t * voxel_size;
                slots[e] = Some((
                    VertexKey {
                        voxel: lower,
                        axis: axis as u8,
                    },
                    MeshVertex {
                        position: pos,
                        rgb: sample.rgb,
                        motion: sample.motion_mm as f64 / 1000.0,
                    },
                ));
            }
            for tri in &table[cell.case as usize] {
                let v = tri.map(|e| slots[e as usize]);
                if let [Some(a), Some(b), Some(c)] = v {
                    out.push([a, b, c]);
                }
            }
        }
        out
    }
}

/// Half-up rounding of a non-negative value; cheaper than `f64::round`.
#[inline]
fn round_nonneg(v: f64) -> f64 {
    ((v + 0.5) as u64) as f64
}

fn lerp_u8(a: u8, b: u8, t: f64) -> u8 {
    round_nonneg((a as f64 + (b as f64 - a as f64) * t).clamp(0.0, 255.0)) as u8
}

/// Extracts the cells of one block. Cells reaching into the upper neighbours
/// read their voxels; a missing neighbour or any zero-weight corner leaves a
/// cell inactive.
pub fn extract_mc_block(map: &VoxelBlockMap, coord: BlockCoord) -> Result<McBlock, McError> {
    let block = map.get(coord).ok_or(McError::MissingBlock(coord))?;
    let mut neighbours: [Option<&VoxelBlock>; 8] = [None; 8];
    for (n, slot) in neighbours.iter_mut().enumerate() {
        let o = corner_offset(n);
        *slot = if n == 0 {
            Some(block)
        } else {
            map.get(coord.offset(o[0] as i32, o[1] as i32, o[2] as i32))
        };
    }
    let s = BLOCK_SIDE;
    let p = s + 1;
    // Voxels of the block plus one layer of upper neighbours; `None` where unobserved.
    let mut grid: Vec<Option<&TsdfVoxel>> = vec![None; p * p * p];
    for z in 0..p {
        for y in 0..p {
            for x in 0..p {
                let n = (x / s) | (y / s) << 1 | (z / s) << 2;
                grid[x + p * (y + p * z)] = neighbours[n].map(|b| b.voxel(x % s, y % s, z % s)).filter(|v| v.weight > 0.0);
            }
        }
    }
    let corner_step: [usize; 8] = std::array::from_fn(|c| {
        let o = corner_offset(c);
        o[0] as usize + p * (o[1] as usize + p * o[2] as usize)
    });

    let mut cells = Vec::new();
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let base = x + p * (y + p * z);
                let mut corners = [TsdfVoxel::default(); 8];
                let mut case = 0u8;
                let mut active = true;
                for c in 0..8 {
                    match grid[base + corner_step[c]] {
                        Some(v) => {
                            corners[c] = *v;
                            case |= ((v.sdf < 0.0) as u8) << c;
                        }
                        None => {
                            active = false;
                            break;
                        }
                    }
                }
                if !active || case == 0 || case == 255 {
                    continue;
                }
                let edges = active_edges(case)
                    .map(|e| {
                        let (a, b) = EDGES[e];
                        let (va, vb) = (corners[a], corners[b]);
                        let t = (va.sdf as f64 / (va.sdf as f64 - vb.sdf as f64)).clamp(0.0, 1.0);
                        let q = round_nonneg(t * 255.0) as u8;
                        let tq = q as f64 / 255.0;
                        let motion = va.motion as f64 + (vb.motion as f64 - va.motion as f64) * tq;
                        McEdge {
                            t: q,
                            rgb: [0, 1, 2].map(|k| lerp_u8(va.color[k], vb.color[k], tq)),
                            motion_mm: round_nonneg((motion * 1000.0).clamp(0.0, u16::MAX as f64)) as u16,
                        }
                    })
                    .collect();
                cells.push(McCell {
                    index: VoxelBlock::index(x, y, z) as u16,
                    case,
                    edges,
                });
            }
        }
    }
    Ok(McBlock { coord, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Mesh;
    use std::collections::HashMap;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(triangle_table()[0].is_empty());
        assert!(triangle_table()[255].is_empty());
    }

    #[test]
    fn single_corner_case_is_one_triangle() {
        for c in 0..8 {
            let tris = &triangle_table()[1 << c];
            assert_eq!(tris.len(), 1);
            let mut edges: Vec<u8> = tris[0].to_vec();
            edges.sort();
            let expected: Vec<u8> = (0..12).filter(|e| EDGES[*e].0 == c || EDGES[*e].1 == c).map(|e| e as u8).collect();
            assert_eq!(edges, expected);
        }
    }

    #[test]
    fn every_case_uses_exactly_its_active_edges_and_is_locally_closed() {
        for case in 0..=255u8 {
            let tris = &triangle_table()[case as usize];
            let mut used: Vec<usize> = tris.iter().flatten().map(|e| *e as usize).collect();
            used.sort();
            used.dedup();
            assert_eq!(used, active_edges(case).collect::<Vec<_>>(), "case {case}");
            // every triangle edge lies on a cube face (boundary, once) or inside the cell (twice)
            let mut count: HashMap<(u8, u8), usize> = HashMap::new();
            for t in tris {
                for i in 0..3 {
                    let (a, b) = (t[i], t[(i + 1) % 3]);
                    *count.entry((a.min(b), a.max(b))).or_default() += 1;
                }
            }
            let on_face = |a: u8, b: u8| {
                FACES.iter().any(|f| {
                    let fe: Vec<usize> = (0..4).map(|i| edge_between(f[i], f[(i + 1) % 4])).collect();
                    fe.contains(&(a as usize)) && fe.contains(&(b as usize))
                })
            };
            for ((a, b), n) in count {
                if on_face(a, b) {
                    assert!(n == 1 || n == 2, "case {case} edge {a}-{b} used {n}");
                } else {
                    assert_eq!(n, 2, "case {case} interior edge {a}-{b}");
                }
            }
        }
    }

    #[test]
    fn triangles_face_the_outside() {
        for case in 1..255u8 {
            for t in &triangle_table()[case as usize] {
                let p = t.map(|e| edge_midpoint(e as usize));
                let u = [0, 1, 2].map(|k| p[1][k] - p[0][k]);
                let v = [0, 1, 2].map(|k| p[2][k] - p[0][k]);
                let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
                let mut grad = [0.0; 3];
                for c in 0..8 {
                    let sign = if case >> c & 1 == 1 { -1.0 } else { 1.0 };
                    let o = corner_offset(c);
                    for k in 0..3 {
                        grad[k] += sign * (o[k] as f64 - 0.5);
                    }
                }
                let dot: f64 = (0..3).map(|k| n[k] * grad[k]).sum();
                if case.count_ones() == 1 || case.count_ones() == 7 {
                    assert!(dot > 0.0, "case {case}");
                }
            }
        }
    }

    fn sphere_map(center: [f64; 3], radius: f64, vs: f64, mu: f64) -> VoxelBlockMap {
        let mut map = VoxelBlockMap::new(vs, mu);
        let reach = ((radius + 2.0 * mu) / vs / BLOCK_SIDE as f64).ceil() as i32 + 1;
        let cb = center.map(|c| (c / vs / BLOCK_SIDE as f64).floor() as i32);
        for bz in -reach..=reach {
            for by in -reach..=reach {
                for bx in -reach..=reach {
                    let coord = BlockCoord::new(cb[0] + bx, cb[1] + by, cb[2] + bz);
                    let mut b = VoxelBlock::new(coord);
                    let o = coord.origin_voxel();
                    for z in 0..BLOCK_SIDE {
                        for y in 0..BLOCK_SIDE {
                            for x in 0..BLOCK_SIDE {
                                let p = [o[0] + x as i64, o[1] + y as i64, o[2] + z as i64].map(|v| v as f64 * vs);
                                let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt()
                                    - radius;
                                let v = b.voxel_mut(x, y, z);
                                v.sdf = (d / mu).clamp(-1.0, 1.0) as f32;
                                v.weight = 1.0;
                                v.color = [255, 0, 0];
                            }
                        }
                    }
                    map.insert(b);
                }
            }
        }
        map
    }

    #[test]
    fn sphere_is_accurate_and_watertight() {
        let (center, radius, vs) = ([0.013, -0.021, 0.5], 0.1, 0.01);
        let map = sphere_map(center, radius, vs, 0.04);
        let blocks: Vec<McBlock> = map.coords_sorted().into_iter().map(|c| extract_mc_block(&map, c).unwrap()).collect();
        let mesh = Mesh::from_blocks(blocks.iter(), vs);
        assert!(mesh.triangles.len() > 1000);
        for v in &mesh.vertices {
            let p = v.position;
            let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt();
            assert!((d - radius).abs() < vs, "vertex {d}");
        }
        assert_eq!(mesh.open_edges(), 0);
        // triangles straddle several blocks
        let touching = blocks.iter().filter(|b| !b.is_empty()).count();
        assert!(touching > 8);
    }

    #[test]
    fn missing_block_is_an_error() {
        let map = VoxelBlockMap::new(0.01, 0.04);
        assert_eq!(
            extract_mc_block(&map, BlockCoord::new(0, 0, 0)),
            Err(McError::MissingBlock(BlockCoord::new(0, 0, 0)))
        );
    }

    #[test]
    fn positive_block_emits_nothing() {
        let mut map = VoxelBlockMap::new(0.01, 0.04);
        let (b, _) = map.get_or_allocate(BlockCoord::new(0, 0, 0));
        for v in b.voxels.iter_mut() {
            v.weight = 1.0;
            v.sdf = 0.5;
        }
        assert!(extract_mc_block(&map, BlockCoord::new(0, 0, 0)).unwrap().is_empty());
    }

    #[test]
    fn one_negative_corner_gives_one_triangle() {
        let mut map = VoxelBlockMap::new(0.01, 0.04);
        let (b, _) = map.get_or_allocate(BlockCoord::new(0, 0, 0));
        for v in b.voxels.iter_mut() {
            v.weight = 1.0;
            v.sdf = 0.5;
        }
        b.voxel_mut(3, 3, 3).sdf = -0.5;
        let mc = extract_mc_block(&map, BlockCoord::new(0, 0, 0)).unwrap();
        // the voxel is a corner of 8 cells
        assert_eq!(mc.cells.len(), 8);
        for cell in &mc.cells {
            assert_eq!(cell.case.count_ones(), 1);
            assert_eq!(cell.edges.len(), 3);
            assert!(cell.edges.iter().all(|e| e.t == 128 || e.t == 127));
        }
        let mesh = Mesh::from_blocks([&mc], 0.01);
        assert_eq!(mesh.triangles.len(), 8);
        assert_eq!(mesh.vertices.len(), 6);
        assert_eq!(mesh.open_edges(), 0);
    }

    #[test]
    fn zero_weight_corner_deactivates_cell() {
        let mut map = VoxelBlockMap::new(0.01, 0.04);
        let (b, _) = map.get_or_allocate(BlockCoord::new(0, 0, 0));
        for v in b.voxels.iter_mut() {
            v.weight = 1.0;
            v.sdf = 0.5;
        }
        b.voxel_mut(3, 3, 3).sdf = -0.5;
        b.voxel_mut(4, 4, 4).weight = 0.0;
        let mc = extract_mc_block(&map, BlockCoord::new(0, 0, 0)).unwrap();
        assert_eq!(mc.cells.len(), 7);
    }
}
