use std::collections::BTreeSet;

use super::block_map::{BlockCoord, VoxelBlockMap, BLOCK_SIDE};
use crate::frame::Rgb;
use crate::geometry::{backproject, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::image::Grid;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub voxel_size: f64,
    /// Truncation distance μ, meters.
    pub truncation: f64,
    /// Weight cap for fully static pixels.
    pub w_max: f32,
    /// Weight cap for pixels at or above the dynamic threshold.
    pub w_dyn: f32,
    /// Weight of one observation.
    pub w_obs: f32,
    /// Dynamic threshold τ; the cap falls linearly from `w_max` at score 1 to `w_dyn` at τ.
    pub tau: f64,
    /// Pixels scoring above this carve their voxels out of the model.
    pub tau_sdf: f64,
    pub max_depth: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            truncation: 0.04,
            w_max: 5.0,
            w_dyn: 1.0,
            w_obs: 1.0,
            tau: 1.5,
            tau_sdf: 1.0,
            max_depth: 10.0,
        }
    }
}

/// Everything the integrator reads from one frame.
#[derive(Debug, Clone, Copy)]
pub struct FusionInput<'a, T> {
    pub depth: &'a Grid<T>,
    pub color: &'a Grid<Rgb>,
    /// Camera-to-world.
    pub pose: &'a Pose<T>,
    pub intr: &'a CameraIntrinsics<T>,
    /// Dynamicity score per pixel.
    pub scores: &'a Grid<T>,
    /// Accumulated motion per pixel, meters.
    pub accumulated: &'a Grid<T>,
    pub dynamic_mask: &'a Grid<bool>,
    pub frame_index: u64,
}

/// Weight cap for a pixel with dynamicity score `s`.
pub fn weight_cap(s: f64, p: &FusionParams) -> f32 {
    if s <= 1.0 {
        p.w_max
    } else if s >= p.tau {
        p.w_dyn
    } else {
        let f = (s - 1.0) / (p.tau - 1.0);
        (p.w_max as f64 + f * (p.w_dyn as f64 - p.w_max as f64)) as f32
    }
}

/// Block holding the voxel nearest to world point `p`.
pub fn block_for_voxel(p: [f64; 3], voxel_size: f64) -> BlockCoord {
    BlockCoord(p.map(|v| ((v / voxel_size).round() as i64).div_euclid(BLOCK_SIDE as i64) as i32))
}

/// Blocks crossed by the ray segment `origin + t·dir`, `t ∈ [t0, t1]`, in traversal order.
/// `dir` must be a unit vector.
pub fn ray_blocks(origin: [f64; 3], dir: [f64; 3], t0: f64, t1: f64, voxel_size: f64) -> Vec<BlockCoord> {
    let side = BLOCK_SIDE as f64;
    // block-grid coordinates: block b spans [b, b+1)
    let to_grid = |t: f64| -> [f64; 3] {
        let mut r = [0.0; 3];
        for a in 0..3 {
            r[a] = ((origin[a] + t * dir[a]) / voxel_size + 0.5) / side;
        }
        r
    };
    let start = to_grid(t0);
    let mut cell = start.map(|v| v.floor() as i64);
    let scale = 1.0 / (voxel_size * side);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let d = dir[a] * scale;
        if d > 0.0 {
            step[a] = 1;
            t_delta[a] = 1.0 / d;
            t_max[a] = t0 + ((cell[a] + 1) as f64 - start[a]) / d;
        } else if d < 0.0 {
            step[a] = -1;
            t_delta[a] = -1.0 / d;
            t_max[a] = t0 + (start[a] - cell[a] as f64) / -d;
        }
    }
    let mut out = vec![BlockCoord(cell.map(|c| c as i32))];
    loop {
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).unwrap();
        if t_max[a] > t1 {
            break;
        }
        cell[a] += step[a];
        t_max[a] += t_delta[a];
        out.push(BlockCoord(cell.map(|c| c as i32)));
    }
    out
}

fn integrates<T: Real>(input: &FusionInput<'_, T>, x: usize, y: usize, p: &FusionParams) -> bool {
    !*input.dynamic_mask.get(x, y) && input.scores.get(x, y).as_f64() <= p.tau_sdf
}

/// Allocates the blocks around every integrating pixel's measurement.
///
/// Returns the touched coordinates (sorted, unique) and how many were new.
pub fn allocate_blocks<T: Real>(
    input: &FusionInput<'_, T>,
    map: &mut VoxelBlockMap,
    p: &FusionParams,
) -> (Vec<BlockCoord>, usize) {
    let origin = input.pose.translation.cast::<f64>().to_array();
    let mut touched = BTreeSet::new();
    for (x, y, d) in input.depth.iter_xy() {
        let d = d.as_f64();
        if d <= 0.0 || d > p.max_depth || !integrates(input, x, y, p) {
            continue;
        }
        let u = Vec2::new(T::lit(x as f64), T::lit(y as f64));
        let Ok(pc) = backproject(u, T::lit(d), input.intr) else { continue };
        let pc = pc.cast::<f64>();
        let dist = pc.norm();
        let dir_cam = pc * (1.0 / dist);
        let dir = input.pose.cast::<f64>().rotate(dir_cam).to_array();
        let t0 = (dist - p.truncation).max(0.0);
        touched.extend(ray_blocks(origin, dir, t0, dist + p.truncation, p.voxel_size));
    }
    let mut created = 0;
    for c in &touched {
        if map.get_or_allocate(*c).1 {
            created += 1;
        }
    }
    (touched.into_iter().collect(), created)
}

fn block_visible(coord: BlockCoord, world_to_cam: &Pose<f64>, intr: &CameraIntrinsics<f64>, p: &FusionParams) -> bool {
    let vs = p.voxel_size;
    let o = coord.origin_voxel();
    let lo = [0, 1, 2].map(|a| (o[a] as f64 - 0.5) * vs);
    let hi = [0, 1, 2].map(|a| (o[a] as f64 + BLOCK_SIDE as f64 - 0.5) * vs);
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut zmin = f64::INFINITY;
    for c in 0..8 {
        let w = Vec3::new(
            if c & 1 == 0 { lo[0] } else { hi[0] },
            if c & 2 == 0 { lo[1] } else { hi[1] },
            if c & 4 == 0 { lo[2] } else { hi[2] },
        );
        let q = world_to_cam.transform_point(w);
        zmin = zmin.min(q.z);
        if q.z <= 1e-6 {
            // straddles the camera plane: keep
            return true;
        }
        let (u, v) = (intr.fx * q.x / q.z + intr.cx, intr.fy * q.y / q.z + intr.cy);
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    zmin <= p.max_depth + p.truncation
        && umax >= -0.5
        && vmax >= -0.5
        && umin <= intr.width as f64 - 0.5
        && vmin <= intr.height as f64 - 0.5
}

/// Fuses one frame into the model; returns the blocks whose voxels changed.
///
/// For every voxel in front of (or within μ behind) the measurement it
/// projects onto: pixels scoring above `tau_sdf` carve the voxel (sdf −1,
/// weight 0, reaching one voxel diagonal further back), dynamic pixels are
/// skipped, everything else updates a capped running average.
pub fn integrate<T: Real>(input: &FusionInput<'_, T>, map: &mut VoxelBlockMap, p: &FusionParams) -> BTreeSet<BlockCoord> {
    allocate_blocks(input, map, p);
    let intr = input.intr.cast::<f64>();
    let world_to_cam = input.pose.cast::<f64>().inverse();
    let (w, h) = (intr.width, intr.height);
    let mu = p.truncation;
    let vs = p.voxel_size;
    let carve_slack = vs * 3f64.sqrt();
    let mut dirty = BTreeSet::new();

    for block in map.iter_mut() {
        if !block_visible(block.coord, &world_to_cam, &intr, p) {
            continue;
        }
        let o = block.coord.origin_voxel();
        let mut changed = false;
        for z in 0..BLOCK_SIDE {
            for y in 0..BLOCK_SIDE {
                for x in 0..BLOCK_SIDE {
                    let g = [o[0] + x as i64, o[1] + y as i64, o[2] + z as i64];
                    let pw = Vec3::new(g[0] as f64 * vs, g[1] as f64 * vs, g[2] as f64 * vs);
                    let pc = world_to_cam.transform_point(pw);
                    if pc.z <= 0.0 {
                        continue;
                    }
                    // nearest pixel, rounding half up
                    let u = intr.fx * pc.x / pc.z + intr.cx + 0.5;
                    let v = intr.fy * pc.y / pc.z + intr.cy + 0.5;
                    if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
                        continue;
                    }
                    let (px, py) = (u as usize, v as usize);
                    let d = input.depth.get(px, py).as_f64();
                    if d <= 0.0 {
                        continue;
                    }
                    let eta = d - pc.z;
                    let score = input.scores.get(px, py).as_f64();
                    let carve = score > p.tau_sdf;
                    // a voxel fused from a neighbouring ray can sit just past the band
                    if eta < -mu - if carve { carve_slack } else { 0.0 } {
                        continue;
                    }
                    let vox = block.voxel_mut(x, y, z);
                    if carve {
                        if vox.sdf != -1.0 || vox.weight != 0.0 {
                            vox.sdf = -1.0;
                            vox.weight = 0.0;
                            changed = true;
                        }
                        continue;
                    }
                    if *input.dynamic_mask.get(px, py) {
                        continue;
                    }
                    let sdf_new = (eta / mu).clamp(-1.0, 1.0) as f32;
                    let cap = weight_cap(score, p);
                    let w_old = vox.weight;
                    let total = w_old + p.w_obs;
                    let fused = (w_old * vox.sdf + p.w_obs * sdf_new) / total;
                    let c_new = *input.color.get(px, py);
                    let mut color = vox.color;
                    for k in 0..3 {
                        color[k] = ((w_old * vox.color[k] as f32 + p.w_obs * c_new[k] as f32) / total + 0.5) as u8;
                    }
                    let weight = total.min(cap);
                    let motion = vox.motion.max(input.accumulated.get(px, py).as_f32());
                    let next = super::TsdfVoxel {
                        sdf: fused.clamp(-1.0, 1.0),
                        weight,
                        color,
                        motion,
                    };
                    if next != *vox {
                        *vox = next;
                        changed = true;
                    }
                }
            }
        }
        if changed {
            block.dirty = true;
            block.last_update = input.frame_index;
            dirty.insert(block.coord);
        }
    }
    dirty
}
