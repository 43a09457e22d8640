//! Camera tracking by projective point-to-plane ICP, and the flow fields
//! induced by camera motion alone.

use crate::frame::{FlowField, RgbdFrame};
use crate::geometry::{backproject, project, CameraIntrinsics, Pose, Vec2, Vec3};
use crate::image::Grid;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryParams {
    /// Iterations per pyramid level, finest level first.
    pub iterations: Vec<usize>,
    /// Correspondences further apart than this (meters) are rejected.
    pub max_distance: f64,
    /// Correspondences whose normals differ by more than this (degrees) are rejected.
    pub max_normal_angle_deg: f64,
    pub min_valid_pixels: usize,
    /// Minimum inlier correspondences at the finest level for a converged result.
    pub min_inliers: usize,
    /// Stop iterating a level once the update norm falls below this.
    pub update_epsilon: f64,
    /// Maximum depth jump (meters) between neighbours used for normals and downsampling.
    pub max_depth_jump: f64,
}

impl Default for OdometryParams {
    fn default() -> Self {
        Self {
            iterations: vec![10, 5, 4],
            max_distance: 0.05,
            max_normal_angle_deg: 30.0,
            min_valid_pixels: 1000,
            min_inliers: 100,
            update_epsilon: 1e-9,
            max_depth_jump: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OdometryFailure {
    InsufficientDepth { prev: usize, cur: usize },
    TooFewInliers(usize),
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdometryResult<T> {
    /// Motion of the current camera expressed in the previous camera frame.
    pub relative: Pose<T>,
    /// `previous ∘ relative`, camera-to-world.
    pub absolute: Pose<T>,
    pub converged: bool,
    /// Point-to-plane RMS of the final iteration (meters).
    pub rms: T,
    pub failure: Option<OdometryFailure>,
}

impl<T: Real> OdometryResult<T> {
    /// Wraps externally known poses (ground-truth bypass).
    pub fn from_poses(previous: &Pose<T>, absolute: Pose<T>) -> Self {
        Self {
            relative: previous.inverse().compose(&absolute),
            absolute,
            converged: true,
            rms: T::zero(),
            failure: None,
        }
    }
}

/// Folds relative motions into absolute poses; the first frame is the world origin.
#[derive(Debug, Clone, Default)]
pub struct PoseTrack<T> {
    poses: Vec<Pose<T>>,
}

impl<T: Real> PoseTrack<T> {
    pub fn new() -> Self {
        Self {
            poses: vec![Pose::identity()],
        }
    }

    pub fn push_relative(&mut self, relative: &Pose<T>) -> Pose<T> {
        let next = self.latest().compose(relative);
        self.poses.push(next);
        next
    }

    pub fn latest(&self) -> Pose<T> {
        *self.poses.last().expect("track always has the origin pose")
    }

    pub fn poses(&self) -> &[Pose<T>] {
        &self.poses
    }
}

struct Level<T> {
    intr: CameraIntrinsics<T>,
    depth: Grid<T>,
    vertices: Grid<Option<Vec3<T>>>,
    normals: Grid<Option<Vec3<T>>>,
}

fn downsample<T: Real>(depth: &Grid<T>, max_jump: T) -> Grid<T> {
    let (w, h) = (depth.width() / 2, depth.height() / 2);
    Grid::from_fn(w, h, |x, y| {
        let taps = [
            *depth.get(2 * x, 2 * y),
            *depth.get(2 * x + 1, 2 * y),
            *depth.get(2 * x, 2 * y + 1),
            *depth.get(2 * x + 1, 2 * y + 1),
        ];
        if taps.iter().any(|d| *d <= T::zero()) {
            return T::zero();
        }
        let lo = taps.iter().fold(T::infinity(), |a, b| a.min(*b));
        let hi = taps.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
        if hi - lo > max_jump {
            return T::zero();
        }
        taps.iter().copied().sum::<T>() * T::lit(0.25)
    })
}

fn build_level<T: Real>(depth: Grid<T>, intr: CameraIntrinsics<T>, max_jump: T) -> Level<T> {
    let vertices = Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let u = Vec2::new(T::lit(x as f64), T::lit(y as f64));
        backproject(u, *depth.get(x, y), &intr).ok()
    });
    let normals = vertex_normals(&vertices, max_jump);
    Level {
        intr,
        depth,
        vertices,
        normals,
    }
}

/// Normals from central differences of the vertex map, oriented towards the camera.
pub fn vertex_normals<T: Real>(vertices: &Grid<Option<Vec3<T>>>, max_jump: T) -> Grid<Option<Vec3<T>>> {
    let (w, h) = vertices.dims();
    Grid::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x + 1 >= w || y + 1 >= h {
            return None;
        }
        let c = (*vertices.get(x, y))?;
        let l = (*vertices.get(x - 1, y))?;
        let r = (*vertices.get(x + 1, y))?;
        let u = (*vertices.get(x, y - 1))?;
        let d = (*vertices.get(x, y + 1))?;
        for n in [l, r, u, d] {
            if (n.z - c.z).abs() > max_jump {
                return None;
            }
        }
        let n = (r - l).cross(d - u).normalized()?;
        Some(if n.dot(c) > T::zero() { -n } else { n })
    })
}

fn pyramid<T: Real>(depth: &Grid<T>, intr: &CameraIntrinsics<T>, levels: usize, max_jump: T) -> Vec<Level<T>> {
    let mut out = Vec::with_capacity(levels);
    let mut d = depth.clone();
    let mut k = *intr;
    for i in 0..levels {
        if i > 0 {
            d = downsample(&d, max_jump);
            k = k.half();
        }
        out.push(build_level(d.clone(), k, max_jump));
    }
    out
}

/// Solves the 6×6 system `a·x = b` by Gaussian elimination with partial pivoting.
pub fn solve6(mut a: [[f64; 6]; 6], mut b: [f64; 6]) -> Option<[f64; 6]> {
    for col in 0..6 {
        let pivot = (col..6).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..6 {
            let f = a[row][col] / a[col][col];
            for k in col..6 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 6];
    for row in (0..6).rev() {
        let mut s = b[row];
        for k in row + 1..6 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

struct Step {
    update: Option<[f64; 6]>,
    inliers: usize,
    rms: f64,
}

fn icp_step<T: Real>(prev: &Level<T>, cur: &Level<T>, xi: &Pose<T>, params: &OdometryParams) -> Step {
    let cos_max = params.max_normal_angle_deg.to_radians().cos();
    let mut ata = [[0.0f64; 6]; 6];
    let mut atb = [0.0f64; 6];
    let mut sq = 0.0;
    let mut inliers = 0usize;
    for (x, y, v) in cur.vertices.iter_xy() {
        let (Some(v), Some(nc)) = (*v, *cur.normals.get(x, y)) else {
            continue;
        };
        let p = xi.transform_point(v);
        let Ok(uv) = project(p, &prev.intr) else { continue };
        let Some((px, py)) = prev.intr.nearest_pixel(uv) else {
            continue;
        };
        let (Some(q), Some(n)) = (*prev.vertices.get(px, py), *prev.normals.get(px, py)) else {
            continue;
        };
        if (p - q).norm().as_f64() > params.max_distance {
            continue;
        }
        if xi.rotate(nc).dot(n).as_f64() < cos_max {
            continue;
        }
        let (p, q, n) = (p.cast::<f64>(), q.cast::<f64>(), n.cast::<f64>());
        let r = n.dot(p - q);
        let pn = p.cross(n);
        let j = [pn.x, pn.y, pn.z, n.x, n.y, n.z];
        for a in 0..6 {
            for b in 0..6 {
                ata[a][b] += j[a] * j[b];
            }
            atb[a] -= j[a] * r;
        }
        sq += r * r;
        inliers += 1;
    }
    let rms = if inliers > 0 { (sq / inliers as f64).sqrt() } else { f64::INFINITY };
    let update = if inliers >= 6 { solve6(ata, atb) } else { None };
    Step { update, inliers, rms }
}

/// Estimates the motion of `cur` relative to `prev` by coarse-to-fine ICP.
///
/// `previous` is the absolute pose of `prev`; `init` seeds the relative motion
/// and is returned unchanged when tracking fails.
pub fn estimate_pose<T: Real>(
    prev: &RgbdFrame<T>,
    cur: &RgbdFrame<T>,
    intr: &CameraIntrinsics<T>,
    previous: &Pose<T>,
    init: &Pose<T>,
    params: &OdometryParams,
) -> OdometryResult<T> {
    let fail = |failure| OdometryResult {
        relative: *init,
        absolute: previous.compose(init),
        converged: false,
        rms: T::infinity(),
        failure: Some(failure),
    };
    let (np, nc) = (prev.valid_depth_count(), cur.valid_depth_count());
    if np < params.min_valid_pixels || nc < params.min_valid_pixels {
        return fail(OdometryFailure::InsufficientDepth { prev: np, cur: nc });
    }

    let jump = T::lit(params.max_depth_jump);
    let levels = params.iterations.len().max(1);
    let prev_pyr = pyramid(&prev.depth, intr, levels, jump);
    let cur_pyr = pyramid(&cur.depth, intr, levels, jump);

    let mut xi = *init;
    let mut last = Step {
        update: None,
        inliers: 0,
        rms: f64::INFINITY,
    };
    for level in (0..levels).rev() {
        let iters = params.iterations.get(level).copied().unwrap_or(0);
        let (p, c) = (&prev_pyr[level], &cur_pyr[level]);
        if p.depth.width() < 3 || p.depth.height() < 3 {
            continue;
        }
        for _ in 0..iters {
            last = icp_step(p, c, &xi, params);
            let Some(d) = last.update else { break };
            let w = Vec3::new(T::lit(d[0]), T::lit(d[1]), T::lit(d[2]));
            let t = Vec3::new(T::lit(d[3]), T::lit(d[4]), T::lit(d[5]));
            xi = Pose::from_axis_angle(w, t).compose(&xi);
            let step = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step < params.update_epsilon {
                break;
            }
        }
    }

    // Score the final estimate at full resolution.
    let final_step = icp_step(&prev_pyr[0], &cur_pyr[0], &xi, params);
    if final_step.inliers < params.min_inliers {
        return fail(OdometryFailure::TooFewInliers(final_step.inliers));
    }
    if last.update.is_none() && last.inliers >= 6 {
        return fail(OdometryFailure::Degenerate);
    }
    OdometryResult {
        relative: xi,
        absolute: previous.compose(&xi),
        converged: true,
        rms: T::lit(final_step.rms),
        failure: None,
    }
}

/// Flow a fully static scene would show given only the camera motion.
///
/// Backward convention like the measured flow: the result points from pixel
/// `u` of the current frame to its position in the previous frame.
pub fn odometry_flow<T: Real>(
    depth: &Grid<T>,
    pose: &Pose<T>,
    prev_pose: &Pose<T>,
    intr: &CameraIntrinsics<T>,
) -> FlowField<T> {
    let rel = prev_pose.inverse().compose(pose);
    let (w, h) = depth.dims();
    let mut vectors = Grid::new(w, h, Vec2::zero());
    let mut valid = Grid::new(w, h, false);
    for (x, y, d) in depth.iter_xy() {
        let u = Vec2::new(T::lit(x as f64), T::lit(y as f64));
        let Ok(p) = backproject(u, *d, intr) else { continue };
        let Ok(q) = project(rel.transform_point(p), intr) else {
            continue;
        };
        // tolerate rounding at the image border
        let slack = T::lit(1e-6);
        let inside = q.x >= -slack
            && q.y >= -slack
            && q.x <= T::lit((w - 1) as f64) + slack
            && q.y <= T::lit((h - 1) as f64) + slack;
        if inside {
            vectors.set(x, y, q - u);
            valid.set(x, y, true);
        }
    }
    FlowField::exact(vectors, valid)
}

/// Depth at a subpixel position of a depth map.
///
/// Surfaces are treated as locally planar in inverse depth. Where the taps
/// around the query lie on one plane the lookup is bilinear. Otherwise each
/// corner's plane is extrapolated from taps outside the quad; at a crease the
/// visible plane is kept, at a depth discontinuity the nearest corner wins.
pub fn lookup_depth<T: Real>(depth: &Grid<T>, u: Vec2<T>) -> Option<T> {
    let (w, h) = depth.dims();
    if w == 0 || h == 0 {
        return None;
    }
    let max_x = T::lit((w - 1) as f64);
    let max_y = T::lit((h - 1) as f64);
    if !(u.x >= T::zero() && u.y >= T::zero() && u.x <= max_x && u.y <= max_y) {
        return None;
    }
    let inv = |x: i64, y: i64| -> Option<f64> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return None;
        }
        let d = depth.get(x as usize, y as usize).as_f64();
        (d > 0.0).then(|| 1.0 / d)
    };
    // second difference along a line of three taps; missing taps do not object
    let flat = |a: Option<f64>, b: Option<f64>, c: Option<f64>| match (a, b, c) {
        (Some(a), Some(b), Some(c)) => (a - 2.0 * b + c).abs() <= PLANAR_TOL * b,
        _ => true,
    };
    let (ux, uy) = (u.x.as_f64(), u.y.as_f64());
    let x0 = (ux.floor() as i64).min(w as i64 - 1);
    let y0 = (uy.floor() as i64).min(h as i64 - 1);
    let (x1, y1) = ((x0 + 1).min(w as i64 - 1), (y0 + 1).min(h as i64 - 1));
    let (fx, fy) = (ux - x0 as f64, uy - y0 as f64);
    let corners = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
    let taps: Vec<Option<f64>> = corners.iter().map(|&(x, y)| inv(x, y)).collect();

    if let [Some(a), Some(b), Some(c), Some(d)] = taps[..] {
        let hi = a.max(b).max(c).max(d);
        let mut planar = (a - b - c + d).abs() <= PLANAR_TOL * hi;
        for y in [y0, y1] {
            planar &= flat(inv(x0 - 1, y), inv(x0, y), inv(x1, y)) && flat(inv(x0, y), inv(x1, y), inv(x1 + 1, y));
        }
        for x in [x0, x1] {
            planar &= flat(inv(x, y0 - 1), inv(x, y0), inv(x, y1)) && flat(inv(x, y0), inv(x, y1), inv(x, y1 + 1));
        }
        if planar {
            let v = (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d;
            return Some(T::lit(1.0 / v));
        }
    }

    struct Plane {
        at: (i64, i64),
        value: f64,
        gx: f64,
        gy: f64,
        dist: f64,
    }
    impl Plane {
        fn eval(&self, x: f64, y: f64) -> f64 {
            self.value + self.gx * (x - self.at.0 as f64) + self.gy * (y - self.at.1 as f64)
        }
    }
    let mut planes: Vec<Plane> = Vec::new();
    for (k, &(cx, cy)) in corners.iter().enumerate() {
        let Some(ic) = taps[k] else { continue };
        let sx = if cx == x0 { -1 } else { 1 };
        let sy = if cy == y0 { -1 } else { 1 };
        let (ax, bx) = (inv(cx + sx, cy), inv(cx + 2 * sx, cy));
        let (ay, by) = (inv(cx, cy + sy), inv(cx, cy + 2 * sy));
        let (Some(ax), Some(ay)) = (ax, ay) else { continue };
        if bx.is_none() || by.is_none() || !flat(Some(ic), Some(ax), bx) || !flat(Some(ic), Some(ay), by) {
            continue;
        }
        let (dx, dy) = (ux - cx as f64, uy - cy as f64);
        planes.push(Plane {
            at: (cx, cy),
            value: ic,
            gx: (ax - ic) * sx as f64,
            gy: (ay - ic) * sy as f64,
            dist: dx * dx + dy * dy,
        });
    }
    planes.sort_by(|a, b| a.dist.total_cmp(&b.dist));

    let chosen = planes.first().map(|near| {
        let at_query = near.eval(ux, uy);
        let Some(other) = planes
            .iter()
            .find(|p| (p.eval(ux, uy) - at_query).abs() > PLANAR_TOL * at_query.abs())
        else {
            return at_query;
        };
        let (nx, ny) = (near.at.0 as f64, near.at.1 as f64);
        let (ox, oy) = (other.at.0 as f64, other.at.1 as f64);
        let gap_near = near.value - other.eval(nx, ny);
        let gap_other = near.eval(ox, oy) - other.value;
        if gap_near * gap_other < 0.0 {
            // The planes intersect between the corners: a crease. Concave creases
            // show the nearer plane, convex ones the farther.
            let alt = other.eval(ux, uy);
            if gap_other < 0.0 {
                at_query.max(alt)
            } else {
                at_query.min(alt)
            }
        } else {
            at_query
        }
    });
    if let Some(v) = chosen.filter(|v| *v > 0.0) {
        return Some(T::lit(1.0 / v));
    }
    inv(ux.round() as i64, uy.round() as i64).map(|v| T::lit(1.0 / v))
}

/// Relative tolerance on second differences of inverse depth for taps to count as coplanar.
const PLANAR_TOL: f64 = 1e-5;

/// World-space displacement of each pixel's surface point between frames.
///
/// Returns the per-pixel 3D flow and its validity; invalid pixels hold zero.
pub fn flow_3d<T: Real>(
    flow: &FlowField<T>,
    depth: &Grid<T>,
    prev_depth: &Grid<T>,
    pose: &Pose<T>,
    prev_pose: &Pose<T>,
    intr: &CameraIntrinsics<T>,
) -> (Grid<Vec3<T>>, Grid<bool>) {
    let (w, h) = depth.dims();
    let mut out = Grid::new(w, h, Vec3::zero());
    let mut valid = Grid::new(w, h, false);
    for (x, y, d) in depth.iter_xy() {
        if !*flow.valid.get(x, y) {
            continue;
        }
        let u = Vec2::new(T::lit(x as f64), T::lit(y as f64));
        let Ok(p) = backproject(u, *d, intr) else { continue };
        let v = u + *flow.vectors.get(x, y);
        let Some(dp) = lookup_depth(prev_depth, v) else {
            continue;
        };
        let Ok(q) = backproject(v, dp, intr) else { continue };
        out.set(x, y, pose.transform_point(p) - prev_pose.transform_point(q));
        valid.set(x, y, true);
    }
    (out, valid)
}
