//! A static tilted plane seen from a sliding camera, through the public
//! pipeline, in both scalar types.

use dynfuse_core::fusion::extract_mc_block;
use dynfuse_core::geometry::{CameraIntrinsics, Pose, Vec3};
use dynfuse_core::odometry::odometry_flow;
use dynfuse_core::perception::{FlowProvider, ProviderError, SegmentationProvider};
use dynfuse_core::pipeline::{PipelineParams, Reconstructor};
use dynfuse_core::frame::{FlowField, RgbdFrame};
use dynfuse_core::{DepthRange, Grid, Mesh, PoseSource, Real, RegionProposal};

const W: usize = 96;
const H: usize = 72;
const FRAMES: u64 = 12;

/// Plane `normal · p = offset` in world coordinates.
fn plane() -> ([f64; 3], f64) {
    let n: [f64; 3] = [0.0, 0.4, 1.0];
    let l = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    (n.map(|c| c / l), 1.2)
}

fn camera(k: u64) -> [f64; 3] {
    [0.01 * k as f64, -0.005 * k as f64, 0.0]
}

fn render<T: Real>(k: u64, intr: &CameraIntrinsics<f64>) -> RgbdFrame<T> {
    let (n, c) = plane();
    let t = camera(k);
    let depth = Grid::from_fn(W, H, |x, y| {
        let dir = [(x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0];
        let nd = n[0] * dir[0] + n[1] * dir[1] + n[2] * dir[2];
        T::lit((c - (n[0] * t[0] + n[1] * t[1] + n[2] * t[2])) / nd)
    });
    let color = Grid::from_fn(W, H, |x, y| [(x * 2) as u8, (y * 3) as u8, 90]);
    RgbdFrame::new(k, color, depth, k * 33_333, &intr.cast(), DepthRange::default()).unwrap()
}

struct NoObjects;

impl<T: Real> SegmentationProvider<T> for NoObjects {
    fn segment(&mut self, _: &RgbdFrame<T>) -> Result<Vec<RegionProposal>, ProviderError> {
        Ok(Vec::new())
    }
}

/// Exact flow of the rigid camera motion.
struct RigidFlow<T> {
    intr: CameraIntrinsics<T>,
}

impl<T: Real> FlowProvider<T> for RigidFlow<T> {
    fn flow(&mut self, cur: &RgbdFrame<T>, prev: &RgbdFrame<T>) -> FlowField<T> {
        odometry_flow(&cur.depth, &pose(cur.index), &pose(prev.index), &self.intr)
    }
}

fn pose<T: Real>(k: u64) -> Pose<T> {
    Pose::from_translation(Vec3::from_array(camera(k)).cast())
}

fn run<T: Real>() -> (f64, f64) {
    let intr = CameraIntrinsics::new(80.0, 80.0, 47.5, 35.5, W, H).unwrap();
    let params = PipelineParams::<T> {
        pose_source: PoseSource::External,
        ..PipelineParams::default()
    };
    let vs = params.fusion.voxel_size;
    let mut rec = Reconstructor::new(intr.cast::<T>(), params);
    let mut flow = RigidFlow { intr: intr.cast::<T>() };
    let mut max_motion = 0.0f64;
    for k in 0..FRAMES {
        let out = rec.process(render::<T>(k, &intr), &mut NoObjects, &mut flow, Some(&pose(k)));
        assert!(out.fused, "frame {k} not fused");
        assert_eq!(out.scores.dynamic_pixel_count(), 0, "frame {k}");
        for a in out.scores.accumulated.as_slice() {
            max_motion = max_motion.max(a.as_f64());
        }
    }
    let blocks: Vec<_> = rec.map().coords_sorted().into_iter().map(|c| extract_mc_block(rec.map(), c).unwrap()).collect();
    let mesh = Mesh::from_blocks(&blocks, vs);
    assert!(mesh.triangles.len() > 1000, "{} triangles", mesh.triangles.len());
    let (n, c) = plane();
    let sq: f64 = mesh
        .vertices
        .iter()
        .map(|v| (n[0] * v.position[0] + n[1] * v.position[1] + n[2] * v.position[2] - c).powi(2))
        .sum();
    let rms = (sq / mesh.vertices.len() as f64).sqrt();
    assert!(rms < vs / 2.0, "rms {rms}");
    (rms, max_motion)
}

#[test]
fn plane_is_reconstructed_within_half_a_voxel_in_f64() {
    let (_, motion) = run::<f64>();
    assert!(motion < 1e-2, "accumulated motion {motion}");
}

#[test]
fn plane_is_reconstructed_within_half_a_voxel_in_f32() {
    let (_, motion) = run::<f32>();
    assert!(motion < 1e-2, "accumulated motion {motion}");
}
