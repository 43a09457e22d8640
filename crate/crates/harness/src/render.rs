//! Analytic ray casting of scene scripts into RGB-D frames with exact
//! instance masks, poses and backward optical flow.

use dynfuse_core::frame::{FlowField, RgbdFrame};
use dynfuse_core::geometry::{project, CameraIntrinsics, Pose, Vec2, Vec3};
use dynfuse_core::{DepthRange, Grid, InstanceMap, InstanceMeta, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scene::SceneScript;

/// Everything known about one synthetic frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthFrame {
    pub frame: RgbdFrame<f64>,
    /// Camera-to-world.
    pub pose: Pose<f64>,
    pub instances: InstanceMap,
    /// Backward flow to the previous frame; all invalid for frame 0.
    pub flow: FlowField<f64>,
}

/// Per-pixel result of casting one frame, before sensor effects.
#[derive(Debug, Clone)]
pub struct Raycast {
    /// Exact z-depth in meters, 0 where nothing was hit.
    pub depth: Grid<f64>,
    /// Object index + 1, 0 where nothing was hit.
    pub hit: Grid<u16>,
    pub color: Grid<Rgb>,
    pub pose: Pose<f64>,
}

const LIGHT: [f64; 3] = [0.3, 0.8, -0.52];
const CHECKER: f64 = 0.1;
/// Keeps checker edges off the face planes of the bundled primitives.
const CHECKER_SHIFT: f64 = 0.0137;

fn shade(albedo: Rgb, normal: Vec3<f64>, local: Vec3<f64>) -> Rgb {
    let l = Vec3::from_array(LIGHT).normalized().unwrap();
    let lambert = 0.35 + 0.65 * normal.dot(l).abs();
    let cell = local.to_array().iter().map(|v| ((v + CHECKER_SHIFT) / CHECKER).floor() as i64).sum::<i64>();
    let checker = if cell.rem_euclid(2) == 0 { 1.0 } else { 0.8 };
    albedo.map(|c| (c as f64 * lambert * checker).round().clamp(0.0, 255.0) as u8)
}

pub fn raycast(script: &SceneScript, k: usize, intr: &CameraIntrinsics<f64>) -> Raycast {
    let pose = script.camera_pose(k);
    let poses: Vec<(Pose<f64>, Pose<f64>)> = script
        .objects
        .iter()
        .map(|o| {
            let p = o.pose_at(k as f64);
            (p, p.inverse())
        })
        .collect();
    let (w, h) = (intr.width, intr.height);
    let mut depth = Grid::new(w, h, 0.0);
    let mut hit = Grid::new(w, h, 0u16);
    let mut color = Grid::new(w, h, [0u8; 3]);
    let origin = pose.translation;
    for y in 0..h {
        for x in 0..w {
            // unit z in the camera frame, so the ray parameter is the z-depth
            let d_cam = Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let dir = pose.rotate(d_cam);
            let mut best: Option<(f64, usize, Vec3<f64>, Vec3<f64>)> = None;
            for (i, o) in script.objects.iter().enumerate() {
                if let Some((t, n, local)) = o.hit(&poses[i].0, &poses[i].1, origin, dir) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, i, n, local));
                    }
                }
            }
            if let Some((t, i, n, local)) = best {
                depth.set(x, y, t);
                hit.set(x, y, i as u16 + 1);
                color.set(x, y, shade(script.objects[i].albedo, n, local));
            }
        }
    }
    Raycast { depth, hit, color, pose }
}

/// Sensor model: optional depth noise, range gating and f32 storage precision.
fn sensor_depth(script: &SceneScript, k: usize, exact: &Grid<f64>, range: DepthRange) -> Grid<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    exact.map(|d| {
        if *d <= 0.0 {
            return 0.0;
        }
        let mut z = *d;
        if script.depth_noise > 0.0 {
            z += script.depth_noise * z * z * noise.sample(&mut rng);
        }
        if range.contains(z) {
            z as f32 as f64
        } else {
            0.0
        }
    })
}

fn instances(script: &SceneScript, hit: &Grid<u16>) -> InstanceMap {
    let (w, h) = hit.dims();
    let mut map = InstanceMap::empty(w, h);
    let mut counts = vec![0usize; script.objects.len() + 1];
    for (x, y, id) in hit.iter_xy() {
        if *id == 0 {
            continue;
        }
        let class = script.objects[*id as usize - 1].class;
        if class != 0 {
            map.ids.set(x, y, *id as u32);
            map.labels.set(x, y, class);
            counts[*id as usize] += 1;
        }
    }
    for (id, n) in counts.iter().enumerate().filter(|(_, n)| **n > 0) {
        map.instances.push(InstanceMeta {
            id: id as u32,
            class: script.objects[id - 1].class,
            pixel_count: *n,
        });
    }
    map
}

/// Relative depth tolerance when checking that a point is visible in the previous frame.
const OCCLUSION_TOL: f64 = 0.03;

/// Exact backward flow from `cur` to `prev` given per-object motion.
///
/// A pixel is valid when its surface point, moved back with its object,
/// projects inside the previous image onto the same object at a consistent
/// depth.
pub fn ground_truth_flow(
    script: &SceneScript,
    k: usize,
    cur: &Raycast,
    prev: &Raycast,
    intr: &CameraIntrinsics<f64>,
) -> FlowField<f64> {
    let (w, h) = cur.depth.dims();
    let mut vectors = Grid::new(w, h, Vec2::zero());
    let mut valid = Grid::new(w, h, false);
    let prev_world_to_cam = prev.pose.inverse();
    // object motion from frame k back to k − 1, in world coordinates
    let back: Vec<Pose<f64>> = script
        .objects
        .iter()
        .map(|o| o.pose_at(k as f64 - 1.0).compose(&o.pose_at(k as f64).inverse()))
        .collect();
    for (x, y, d) in cur.depth.iter_xy() {
        let id = *cur.hit.get(x, y);
        if id == 0 {
            continue;
        }
        let u = Vec2::new(x as f64, y as f64);
        let pc = Vec3::new((u.x - intr.cx) * d / intr.fx, (u.y - intr.cy) * d / intr.fy, *d);
        let pw = cur.pose.transform_point(pc);
        let q = prev_world_to_cam.transform_point(back[id as usize - 1].transform_point(pw));
        let Ok(v) = project(q, intr) else { continue };
        let Some((px, py)) = intr.nearest_pixel(v) else { continue };
        if v.x > (w - 1) as f64 || v.y > (h - 1) as f64 || v.x < 0.0 || v.y < 0.0 {
            continue;
        }
        let seen = *prev.depth.get(px, py);
        if *prev.hit.get(px, py) != id || (seen - q.z).abs() > OCCLUSION_TOL * q.z {
            continue;
        }
        vectors.set(x, y, v - u);
        valid.set(x, y, true);
    }
    FlowField::exact(vectors, valid)
}

/// Renders frames of a script in order, reusing the previous cast for flow.
pub struct Renderer {
    script: SceneScript,
    intr: CameraIntrinsics<f64>,
    range: DepthRange,
    prev: Option<(usize, Raycast)>,
}

impl Renderer {
    pub fn new(script: &SceneScript) -> Result<Self, crate::scene::ScriptError> {
        script.validate()?;
        let intr = script.intrinsics().expect("validated");
        Ok(Self {
            script: script.clone(),
            intr,
            range: DepthRange::default(),
            prev: None,
        })
    }

    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        self.intr
    }

    pub fn script(&self) -> &SceneScript {
        &self.script
    }

    pub fn render(&mut self, k: usize) -> GroundTruthFrame {
        assert!(k < self.script.frames, "frame {k} beyond script length {}", self.script.frames);
        let cur = raycast(&self.script, k, &self.intr);
        let (w, h) = (self.intr.width, self.intr.height);
        let flow = if k == 0 {
            FlowField::invalid(w, h)
        } else {
            let prev = match self.prev.take() {
                Some((j, p)) if j + 1 == k => p,
                _ => raycast(&self.script, k - 1, &self.intr),
            };
            ground_truth_flow(&self.script, k, &cur, &prev, &self.intr)
        };
        let depth = sensor_depth(&self.script, k, &cur.depth, self.range);
        let frame = RgbdFrame::new(k as u64, cur.color.clone(), depth, self.script.timestamp_us(k), &self.intr, self.range)
            .expect("rendered frame matches intrinsics and range");
        let out = GroundTruthFrame {
            frame,
            pose: cur.pose,
            instances: instances(&self.script, &cur.hit),
            flow,
        };
        self.prev = Some((k, cur));
        out
    }
}

/// Renders frame `k` of `script`.
pub fn render_frame(script: &SceneScript, k: usize) -> Result<GroundTruthFrame, crate::scene::ScriptError> {
    Ok(Renderer::new(script)?.render(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{builtin, look_at, CameraKey, Category, SceneObject, Shape};
    use dynfuse_core::odometry::odometry_flow;

    fn wall_script(eye_z: f64) -> SceneScript {
        SceneScript {
            name: "wall".into(),
            category: Category::Fixed,
            description: String::new(),
            frames: 2,
            width: 64,
            height: 48,
            hfov_deg: 60.0,
            fps: 30.0,
            objects: vec![SceneObject::fixed(
                "wall",
                Shape::Plane {
                    normal: [0.0, 0.0, -1.0],
                    offset: -2.0,
                },
                [100, 100, 100],
                0,
                [0.0; 3],
            )],
            camera: vec![CameraKey {
                frame: 0.0,
                eye: [0.0, 0.0, eye_z],
                target: [0.0, 0.0, 5.0],
            }],
            depth_noise: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn fronto_parallel_plane_depth_is_analytic() {
        let s = wall_script(0.0);
        let f = render_frame(&s, 0).unwrap();
        let intr = s.intrinsics().unwrap();
        for (x, y, d) in f.frame.depth.iter_xy() {
            // z-depth of a fronto-parallel plane is constant; range along the ray is 2 / cos
            assert!((d - 2.0).abs() < 1e-6);
            let ray = Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let cos = 1.0 / ray.norm();
            assert!((d / cos - 2.0 / cos).abs() < 1e-6);
        }
    }

    #[test]
    fn tilted_plane_range_matches_formula() {
        let mut s = wall_script(0.0);
        s.camera[0].target = [1.0, 0.0, 2.0];
        let f = render_frame(&s, 0).unwrap();
        let intr = s.intrinsics().unwrap();
        let pose = s.camera_pose(0);
        let n = Vec3::new(0.0, 0.0, 1.0);
        for (x, y, d) in f.frame.depth.iter_xy() {
            let ray = pose.rotate(Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0));
            let unit = ray.normalized().unwrap();
            let range = 2.0 / unit.dot(n);
            assert!((d * ray.norm() - range).abs() < 1e-6 * range.max(1.0), "{x},{y}");
        }
    }

    #[test]
    fn static_pair_flow_matches_odometry_flow() {
        let s = builtin("static_room").unwrap();
        let mut r = Renderer::new(&s).unwrap();
        let _ = r.render(40);
        let f = r.render(41);
        let odo = odometry_flow(&f.frame.depth, &f.pose, &s.camera_pose(40), &r.intrinsics());
        let mut compared = 0;
        for i in 0..f.flow.vectors.as_slice().len() {
            if f.flow.valid.as_slice()[i] && odo.valid.as_slice()[i] {
                let d = f.flow.vectors.as_slice()[i] - odo.vectors.as_slice()[i];
                assert!(d.norm() < 1e-3, "pixel {i}: {}", d.norm());
                compared += 1;
            }
        }
        assert!(compared > 60_000);
    }

    #[test]
    fn single_box_mask_is_its_silhouette() {
        let mut s = wall_script(0.0);
        s.objects.push(SceneObject::fixed("box", Shape::Cuboid { half: [0.2, 0.2, 0.2] }, [9, 9, 9], 4, [0.0, 0.0, 1.0]));
        let f = render_frame(&s, 0).unwrap();
        let intr = s.intrinsics().unwrap();
        // front face at z = 0.8 spans |x|,|y| ≤ 0.2
        for (x, y, id) in f.instances.ids.iter_xy() {
            let px = (x as f64 - intr.cx) / intr.fx * 0.8;
            let py = (y as f64 - intr.cy) / intr.fy * 0.8;
            let want = px.abs() <= 0.2 && py.abs() <= 0.2;
            assert_eq!(*id != 0, want, "{x},{y}");
            if want {
                assert_eq!(*f.instances.labels.get(x, y), 4);
            }
        }
        f.instances.validate().unwrap();
        assert_eq!(f.instances.instances.len(), 1);
    }

    #[test]
    fn moving_object_flow_differs_from_camera_flow_only_on_it() {
        let s = builtin("fixed_box").unwrap();
        let mut r = Renderer::new(&s).unwrap();
        let _ = r.render(19);
        let f = r.render(20);
        let (bi, _) = s.object("box").unwrap();
        let odo = odometry_flow(&f.frame.depth, &f.pose, &s.camera_pose(19), &r.intrinsics());
        for (x, y, id) in f.instances.ids.iter_xy() {
            if !*f.flow.valid.get(x, y) || !*odo.valid.get(x, y) {
                continue;
            }
            let d = (*f.flow.vectors.get(x, y) - *odo.vectors.get(x, y)).norm();
            if *id == bi as u32 + 1 {
                assert!(d > 1.0);
            } else {
                assert!(d < 1e-3);
            }
        }
    }

    #[test]
    fn occluded_points_have_no_flow() {
        let s = builtin("crossing").unwrap();
        let mut r = Renderer::new(&s).unwrap();
        let _ = r.render(39);
        let f = r.render(40);
        let prev = raycast(&s, 39, &r.intrinsics());
        let (wi, _) = s.object("walker").unwrap();
        let mut uncovered = 0;
        for (x, y, id) in f.instances.ids.iter_xy() {
            // background that the walker covered one frame earlier
            if *id == 0 && *prev.hit.get(x, y) == wi as u16 + 1 && *f.frame.depth.get(x, y) > 0.0 {
                let v = *f.flow.vectors.get(x, y);
                let (px, py) = ((x as f64 + v.x).round() as usize, (y as f64 + v.y).round() as usize);
                if *prev.hit.get(px, py) == wi as u16 + 1 {
                    assert!(!*f.flow.valid.get(x, y));
                    uncovered += 1;
                }
            }
        }
        assert!(uncovered > 0);
    }

    #[test]
    fn noise_is_seeded() {
        let mut s = builtin("static_room").unwrap();
        s.depth_noise = 0.002;
        let a = render_frame(&s, 3).unwrap();
        let b = render_frame(&s, 3).unwrap();
        assert_eq!(a, b);
        s.seed = 1;
        let c = render_frame(&s, 3).unwrap();
        assert_ne!(a.frame.depth, c.frame.depth);
    }

    #[test]
    fn look_at_pose_round_trips_through_camera() {
        let p = look_at([0.0, 1.3, -0.8], [0.0, 0.3, 1.5]);
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0, 101, 81).unwrap();
        let target = p.inverse().transform_point(Vec3::new(0.0, 0.3, 1.5));
        let u = project(target, &intr).unwrap();
        assert!((u.x - 50.0).abs() < 1e-9 && (u.y - 40.0).abs() < 1e-9);
    }
}
