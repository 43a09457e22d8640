//! Scripted synthetic scenes: analytic primitives on keyframed rigid
//! trajectories, seen by a keyframed pinhole camera.

use dynfuse_core::geometry::{CameraIntrinsics, Mat3, Pose, Vec3};
use dynfuse_core::Rgb;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScriptError {
    #[error("script has no frames")]
    NoFrames,
    #[error("script has no static primitive")]
    NoStaticPrimitive,
    #[error("{0} has no keyframes")]
    EmptyTrajectory(String),
    #[error("keyframes of {0} are not sorted by frame")]
    UnsortedKeys(String),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("unknown script `{0}`")]
    Unknown(String),
}

/// Geometry in the object's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// `normal · p = offset`, normal pointing to the visible side.
    Plane { normal: [f64; 3], offset: f64 },
    /// Centered at the origin.
    Cuboid { half: [f64; 3] },
    /// Centered at the origin.
    Sphere { radius: f64 },
}

/// Nearest ray hit in the shape's frame: distance along `dir` and outward normal.
fn intersect(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    const EPS: f64 = 1e-9;
    match *shape {
        Shape::Plane { normal, offset } => {
            let nd = dot(normal, d);
            if nd.abs() < EPS {
                return None;
            }
            let t = (offset - dot(normal, o)) / nd;
            (t > EPS).then_some((t, normal))
        }
        Shape::Cuboid { half } => {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut n0, mut n1) = ([0.0; 3], [0.0; 3]);
            for a in 0..3 {
                if d[a].abs() < EPS {
                    if o[a].abs() > half[a] {
                        return None;
                    }
                    continue;
                }
                let (mut lo, mut hi) = ((-half[a] - o[a]) / d[a], (half[a] - o[a]) / d[a]);
                let mut n = [0.0; 3];
                n[a] = -d[a].signum();
                let mut nf = [0.0; 3];
                nf[a] = d[a].signum();
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                if lo > t0 {
                    t0 = lo;
                    n0 = n;
                }
                if hi < t1 {
                    t1 = hi;
                    n1 = nf;
                }
            }
            if t0 > t1 || t1 <= EPS {
                return None;
            }
            // from inside the box the far face is hit
            if t0 > EPS {
                Some((t0, n0))
            } else {
                Some((t1, n1.map(|v| -v)))
            }
        }
        Shape::Sphere { radius } => {
            let b = dot(o, d);
            let a = dot(d, d);
            let c = dot(o, o) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if (-b - s) / a > EPS { (-b - s) / a } else { (-b + s) / a };
            if t <= EPS {
                return None;
            }
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            Some((t, p.map(|v| v / radius)))
        }
    }
}

/// Unsigned distance from a point (shape frame) to the surface.
fn surface_distance(shape: &Shape, p: [f64; 3]) -> f64 {
    match *shape {
        Shape::Plane { normal, offset } => (dot(normal, p) - offset).abs(),
        Shape::Cuboid { half } => {
            let q = [0, 1, 2].map(|a| p[a].abs() - half[a]);
            let outside = q.map(|v| v.max(0.0));
            let inner = q[0].max(q[1]).max(q[2]).min(0.0);
            (dot(outside, outside).sqrt() + inner).abs()
        }
        Shape::Sphere { radius } => (dot(p, p).sqrt() - radius).abs(),
    }
}

fn inside(shape: &Shape, p: [f64; 3], margin: f64) -> bool {
    match *shape {
        Shape::Plane { .. } => false,
        Shape::Cuboid { half } => (0..3).all(|a| p[a].abs() < half[a] - margin),
        Shape::Sphere { radius } => dot(p, p).sqrt() < radius - margin,
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn lerp3(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + f * (b[i] - a[i]))
}

/// Rigid object pose at a keyframe: position plus rotation about world +y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectKey {
    pub frame: f64,
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraKey {
    pub frame: f64,
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

/// Piecewise-linear interpolation position for frame `k`: segment index and fraction.
fn segment(frames: impl ExactSizeIterator<Item = f64> + Clone, k: f64) -> (usize, usize, f64) {
    let n = frames.len();
    let keys: Vec<f64> = frames.collect();
    if n == 1 || k <= keys[0] {
        return (0, 0, 0.0);
    }
    if k >= keys[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let i = keys.windows(2).position(|w| k >= w[0] && k < w[1]).unwrap_or(n - 2);
    let f = (k - keys[i]) / (keys[i + 1] - keys[i]);
    (i, i + 1, f)
}

/// Camera-to-world pose looking from `eye` at `target`, world +y up.
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Pose<f64> {
    let f = Vec3::from_array(target) - Vec3::from_array(eye);
    let f = f.normalized().expect("eye and target coincide");
    let up = Vec3::new(0.0, 1.0, 0.0);
    let r = f.cross(up).normalized().expect("view direction parallel to up");
    let d = f.cross(r);
    let rot = Mat3::from_rows([[r.x, d.x, f.x], [r.y, d.y, f.y], [r.z, d.z, f.z]]);
    Pose::new(rot, Vec3::from_array(eye))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub shape: Shape,
    pub albedo: Rgb,
    /// Detector class; 0 = background, never reported as an instance.
    pub class: u32,
    pub path: Vec<ObjectKey>,
}

impl SceneObject {
    pub fn fixed(name: &str, shape: Shape, albedo: Rgb, class: u32, position: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            shape,
            albedo,
            class,
            path: vec![ObjectKey {
                frame: 0.0,
                position,
                yaw: 0.0,
            }],
        }
    }

    /// Object that moves through `keys` as (frame, position).
    pub fn moving(name: &str, shape: Shape, albedo: Rgb, class: u32, keys: &[(f64, [f64; 3])]) -> Self {
        Self {
            name: name.into(),
            shape,
            albedo,
            class,
            path: keys
                .iter()
                .map(|(frame, position)| ObjectKey {
                    frame: *frame,
                    position: *position,
                    yaw: 0.0,
                })
                .collect(),
        }
    }

    /// Object-to-world pose at frame `k`.
    pub fn pose_at(&self, k: f64) -> Pose<f64> {
        let (a, b, f) = segment(self.path.iter().map(|p| p.frame), k);
        let (pa, pb) = (&self.path[a], &self.path[b]);
        let yaw = pa.yaw + f * (pb.yaw - pa.yaw);
        Pose::from_axis_angle(Vec3::new(0.0, yaw, 0.0), Vec3::from_array(lerp3(pa.position, pb.position, f)))
    }

    pub fn is_static(&self) -> bool {
        self.path.windows(2).all(|w| w[0].position == w[1].position && w[0].yaw == w[1].yaw)
    }

    /// True if the pose at frame `k` differs from the pose at `k − 1`.
    pub fn moves_at(&self, k: usize) -> bool {
        k > 0 && self.pose_at(k as f64) != self.pose_at(k as f64 - 1.0)
    }

    pub fn surface_distance(&self, world: [f64; 3], k: usize) -> f64 {
        let local = self.pose_at(k as f64).inverse().transform_point(Vec3::from_array(world));
        surface_distance(&self.shape, local.to_array())
    }

    /// Whether `world` lies inside the solid, at least `margin` from its surface.
    pub fn contains(&self, world: [f64; 3], k: usize, margin: f64) -> bool {
        let local = self.pose_at(k as f64).inverse().transform_point(Vec3::from_array(world));
        inside(&self.shape, local.to_array(), margin)
    }

    /// Ray hit in world space: distance along `dir` and world normal.
    pub(crate) fn hit(&self, pose: &Pose<f64>, inv: &Pose<f64>, origin: Vec3<f64>, dir: Vec3<f64>) -> Option<(f64, Vec3<f64>, Vec3<f64>)> {
        let o = inv.transform_point(origin).to_array();
        let d = inv.rotate(dir).to_array();
        let (t, n) = intersect(&self.shape, o, d)?;
        let local = Vec3::new(o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]);
        Some((t, pose.rotate(Vec3::from_array(n)), local))
    }
}

/// Scene category, following the fixed / moving camera / outside-view split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    /// Camera fixed while object motion is visible.
    Fixed,
    /// Camera moving.
    Moving,
    /// Object motion happens outside the camera view.
    OutOfView,
}

impl Category {
    pub fn tag(self) -> &'static str {
        match self {
            Category::Fixed => "F.",
            Category::Moving => "M.",
            Category::OutOfView => "O.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub name: String,
    pub category: Category,
    pub description: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub fps: f64,
    pub objects: Vec<SceneObject>,
    pub camera: Vec<CameraKey>,
    /// Gaussian depth noise standard deviation at 1 m (meters), growing with depth squared.
    pub depth_noise: f64,
    pub seed: u64,
}

impl SceneScript {
    pub fn validate(&self) -> Result<(), ScriptError> {
        if self.frames == 0 {
            return Err(ScriptError::NoFrames);
        }
        if !self.objects.iter().any(|o| o.is_static()) {
            return Err(ScriptError::NoStaticPrimitive);
        }
        for o in &self.objects {
            if o.path.is_empty() {
                return Err(ScriptError::EmptyTrajectory(o.name.clone()));
            }
            if o.path.windows(2).any(|w| w[0].frame >= w[1].frame) {
                return Err(ScriptError::UnsortedKeys(o.name.clone()));
            }
        }
        if self.camera.is_empty() {
            return Err(ScriptError::EmptyTrajectory("camera".into()));
        }
        if self.camera.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(ScriptError::UnsortedKeys("camera".into()));
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) || self.width < 2 || self.height < 2 || !(self.fps > 0.0) {
            return Err(ScriptError::Camera(format!("{}x{} at {}°, {} fps", self.width, self.height, self.hfov_deg, self.fps)));
        }
        self.intrinsics().map_err(|e| ScriptError::Camera(e.to_string()))?;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics<f64>, dynfuse_core::GeometryError> {
        let f = (self.width as f64 / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics::new(f, f, (self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0, self.width, self.height)
    }

    pub fn camera_pose(&self, k: usize) -> Pose<f64> {
        let (a, b, f) = segment(self.camera.iter().map(|c| c.frame), k as f64);
        let (ca, cb) = (&self.camera[a], &self.camera[b]);
        look_at(lerp3(ca.eye, cb.eye, f), lerp3(ca.target, cb.target, f))
    }

    pub fn timestamp_us(&self, k: usize) -> u64 {
        (k as f64 * 1e6 / self.fps).round() as u64
    }

    /// Distance from `world` to the nearest static surface.
    pub fn static_surface_distance(&self, world: [f64; 3]) -> f64 {
        self.objects
            .iter()
            .filter(|o| o.is_static())
            .map(|o| o.surface_distance(world, 0))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn object(&self, name: &str) -> Option<(usize, &SceneObject)> {
        self.objects.iter().enumerate().find(|(_, o)| o.name == name)
    }

    /// Shortens the script to `frames` frames.
    pub fn truncated(mut self, frames: usize) -> Self {
        self.frames = self.frames.min(frames);
        self
    }
}

const ROOM_W: f64 = 2.0;
const ROOM_H: f64 = 2.5;
const ROOM_BACK: f64 = 3.0;
const ROOM_FRONT: f64 = -1.5;

fn room() -> Vec<SceneObject> {
    let plane = |name: &str, normal: [f64; 3], offset: f64, albedo: Rgb| {
        SceneObject::fixed(name, Shape::Plane { normal, offset }, albedo, 0, [0.0; 3])
    };
    vec![
        plane("floor", [0.0, 1.0, 0.0], 0.0, [150, 120, 90]),
        plane("ceiling", [0.0, -1.0, 0.0], -ROOM_H, [230, 230, 225]),
        plane("back", [0.0, 0.0, -1.0], -ROOM_BACK, [200, 190, 170]),
        plane("front", [0.0, 0.0, 1.0], ROOM_FRONT, [190, 200, 170]),
        plane("left", [1.0, 0.0, 0.0], -ROOM_W, [170, 190, 210]),
        plane("right", [-1.0, 0.0, 0.0], -ROOM_W, [210, 170, 170]),
    ]
}

/// Box of the given half extents resting on the floor at (x, z).
fn crate_at(name: &str, half: [f64; 3], albedo: Rgb, class: u32, x: f64, z: f64) -> SceneObject {
    SceneObject::fixed(name, Shape::Cuboid { half }, albedo, class, [x, half[1], z])
}

fn key(frame: f64, eye: [f64; 3], target: [f64; 3]) -> CameraKey {
    CameraKey { frame, eye, target }
}

const BOX_HALF: [f64; 3] = [0.15, 0.15, 0.15];
const CLASS_BOX: u32 = 1;
const CLASS_CHAIR: u32 = 2;
const CLASS_BALL: u32 = 3;

/// The static detected object every dynamic script carries, so that at least
/// one detection is static.
fn chair() -> SceneObject {
    crate_at("chair", [0.2, 0.25, 0.2], [90, 60, 40], CLASS_CHAIR, 0.9, 1.6)
}

fn base(name: &str, category: Category, description: &str, frames: usize) -> SceneScript {
    SceneScript {
        name: name.into(),
        category,
        description: description.into(),
        frames,
        width: 320,
        height: 240,
        hfov_deg: 60.0,
        fps: 30.0,
        objects: room(),
        camera: vec![key(0.0, [0.0, 1.3, -0.8], [0.0, 0.3, 1.5])],
        depth_noise: 0.0,
        seed: 0,
    }
}

pub const BUILTIN: [&str; 10] = [
    "static_room",
    "moving_box",
    "oof",
    "fixed_box",
    "rolling_ball",
    "two_boxes",
    "crossing",
    "pan_room",
    "late_mover",
    "swap_out_of_view",
];

/// Frame at which the box of `moving_box` starts and stops moving.
pub const MOVING_BOX_ONSET: usize = 20;
pub const MOVING_BOX_STOP: usize = 60;

pub fn builtin(name: &str) -> Result<SceneScript, ScriptError> {
    let s = match name {
        "static_room" => {
            let mut s = base(name, Category::Moving, "furnished room, slow camera arc, nothing moves", 100);
            s.objects.push(crate_at("box", BOX_HALF, [40, 120, 200], CLASS_BOX, -0.3, 1.2));
            s.objects.push(chair());
            s.objects.push(SceneObject::fixed("ball", Shape::Sphere { radius: 0.18 }, [200, 60, 60], CLASS_BALL, [0.3, 0.18, 0.9]));
            s.camera = vec![
                key(0.0, [-0.5, 1.3, -0.8], [0.0, 0.3, 1.5]),
                key(50.0, [0.0, 1.4, -0.9], [0.2, 0.3, 1.5]),
                key(99.0, [0.5, 1.3, -0.8], [0.0, 0.3, 1.5]),
            ];
            s
        }
        "moving_box" => {
            let mut s = base(
                name,
                Category::Moving,
                "box rests, slides right then left while the camera drifts, stops at frame 60",
                120,
            );
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[
                    (MOVING_BOX_ONSET as f64, [-0.2, y, 1.0]),
                    (35.0, [0.4, y, 1.0]),
                    (MOVING_BOX_STOP as f64, [-0.6, y, 1.0]),
                ],
            ));
            s.objects.push(chair());
            s.camera = vec![
                key(0.0, [-0.2, 1.3, -0.8], [0.0, 0.3, 1.5]),
                key(119.0, [0.2, 1.35, -0.8], [0.0, 0.3, 1.5]),
            ];
            s
        }
        "oof" => {
            let mut s = base(
                name,
                Category::OutOfView,
                "camera turns away, the box moves while unseen, camera turns back",
                130,
            );
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[(55.0, [-0.3, y, 1.1]), (65.0, [0.45, y, 1.3])],
            ));
            s.objects.push(chair());
            let ahead = [0.0, 0.3, 1.5];
            let away = [-1.9, 0.6, -0.9];
            s.camera = vec![
                key(0.0, [0.0, 1.3, -0.8], ahead),
                key(30.0, [0.0, 1.3, -0.8], ahead),
                key(45.0, [0.0, 1.3, -0.8], away),
                key(75.0, [0.0, 1.3, -0.8], away),
                key(90.0, [0.0, 1.3, -0.8], ahead),
            ];
            s
        }
        "fixed_box" => {
            let mut s = base(name, Category::Fixed, "fixed camera, box slides back and forth", 100);
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[(10.0, [-0.5, y, 1.1]), (40.0, [0.5, y, 1.1]), (70.0, [-0.5, y, 1.1])],
            ));
            s.objects.push(chair());
            s
        }
        "rolling_ball" => {
            let mut s = base(name, Category::Fixed, "fixed camera, a ball rolls across the floor", 100);
            let r = 0.15;
            s.objects.push(SceneObject::moving(
                "ball",
                Shape::Sphere { radius: r },
                [200, 60, 60],
                CLASS_BALL,
                &[(15.0, [-0.8, r, 1.4]), (75.0, [0.6, r, 0.8])],
            ));
            s.objects.push(chair());
            s
        }
        "two_boxes" => {
            let mut s = base(name, Category::Moving, "two boxes, one moves while the camera pans", 120);
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[(30.0, [-0.6, y, 1.0]), (70.0, [0.0, y, 0.7])],
            ));
            s.objects.push(crate_at("other", BOX_HALF, [60, 170, 80], CLASS_BOX, 0.4, 1.3));
            s.objects.push(chair());
            s.camera = vec![
                key(0.0, [-0.3, 1.3, -0.8], [-0.2, 0.3, 1.5]),
                key(119.0, [0.3, 1.3, -0.8], [0.2, 0.3, 1.5]),
            ];
            s
        }
        "crossing" => {
            let mut s = base(name, Category::Fixed, "a tall box crosses the whole view and leaves", 100);
            let half = [0.2, 0.5, 0.2];
            s.objects.push(SceneObject::moving(
                "walker",
                Shape::Cuboid { half },
                [120, 80, 160],
                CLASS_BOX,
                &[(10.0, [-1.7, half[1], 1.2]), (80.0, [1.7, half[1], 1.2])],
            ));
            s.objects.push(chair());
            s
        }
        "pan_room" => {
            let mut s = base(name, Category::Moving, "static furnished room scanned by a wide pan", 150);
            s.objects.push(crate_at("box", BOX_HALF, [40, 120, 200], CLASS_BOX, -0.8, 1.5));
            s.objects.push(crate_at("shelf", [0.4, 0.6, 0.15], [120, 100, 80], 0, 1.2, 2.6));
            s.objects.push(chair());
            s.camera = vec![
                key(0.0, [0.0, 1.3, -0.8], [-1.5, 0.5, 1.5]),
                key(149.0, [0.0, 1.3, -0.8], [1.5, 0.5, 1.5]),
            ];
            s
        }
        "late_mover" => {
            let mut s = base(name, Category::Fixed, "box rests for 80 frames, then moves and stays", 140);
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[(80.0, [-0.4, y, 1.0]), (100.0, [0.3, y, 1.0])],
            ));
            s.objects.push(chair());
            s
        }
        "swap_out_of_view" => {
            let mut s = base(
                name,
                Category::OutOfView,
                "the box leaves while the camera looks elsewhere and never returns",
                120,
            );
            let y = BOX_HALF[1];
            s.objects.push(SceneObject::moving(
                "box",
                Shape::Cuboid { half: BOX_HALF },
                [40, 120, 200],
                CLASS_BOX,
                &[(45.0, [0.0, y, 1.1]), (55.0, [1.7, y, -1.2])],
            ));
            s.objects.push(chair());
            let ahead = [0.0, 0.3, 1.5];
            let away = [-1.9, 0.7, 0.5];
            s.camera = vec![
                key(0.0, [0.0, 1.3, -0.8], ahead),
                key(25.0, [0.0, 1.3, -0.8], ahead),
                key(40.0, [0.0, 1.3, -0.8], away),
                key(65.0, [0.0, 1.3, -0.8], away),
                key(80.0, [0.0, 1.3, -0.8], ahead),
            ];
            s
        }
        other => return Err(ScriptError::Unknown(other.into())),
    };
    s.validate()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_builtin_validates() {
        for name in BUILTIN {
            let s = builtin(name).unwrap();
            assert_eq!(s.name, name);
            assert!((100..=300).contains(&s.frames), "{name}");
            assert_eq!((s.width, s.height), (320, 240));
        }
        assert!(matches!(builtin("nope"), Err(ScriptError::Unknown(_))));
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = look_at([0.0, 1.0, 0.0], [1.0, 1.0, 1.0]);
        pose.validate().unwrap();
        let fwd = pose.rotate(Vec3::new(0.0, 0.0, 1.0));
        let want = Vec3::new(1.0, 0.0, 1.0).normalized().unwrap();
        assert!((fwd - want).norm() < 1e-12);
        // image y points down in the world
        assert!(pose.rotate(Vec3::new(0.0, 1.0, 0.0)).y < 0.0);
    }

    #[test]
    fn cuboid_hits_from_outside_and_inside() {
        let s = Shape::Cuboid { half: [1.0, 1.0, 1.0] };
        let (t, n) = intersect(&s, [0.0, 0.0, -5.0], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!((t, n), (4.0, [0.0, 0.0, -1.0]));
        let (t, n) = intersect(&s, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!((t, n), (1.0, [0.0, 0.0, -1.0]));
        assert!(intersect(&s, [0.0, 3.0, -5.0], [0.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn sphere_and_plane_hits() {
        let (t, n) = intersect(&Shape::Sphere { radius: 1.0 }, [0.0, 0.0, -3.0], [0.0, 0.0, 2.0]).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!((n[2] + 1.0).abs() < 1e-12);
        let floor = Shape::Plane {
            normal: [0.0, 1.0, 0.0],
            offset: 0.0,
        };
        assert_eq!(intersect(&floor, [0.0, 2.0, 0.0], [0.0, -1.0, 0.0]).unwrap().0, 2.0);
        assert!(intersect(&floor, [0.0, 2.0, 0.0], [0.0, 1.0, 0.0]).is_none());
    }

    #[test]
    fn distances_to_surfaces() {
        let c = Shape::Cuboid { half: [1.0, 2.0, 3.0] };
        assert_eq!(surface_distance(&c, [0.0, 0.0, 0.0]), 1.0);
        assert_eq!(surface_distance(&c, [2.0, 0.0, 0.0]), 1.0);
        assert!((surface_distance(&c, [2.0, 3.0, 0.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(surface_distance(&Shape::Sphere { radius: 2.0 }, [0.0, 0.5, 0.0]), 1.5);
    }

    #[test]
    fn trajectories_interpolate_and_clamp() {
        let o = SceneObject::moving("b", Shape::Sphere { radius: 0.1 }, [0; 3], 1, &[(10.0, [0.0; 3]), (20.0, [1.0, 0.0, 0.0])]);
        assert_eq!(o.pose_at(0.0).translation.x, 0.0);
        assert!((o.pose_at(15.0).translation.x - 0.5).abs() < 1e-12);
        assert_eq!(o.pose_at(30.0).translation.x, 1.0);
        assert!(!o.moves_at(10));
        assert!(o.moves_at(11));
        assert!(o.moves_at(20));
        assert!(!o.moves_at(21));
        assert!(!o.is_static());
    }
}
