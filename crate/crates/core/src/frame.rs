//! Per-frame image data: RGB-D input, optical flow, instance labels and scores.

use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Vec2};
use crate::image::Grid;
use crate::scalar::Real;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrameError {
    #[error("image is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("depth {value} at ({x}, {y}) outside [{min}, {max}]")]
    DepthOutOfRange {
        x: usize,
        y: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid flow field: {0}")]
    InvalidFlow(String),
    #[error("invalid instance map: {0}")]
    InvalidInstances(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Valid sensor range in meters. Depth 0 always means "no measurement".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl Default for DepthRange {
    fn default() -> Self {
        Self { min: 0.1, max: 10.0 }
    }
}

impl DepthRange {
    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbdFrame<T> {
    pub index: u64,
    pub color: Grid<Rgb>,
    /// Meters, 0 = invalid.
    pub depth: Grid<T>,
    /// Microseconds since the capture epoch.
    pub timestamp_us: u64,
}

impl<T: Real> RgbdFrame<T> {
    pub fn new(
        index: u64,
        color: Grid<Rgb>,
        depth: Grid<T>,
        timestamp_us: u64,
        intr: &CameraIntrinsics<T>,
        range: DepthRange,
    ) -> Result<Self, FrameError> {
        let expected = (intr.width, intr.height);
        for dims in [color.dims(), depth.dims()] {
            if dims != expected {
                return Err(FrameError::DimensionMismatch {
                    got: dims,
                    expected,
                });
            }
        }
        for (x, y, d) in depth.iter_xy() {
            let d = d.as_f64();
            if d != 0.0 && !range.contains(d) {
                return Err(FrameError::DepthOutOfRange {
                    x,
                    y,
                    value: d,
                    min: range.min,
                    max: range.max,
                });
            }
        }
        Ok(Self {
            index,
            color,
            depth,
            timestamp_us,
        })
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.as_slice().iter().filter(|d| **d > T::zero()).count()
    }
}

/// Backward optical flow: pixel `u` of frame k corresponds to `u + F(u)` in frame k-1.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub vectors: Grid<Vec2<T>>,
    pub valid: Grid<bool>,
    /// Per-pixel confidence in `[0, 1]`; 0 wherever invalid.
    pub confidence: Grid<T>,
    /// Matcher cost, unitless and ≥ 0.
    pub cost: Grid<T>,
}

impl<T: Real> FlowField<T> {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            vectors: Grid::new(width, height, Vec2::zero()),
            valid: Grid::new(width, height, false),
            confidence: Grid::new(width, height, T::zero()),
            cost: Grid::new(width, height, T::zero()),
        }
    }

    /// Builds a field from vectors and validity with confidence 1 and cost 0 on valid pixels.
    pub fn exact(vectors: Grid<Vec2<T>>, valid: Grid<bool>) -> Self {
        let confidence = valid.map(|v| if *v { T::one() } else { T::zero() });
        let cost = Grid::new(vectors.width(), vectors.height(), T::zero());
        Self {
            vectors,
            valid,
            confidence,
            cost,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.vectors.dims()
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        let d = self.dims();
        if self.valid.dims() != d || self.confidence.dims() != d || self.cost.dims() != d {
            return Err(FrameError::InvalidFlow("component sizes differ".into()));
        }
        for i in 0..d.0 * d.1 {
            let w = self.confidence.as_slice()[i];
            if !(w >= T::zero() && w <= T::one()) {
                return Err(FrameError::InvalidFlow(format!("confidence {w} outside [0,1]")));
            }
            if !self.valid.as_slice()[i] && w != T::zero() {
                return Err(FrameError::InvalidFlow("invalid pixel with nonzero confidence".into()));
            }
            if !(self.cost.as_slice()[i] >= T::zero()) {
                return Err(FrameError::InvalidFlow("negative cost".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceMeta {
    pub id: u32,
    pub class: u32,
    pub pixel_count: usize,
}

/// Per-pixel class labels and instance ids. Id 0 means "no instance".
///
/// Maps returned by id association carry persistent track ids.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMap {
    pub labels: Grid<u32>,
    pub ids: Grid<u32>,
    pub instances: Vec<InstanceMeta>,
}

impl InstanceMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            labels: Grid::new(width, height, 0),
            ids: Grid::new(width, height, 0),
            instances: Vec::new(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.ids.dims()
    }

    pub fn meta(&self, id: u32) -> Option<&InstanceMeta> {
        self.instances.iter().find(|m| m.id == id)
    }

    pub fn mask_of(&self, id: u32) -> Grid<bool> {
        self.ids.map(|v| *v == id && id != 0)
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.labels.dims() != self.ids.dims() {
            return Err(FrameError::InvalidInstances("label and id sizes differ".into()));
        }
        let mut counts = std::collections::BTreeMap::<u32, usize>::new();
        for (i, &id) in self.ids.as_slice().iter().enumerate() {
            if id != 0 {
                if self.labels.as_slice()[i] == 0 {
                    return Err(FrameError::InvalidInstances(
                        "instance pixel without class label".into(),
                    ));
                }
                *counts.entry(id).or_default() += 1;
            }
        }
        let mut meta_ids: Vec<u32> = self.instances.iter().map(|m| m.id).collect();
        meta_ids.sort_unstable();
        let map_ids: Vec<u32> = counts.keys().copied().collect();
        if meta_ids != map_ids {
            return Err(FrameError::InvalidInstances(format!(
                "metadata ids {meta_ids:?} do not match map ids {map_ids:?}"
            )));
        }
        for m in &self.instances {
            if counts[&m.id] != m.pixel_count {
                return Err(FrameError::InvalidInstances(format!(
                    "instance {} pixel count mismatch",
                    m.id
                )));
            }
        }
        Ok(())
    }
}

/// Dynamicity score `S_k` and accumulated motion `A_k` (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    pub dynamicity: Grid<T>,
    pub accumulated: Grid<T>,
}

impl<T: Real> ScoreMap<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            dynamicity: Grid::new(width, height, T::zero()),
            accumulated: Grid::new(width, height, T::zero()),
        }
    }
}

/// How instances in the uncertainty band `(1, τ)` are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UncertaintyPolicy {
    /// Keep the previous label; new tracks start static.
    #[default]
    Hysteresis,
    AssumeStatic,
    AssumeDynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynParams<T> {
    /// Dynamic threshold τ ≥ 1.
    pub tau: T,
    /// Linear rescaling δ ≥ 0.
    pub delta: T,
    /// Voxel invalidation threshold τ_SDF > 0.
    pub tau_sdf: T,
    /// Histogram bin width in pixels of end-point error.
    pub bin_width: T,
    pub min_mode_pixels: usize,
    /// Fraction of the instance's valid pixels a mode needs; the larger of both bounds applies.
    pub min_mode_fraction: f64,
    /// Exponential smoothing factor α ∈ (0, 1].
    pub alpha: T,
    pub uncertainty: UncertaintyPolicy,
}

impl<T: Real> Default for DynParams<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(1.5),
            delta: T::lit(0.5),
            tau_sdf: T::lit(1.0),
            bin_width: T::lit(0.5),
            min_mode_pixels: 30,
            min_mode_fraction: 0.02,
            alpha: T::lit(0.3),
            uncertainty: UncertaintyPolicy::Hysteresis,
        }
    }
}

impl<T: Real> DynParams<T> {
    pub fn validate(&self) -> Result<(), FrameError> {
        let bad = |m: &str| Err(FrameError::InvalidParams(m.into()));
        if !(self.tau >= T::one()) {
            return bad("tau must be >= 1");
        }
        if !(self.delta >= T::zero()) {
            return bad("delta must be >= 0");
        }
        if !(self.tau_sdf > T::zero()) {
            return bad("tau_sdf must be > 0");
        }
        if !(self.bin_width > T::zero()) {
            return bad("bin width must be > 0");
        }
        if !(self.alpha > T::zero() && self.alpha <= T::one()) {
            return bad("alpha must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.min_mode_fraction) {
            return bad("min mode fraction must be in [0, 1]");
        }
        Ok(())
    }

    /// Minimum pixel count a histogram mode needs for an instance with `n` valid pixels.
    pub fn min_mode_size(&self, n: usize) -> usize {
        let frac = (self.min_mode_fraction * n as f64).ceil() as usize;
        self.min_mode_pixels.max(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(10.0, 10.0, 1.5, 1.5, 4, 3).unwrap()
    }

    #[test]
    fn frame_dimension_and_range_checks() {
        let color = Grid::new(4, 3, [0u8; 3]);
        let depth = Grid::new(4, 3, 1.0);
        assert!(RgbdFrame::new(0, color.clone(), depth.clone(), 0, &intr(), DepthRange::default()).is_ok());
        let wrong = Grid::new(3, 3, 1.0);
        assert!(matches!(
            RgbdFrame::new(0, color.clone(), wrong, 0, &intr(), DepthRange::default()),
            Err(FrameError::DimensionMismatch { .. })
        ));
        let mut far = depth;
        far.set(1, 1, 50.0);
        far.set(2, 1, 0.0);
        assert!(matches!(
            RgbdFrame::new(0, color, far, 0, &intr(), DepthRange::default()),
            Err(FrameError::DepthOutOfRange { x: 1, y: 1, .. })
        ));
    }

    #[test]
    fn flow_invariants() {
        let mut f = FlowField::<f64>::invalid(3, 2);
        assert!(f.validate().is_ok());
        f.confidence.set(0, 0, 0.5);
        assert!(f.validate().is_err());
        f.valid.set(0, 0, true);
        assert!(f.validate().is_ok());
        f.confidence.set(0, 0, 1.5);
        assert!(f.validate().is_err());
    }

    #[test]
    fn instance_map_validation() {
        let mut m = InstanceMap::empty(3, 1);
        assert!(m.validate().is_ok());
        m.ids.set(1, 0, 4);
        assert!(m.validate().is_err(), "no class label");
        m.labels.set(1, 0, 2);
        assert!(m.validate().is_err(), "no metadata");
        m.instances.push(InstanceMeta {
            id: 4,
            class: 2,
            pixel_count: 1,
        });
        assert!(m.validate().is_ok());
    }

    #[test]
    fn params_validation() {
        assert!(DynParams::<f64>::default().validate().is_ok());
        let p = DynParams::<f64> {
            tau: 0.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = DynParams::<f64> {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        assert_eq!(DynParams::<f64>::default().min_mode_size(100), 30);
        assert_eq!(DynParams::<f64>::default().min_mode_size(10_000), 200);
    }
}
