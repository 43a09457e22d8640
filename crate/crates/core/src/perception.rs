//! Instance segmentation and optical flow sources, plus the post-processing
//! applied to raw region proposals (non-maximum suppression and track id
//! association across frames).

use std::collections::{BTreeMap, HashSet};

use log::warn;
use thiserror::Error;

use crate::frame::{FlowField, InstanceMap, InstanceMeta, RgbdFrame, Rgb};
use crate::geometry::Vec2;
use crate::image::Grid;
use crate::scalar::{clamp, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
}

/// Which implementation backs segmentation and flow for a pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    GroundTruth,
    NaiveFlow,
    Replay,
}

/// A possibly overlapping object hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub mask: Grid<bool>,
    pub class: u32,
    pub score: f32,
}

impl RegionProposal {
    pub fn new(mask: Grid<bool>, class: u32, score: f32) -> Result<Self, ProviderError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(ProviderError::InvalidProposal(format!("score {score} outside [0,1]")));
        }
        if class == 0 {
            return Err(ProviderError::InvalidProposal("class 0 is reserved for background".into()));
        }
        if !mask.as_slice().iter().any(|m| *m) {
            return Err(ProviderError::InvalidProposal("empty mask".into()));
        }
        Ok(Self { mask, class, score })
    }

    pub fn area(&self) -> usize {
        self.mask.as_slice().iter().filter(|m| **m).count()
    }
}

pub trait SegmentationProvider<T: Real> {
    fn segment(&mut self, frame: &RgbdFrame<T>) -> Result<Vec<RegionProposal>, ProviderError>;
}

pub trait FlowProvider<T: Real> {
    /// Backward flow from `cur` to `prev`.
    fn flow(&mut self, cur: &RgbdFrame<T>, prev: &RgbdFrame<T>) -> FlowField<T>;
}

/// Runs `provider`; an unavailable provider yields no proposals, so the frame
/// is treated as entirely static.
pub fn segment<T: Real, P: SegmentationProvider<T> + ?Sized>(
    provider: &mut P,
    frame: &RgbdFrame<T>,
) -> Vec<RegionProposal> {
    match provider.segment(frame) {
        Ok(p) => p,
        Err(e) => {
            warn!("segmentation failed for frame {}: {e}; treating frame as static", frame.index);
            Vec::new()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerceptionParams {
    /// Proposals overlapping an accepted one by more than this IoU are suppressed.
    pub nms_iou: f64,
    /// Minimum IoU between a warped current instance and a previous one to inherit its track id.
    pub assoc_iou: f64,
    /// Forward-backward error (pixels) at which confidence reaches 0.
    pub fb_max: f64,
    /// Matcher cost at which confidence reaches 0.
    pub cost_max: f64,
}

impl Default for PerceptionParams {
    fn default() -> Self {
        Self {
            nms_iou: 0.5,
            assoc_iou: 0.3,
            fb_max: 2.0,
            cost_max: 1.0,
        }
    }
}

pub fn mask_iou(a: &Grid<bool>, b: &Grid<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Merges proposals into a per-frame instance map by non-maximum suppression.
///
/// Surviving proposals are numbered 1.. in descending confidence; where masks
/// overlap the more confident one keeps the pixel.
pub fn resolve_proposals(
    width: usize,
    height: usize,
    proposals: &[RegionProposal],
    nms_iou: f64,
) -> InstanceMap {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .partial_cmp(&proposals[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut accepted: Vec<usize> = Vec::new();
    for i in order {
        if proposals[i].mask.dims() != (width, height) {
            warn!("dropping proposal with mismatched mask size");
            continue;
        }
        let suppressed = accepted
            .iter()
            .any(|&j| mask_iou(&proposals[i].mask, &proposals[j].mask) > nms_iou);
        if !suppressed {
            accepted.push(i);
        }
    }

    let mut map = InstanceMap::empty(width, height);
    let mut next = 1u32;
    for i in accepted {
        let p = &proposals[i];
        let mut count = 0;
        for (idx, m) in p.mask.as_slice().iter().enumerate() {
            if *m && map.ids.as_slice()[idx] == 0 {
                map.ids.as_mut_slice()[idx] = next;
                map.labels.as_mut_slice()[idx] = p.class;
                count += 1;
            }
        }
        if count > 0 {
            map.instances.push(InstanceMeta {
                id: next,
                class: p.class,
                pixel_count: count,
            });
            next += 1;
        }
    }
    map
}

/// Hands out persistent track ids. Ids are never reused within a run.
#[derive(Debug, Clone)]
pub struct IdAssociator {
    next_id: u32,
    assoc_iou: f64,
}

impl IdAssociator {
    pub fn new(assoc_iou: f64) -> Self {
        Self {
            next_id: 1,
            assoc_iou,
        }
    }

    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    /// Relabels `cur` with track ids inherited from `prev` where the flow-warped
    /// masks overlap, greedily by descending IoU; the rest get fresh ids.
    pub fn associate<T: Real>(
        &mut self,
        prev: Option<&InstanceMap>,
        cur: &InstanceMap,
        flow: &FlowField<T>,
    ) -> InstanceMap {
        let (w, h) = cur.dims();
        let mut assignment: BTreeMap<u32, u32> = BTreeMap::new();

        if let Some(prev) = prev.filter(|p| p.dims() == cur.dims() && flow.dims() == cur.dims()) {
            let mut warped: BTreeMap<u32, HashSet<usize>> = BTreeMap::new();
            for (x, y, &id) in cur.ids.iter_xy() {
                if id == 0 || !*flow.valid.get(x, y) {
                    continue;
                }
                let f = *flow.vectors.get(x, y);
                let tx = (T::lit(x as f64) + f.x).round();
                let ty = (T::lit(y as f64) + f.y).round();
                if tx < T::zero() || ty < T::zero() {
                    continue;
                }
                let (tx, ty) = (tx.to_usize().unwrap_or(w), ty.to_usize().unwrap_or(h));
                if tx < w && ty < h {
                    warped.entry(id).or_default().insert(ty * w + tx);
                }
            }

            let mut candidates: Vec<(f64, u32, u32)> = Vec::new();
            for (&cid, pixels) in &warped {
                let class = cur.meta(cid).map(|m| m.class);
                let mut inter: BTreeMap<u32, usize> = BTreeMap::new();
                for &p in pixels {
                    let pid = prev.ids.as_slice()[p];
                    if pid != 0 {
                        *inter.entry(pid).or_default() += 1;
                    }
                }
                for (pid, n) in inter {
                    let Some(pm) = prev.meta(pid) else { continue };
                    if Some(pm.class) != class {
                        continue;
                    }
                    let iou = n as f64 / (pixels.len() + pm.pixel_count - n) as f64;
                    if iou >= self.assoc_iou {
                        candidates.push((iou, cid, pid));
                    }
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut used_prev = HashSet::new();
            for (_, cid, pid) in candidates {
                if assignment.contains_key(&cid) || used_prev.contains(&pid) {
                    continue;
                }
                assignment.insert(cid, pid);
                used_prev.insert(pid);
            }
        }

        let mut metas: Vec<InstanceMeta> = cur.instances.clone();
        metas.sort_by_key(|m| m.id);
        for m in &metas {
            assignment.entry(m.id).or_insert_with(|| {
                let id = self.next_id;
                self.next_id += 1;
                id
            });
        }

        let ids = cur.ids.map(|id| if *id == 0 { 0 } else { assignment[id] });
        let mut instances: Vec<InstanceMeta> = metas
            .iter()
            .map(|m| InstanceMeta {
                id: assignment[&m.id],
                ..*m
            })
            .collect();
        instances.sort_by_key(|m| m.id);
        let _ = (w, h);
        InstanceMap {
            labels: cur.labels.clone(),
            ids,
            instances,
        }
    }
}

fn sample_flow<T: Real>(f: &FlowField<T>, u: Vec2<T>) -> Option<Vec2<T>> {
    let (w, h) = f.dims();
    if w == 0 || h == 0 {
        return None;
    }
    let max_x = T::lit((w - 1) as f64);
    let max_y = T::lit((h - 1) as f64);
    if !(u.x >= T::zero() && u.y >= T::zero() && u.x <= max_x && u.y <= max_y) {
        return None;
    }
    let x0 = u.x.floor().to_usize()?;
    let y0 = u.y.floor().to_usize()?;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    for (x, y) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
        if !*f.valid.get(x, y) {
            return None;
        }
    }
    let tx = u.x - T::lit(x0 as f64);
    let ty = u.y - T::lit(y0 as f64);
    let one = T::one();
    let lerp = |a: Vec2<T>, b: Vec2<T>, c: Vec2<T>, d: Vec2<T>| {
        a * ((one - tx) * (one - ty)) + b * (tx * (one - ty)) + c * ((one - tx) * ty) + d * (tx * ty)
    };
    Some(lerp(
        *f.vectors.get(x0, y0),
        *f.vectors.get(x1, y0),
        *f.vectors.get(x0, y1),
        *f.vectors.get(x1, y1),
    ))
}

/// Forward-backward consistency error `‖F(u) + F_inv(u + F(u))‖`, `None` where undefined.
pub fn forward_backward_error<T: Real>(flow: &FlowField<T>, inverse: &FlowField<T>, x: usize, y: usize) -> Option<T> {
    if !*flow.valid.get(x, y) {
        return None;
    }
    let f = *flow.vectors.get(x, y);
    let target = Vec2::new(T::lit(x as f64) + f.x, T::lit(y as f64) + f.y);
    let b = sample_flow(inverse, target)?;
    Some((f + b).norm())
}

/// Confidence `W(u) = clamp(1 − fb/fb_max) · clamp(1 − cost/cost_max)`.
///
/// `inverse` is the flow in the opposite direction; pixels whose
/// forward-backward error is undefined get 0.
pub fn confidence_weights<T: Real>(
    flow: &FlowField<T>,
    inverse: &FlowField<T>,
    cost: &Grid<T>,
    params: &PerceptionParams,
) -> Grid<T> {
    let (zero, one) = (T::zero(), T::one());
    let fb_max = T::lit(params.fb_max);
    let cost_max = T::lit(params.cost_max);
    Grid::from_fn(flow.dims().0, flow.dims().1, |x, y| {
        match forward_backward_error(flow, inverse, x, y) {
            None => zero,
            Some(fb) => {
                let a = clamp(one - fb / fb_max, zero, one);
                let b = clamp(one - *cost.get(x, y) / cost_max, zero, one);
                a * b
            }
        }
    })
}

pub fn luma(c: Rgb) -> u8 {
    ((77 * c[0] as u32 + 150 * c[1] as u32 + 29 * c[2] as u32) >> 8) as u8
}

/// Integer block-matching flow with SAD cost. Baseline quality only.
#[derive(Debug, Clone)]
pub struct NaiveFlow {
    /// Search radius in pixels.
    pub radius: i32,
    /// Patch half-size; patches are `(2r+1)²`.
    pub patch: i32,
    pub params: PerceptionParams,
}

impl Default for NaiveFlow {
    fn default() -> Self {
        Self {
            radius: 4,
            patch: 2,
            params: PerceptionParams::default(),
        }
    }
}

impl NaiveFlow {
    /// Raw block matching from `a` into `b`: returns (vectors, normalized SAD cost).
    pub fn block_match<T: Real>(&self, a: &Grid<u8>, b: &Grid<u8>) -> (Grid<Vec2<T>>, Grid<T>) {
        let (w, h) = a.dims();
        let (wi, hi) = (w as i32, h as i32);
        let px = |g: &Grid<u8>, x: i32, y: i32| -> i32 {
            *g.get(x.clamp(0, wi - 1) as usize, y.clamp(0, hi - 1) as usize) as i32
        };
        let area = ((2 * self.patch + 1) * (2 * self.patch + 1)) as f64;
        let mut vectors = Grid::new(w, h, Vec2::zero());
        let mut cost = Grid::new(w, h, T::zero());
        for y in 0..hi {
            for x in 0..wi {
                let mut best = (i64::MAX, i32::MAX, 0i32, 0i32);
                for dy in -self.radius..=self.radius {
                    for dx in -self.radius..=self.radius {
                        let (tx, ty) = (x + dx, y + dy);
                        if tx < 0 || ty < 0 || tx >= wi || ty >= hi {
                            continue;
                        }
                        let mut sad = 0i64;
                        for py in -self.patch..=self.patch {
                            for pxo in -self.patch..=self.patch {
                                sad += (px(a, x + pxo, y + py) - px(b, tx + pxo, ty + py)).abs() as i64;
                            }
                        }
                        let mag = dx * dx + dy * dy;
                        if sad < best.0 || (sad == best.0 && mag < best.1) {
                            best = (sad, mag, dx, dy);
                        }
                    }
                }
                vectors.set(x as usize, y as usize, Vec2::new(T::lit(best.2 as f64), T::lit(best.3 as f64)));
                cost.set(x as usize, y as usize, T::lit(best.0 as f64 / (255.0 * area)));
            }
        }
        (vectors, cost)
    }
}

impl<T: Real> FlowProvider<T> for NaiveFlow {
    fn flow(&mut self, cur: &RgbdFrame<T>, prev: &RgbdFrame<T>) -> FlowField<T> {
        let gc = cur.color.map(|c| luma(*c));
        let gp = prev.color.map(|c| luma(*c));
        let (bv, bc) = self.block_match::<T>(&gc, &gp);
        let (fv, fc) = self.block_match::<T>(&gp, &gc);
        let (w, h) = gc.dims();
        let valid = Grid::new(w, h, true);
        let backward = FlowField {
            vectors: bv,
            valid: valid.clone(),
            confidence: Grid::new(w, h, T::one()),
            cost: bc,
        };
        let forward = FlowField {
            vectors: fv,
            valid,
            confidence: Grid::new(w, h, T::one()),
            cost: fc,
        };
        let confidence = confidence_weights(&backward, &forward, &backward.cost, &self.params);
        FlowField {
            confidence,
            ..backward
        }
    }
}
