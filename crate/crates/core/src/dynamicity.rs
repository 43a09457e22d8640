//! Dynamicity scoring: end-point error between measured and camera-induced
//! flow, per-instance histogram modes, normalization, temporal smoothing,
//! classification and motion accumulation.

use std::collections::BTreeMap;

use crate::frame::{DynParams, FlowField, InstanceMap, UncertaintyPolicy};
use crate::geometry::Vec3;
use crate::image::{warp_image, Grid};
use crate::scalar::Real;

/// Score band of an instance before hysteresis is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Static,
    Dynamic,
    Uncertain,
}

/// Resolved per-instance label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MotionLabel {
    #[default]
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceScore<T> {
    pub track_id: u32,
    /// Histogram mode of the end-point error, pixels.
    pub raw_mode: T,
    pub normalized_mode: T,
    pub smoothed: T,
    pub classification: Classification,
    pub label: MotionLabel,
}

/// Weighted end-point error `W·‖F − Ψ‖` and the mask of pixels where both flows are valid.
pub fn end_point_error<T: Real>(flow: &FlowField<T>, odo: &FlowField<T>) -> (Grid<T>, Grid<bool>) {
    let (w, h) = flow.dims();
    assert_eq!((w, h), odo.dims(), "end_point_error: flow dimensions differ");
    let mut err = Grid::new(w, h, T::zero());
    let mut valid = Grid::new(w, h, false);
    for i in 0..w * h {
        if flow.valid.as_slice()[i] && odo.valid.as_slice()[i] {
            let d = flow.vectors.as_slice()[i] - odo.vectors.as_slice()[i];
            err.as_mut_slice()[i] = flow.confidence.as_slice()[i] * d.norm();
            valid.as_mut_slice()[i] = true;
        }
    }
    (err, valid)
}

/// Builds a histogram with `bin_width` bins starting at 0.
pub fn histogram<T: Real>(values: impl IntoIterator<Item = T>, bin_width: T) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::new();
    for v in values {
        let b = (v.max(T::zero()) / bin_width).floor().to_usize().unwrap_or(0);
        if b >= counts.len() {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    counts
}

/// Index of the bin chosen as an instance's motion evidence.
///
/// A mode is a maximal run of equal nonzero counts whose neighbours on both
/// sides are lower; it is represented by its rightmost bin. The rightmost mode
/// with at least `min_size` pixels is chosen, otherwise the largest bin
/// (rightmost on ties).
pub fn select_mode(counts: &[usize], min_size: usize) -> Option<usize> {
    let mut chosen = None;
    let mut i = 0;
    while i < counts.len() {
        let c = counts[i];
        let mut end = i;
        while end + 1 < counts.len() && counts[end + 1] == c {
            end += 1;
        }
        let left_lower = i == 0 || counts[i - 1] < c;
        let right_lower = end + 1 == counts.len() || counts[end + 1] < c;
        if c > 0 && left_lower && right_lower && c >= min_size {
            chosen = Some(end);
        }
        i = end + 1;
    }
    chosen.or_else(|| {
        let max = *counts.iter().max()?;
        (max > 0).then(|| counts.iter().rposition(|c| *c == max).unwrap())
    })
}

/// Rightmost qualifying histogram mode (bin center, pixels) for every
/// instance with at least one valid pixel, keyed by instance id.
pub fn instance_modes<T: Real>(
    err: &Grid<T>,
    valid: &Grid<bool>,
    instances: &InstanceMap,
    params: &DynParams<T>,
) -> BTreeMap<u32, T> {
    let mut per: BTreeMap<u32, Vec<T>> = BTreeMap::new();
    for ((id, e), v) in instances.ids.as_slice().iter().zip(err.as_slice()).zip(valid.as_slice()) {
        if *id != 0 && *v {
            per.entry(*id).or_default().push(*e);
        }
    }
    per.into_iter()
        .filter_map(|(id, values)| {
            let n = values.len();
            let counts = histogram(values, params.bin_width);
            let bin = select_mode(&counts, params.min_mode_size(n))?;
            Some((id, (T::lit(bin as f64) + T::lit(0.5)) * params.bin_width))
        })
        .collect()
}

/// Shifts by the smallest mode and rescales by `delta`, clamping at 0.
///
/// Returns the normalized per-pixel errors and per-instance modes. Without
/// any mode the frame is treated as static.
pub fn normalize_scores<T: Real>(
    err: &Grid<T>,
    valid: &Grid<bool>,
    modes: &BTreeMap<u32, T>,
    delta: T,
) -> (Grid<T>, BTreeMap<u32, T>) {
    let Some(min) = modes.values().copied().reduce(T::min) else {
        return (Grid::new(err.width(), err.height(), T::zero()), BTreeMap::new());
    };
    let norm = |e: T| (delta * (e - min)).max(T::zero());
    let mut out = Grid::new(err.width(), err.height(), T::zero());
    for i in 0..err.as_slice().len() {
        if valid.as_slice()[i] {
            out.as_mut_slice()[i] = norm(err.as_slice()[i]);
        }
    }
    (out, modes.iter().map(|(k, v)| (*k, norm(*v))).collect())
}

/// Exponential moving average of normalized modes per track.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSmoother<T> {
    scores: BTreeMap<u32, T>,
}

impl<T: Real> ScoreSmoother<T> {
    pub fn new() -> Self {
        Self {
            scores: BTreeMap::new(),
        }
    }

    /// Folds in one frame. Tracks absent from `current` decay by `1 − alpha`
    /// and are dropped once negligible.
    pub fn update(&mut self, current: &BTreeMap<u32, T>, alpha: T) -> &BTreeMap<u32, T> {
        let keep = T::one() - alpha;
        for (id, s) in self.scores.iter_mut() {
            if !current.contains_key(id) {
                *s *= keep;
            }
        }
        for (id, s) in current {
            let next = match self.scores.get(id) {
                Some(old) => alpha * *s + keep * *old,
                None => *s,
            };
            self.scores.insert(*id, next);
        }
        self.scores.retain(|_, s| *s > T::lit(1e-12));
        &self.scores
    }

    pub fn get(&self, id: u32) -> Option<T> {
        self.scores.get(&id).copied()
    }

    pub fn scores(&self) -> &BTreeMap<u32, T> {
        &self.scores
    }
}

/// Frames after which a score `initial` decaying by `1 − alpha` per frame drops below `tau`.
pub fn frames_to_settle(initial: f64, tau: f64, alpha: f64) -> usize {
    if initial < tau || alpha >= 1.0 {
        return if initial < tau { 0 } else { 1 };
    }
    ((tau / initial).ln() / (1.0 - alpha).ln()).ceil().max(0.0) as usize
}

pub fn classify<T: Real>(score: T, tau: T) -> Classification {
    if score >= tau {
        Classification::Dynamic
    } else if score <= T::one() {
        Classification::Static
    } else {
        Classification::Uncertain
    }
}

/// Resolves a band into a label. `previous` is `None` for new tracks.
pub fn resolve_label(c: Classification, previous: Option<MotionLabel>, policy: UncertaintyPolicy) -> MotionLabel {
    match c {
        Classification::Dynamic => MotionLabel::Dynamic,
        Classification::Static => MotionLabel::Static,
        Classification::Uncertain => match policy {
            UncertaintyPolicy::Hysteresis => previous.unwrap_or_default(),
            UncertaintyPolicy::AssumeStatic => MotionLabel::Static,
            UncertaintyPolicy::AssumeDynamic => MotionLabel::Dynamic,
        },
    }
}

/// Builds the score map and labels every instance in `instances`.
///
/// Instance pixels carry the smoothed score of their track, background pixels
/// the normalized per-pixel error.
pub fn classify_and_propagate<T: Real>(
    smoothed: &BTreeMap<u32, T>,
    instances: &InstanceMap,
    normalized_err: &Grid<T>,
    tau: T,
    policy: UncertaintyPolicy,
    previous: &BTreeMap<u32, MotionLabel>,
) -> (Grid<T>, BTreeMap<u32, (Classification, MotionLabel)>) {
    let score_of = |id: u32| smoothed.get(&id).copied().unwrap_or_else(T::zero);
    let labels: BTreeMap<u32, (Classification, MotionLabel)> = instances
        .instances
        .iter()
        .map(|m| {
            let c = classify(score_of(m.id), tau);
            (m.id, (c, resolve_label(c, previous.get(&m.id).copied(), policy)))
        })
        .collect();
    let mut s = normalized_err.clone();
    for (i, id) in instances.ids.as_slice().iter().enumerate() {
        if *id != 0 {
            s.as_mut_slice()[i] = score_of(*id);
        }
    }
    (s, labels)
}

/// `A_k = warp(A_{k−1}, F_k) + ‖F̂_k‖`.
pub fn accumulate_motion<T: Real>(prev: &Grid<T>, flow: &FlowField<T>, flow3: &Grid<Vec3<T>>) -> Grid<T> {
    let mut acc = warp_image(prev, flow);
    for (a, f) in acc.as_mut_slice().iter_mut().zip(flow3.as_slice()) {
        *a += f.norm();
    }
    acc
}

/// Pixels of instances labelled dynamic. Background is never dynamic.
pub fn dynamic_mask(instances: &InstanceMap, labels: &BTreeMap<u32, MotionLabel>) -> Grid<bool> {
    instances
        .ids
        .map(|id| *id != 0 && labels.get(id) == Some(&MotionLabel::Dynamic))
}

/// Per-frame outputs of [`DynamicityScorer::process`].
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores<T> {
    pub error: Grid<T>,
    pub normalized_error: Grid<T>,
    /// `S_k`.
    pub dynamicity: Grid<T>,
    /// `A_k`, meters.
    pub accumulated: Grid<T>,
    pub dynamic_mask: Grid<bool>,
    pub instances: Vec<InstanceScore<T>>,
}

impl<T: Real> FrameScores<T> {
    pub fn dynamic_pixel_count(&self) -> usize {
        self.dynamic_mask.as_slice().iter().filter(|m| **m).count()
    }

    pub fn instance(&self, track_id: u32) -> Option<&InstanceScore<T>> {
        self.instances.iter().find(|s| s.track_id == track_id)
    }
}

/// Ordered per-run scoring state: smoothed scores, labels and the accumulation map.
#[derive(Debug, Clone)]
pub struct DynamicityScorer<T> {
    pub params: DynParams<T>,
    smoother: ScoreSmoother<T>,
    labels: BTreeMap<u32, MotionLabel>,
    accumulated: Option<Grid<T>>,
}

impl<T: Real> DynamicityScorer<T> {
    pub fn new(params: DynParams<T>) -> Self {
        Self {
            params,
            smoother: ScoreSmoother::new(),
            labels: BTreeMap::new(),
            accumulated: None,
        }
    }

    pub fn labels(&self) -> &BTreeMap<u32, MotionLabel> {
        &self.labels
    }

    pub fn smoothed(&self) -> &BTreeMap<u32, T> {
        self.smoother.scores()
    }

    /// Scores one frame. `instances` must already carry track ids.
    pub fn process(
        &mut self,
        flow: &FlowField<T>,
        odo: &FlowField<T>,
        instances: &InstanceMap,
        flow3: &Grid<Vec3<T>>,
    ) -> FrameScores<T> {
        let p = self.params;
        let (err, valid) = end_point_error(flow, odo);
        let modes = instance_modes(&err, &valid, instances, &p);
        let (normalized_error, normalized) = normalize_scores(&err, &valid, &modes, p.delta);
        let smoothed = self.smoother.update(&normalized, p.alpha).clone();
        let (dynamicity, labels) =
            classify_and_propagate(&smoothed, instances, &normalized_error, p.tau, p.uncertainty, &self.labels);

        for (id, (_, label)) in &labels {
            self.labels.insert(*id, *label);
        }
        let live: std::collections::BTreeSet<u32> =
            smoothed.keys().chain(labels.keys()).copied().collect();
        self.labels.retain(|id, _| live.contains(id));

        let label_only: BTreeMap<u32, MotionLabel> = labels.iter().map(|(k, v)| (*k, v.1)).collect();
        let mask = dynamic_mask(instances, &label_only);

        let (w, h) = err.dims();
        let prev_acc = self.accumulated.take().unwrap_or_else(|| Grid::new(w, h, T::zero()));
        let accumulated = accumulate_motion(&prev_acc, flow, flow3);
        self.accumulated = Some(accumulated.clone());

        let instances_out = labels
            .iter()
            .map(|(id, (c, l))| InstanceScore {
                track_id: *id,
                raw_mode: modes.get(id).copied().unwrap_or_else(T::zero),
                normalized_mode: normalized.get(id).copied().unwrap_or_else(T::zero),
                smoothed: smoothed.get(id).copied().unwrap_or_else(T::zero),
                classification: *c,
                label: *l,
            })
            .collect();

        FrameScores {
            error: err,
            normalized_error,
            dynamicity,
            accumulated,
            dynamic_mask: mask,
            instances: instances_out,
        }
    }
}
