//! Per-frame reconstruction: perception, tracking, scoring and fusion in
//! frame order.

use std::collections::BTreeSet;

use log::{debug, warn};

use crate::dynamicity::{DynamicityScorer, FrameScores};
use crate::frame::{DynParams, FlowField, InstanceMap, RgbdFrame};
use crate::fusion::{integrate, BlockCoord, FusionInput, FusionParams, VoxelBlockMap};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::image::Grid;
use crate::odometry::{estimate_pose, flow_3d, odometry_flow, OdometryParams, OdometryResult};
use crate::perception::{resolve_proposals, segment, FlowProvider, IdAssociator, PerceptionParams, SegmentationProvider};
use crate::scalar::Real;

/// Where camera poses come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoseSource {
    #[default]
    Icp,
    /// Poses supplied with every frame (synthetic ground truth).
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams<T> {
    pub dynamics: DynParams<T>,
    pub fusion: FusionParams,
    pub perception: PerceptionParams,
    pub odometry: OdometryParams,
    pub pose_source: PoseSource,
}

impl<T: Real> Default for PipelineParams<T> {
    fn default() -> Self {
        let dynamics = DynParams::<T>::default();
        Self {
            fusion: FusionParams {
                tau: dynamics.tau.as_f64(),
                tau_sdf: dynamics.tau_sdf.as_f64(),
                ..FusionParams::default()
            },
            dynamics,
            perception: PerceptionParams::default(),
            odometry: OdometryParams::default(),
            pose_source: PoseSource::Icp,
        }
    }
}

/// Result of processing one frame.
#[derive(Debug, Clone)]
pub struct FrameOutput<T> {
    pub index: u64,
    pub timestamp_us: u64,
    pub odometry: OdometryResult<T>,
    pub instances: InstanceMap,
    pub scores: FrameScores<T>,
    /// Blocks changed by this frame's integration; empty when not fused.
    pub dirty: BTreeSet<BlockCoord>,
    pub fused: bool,
}

impl<T: Real> FrameOutput<T> {
    pub fn pose(&self) -> &Pose<T> {
        &self.odometry.absolute
    }
}

/// Owns the ordered per-run state: previous frame, track ids, scores and the model.
pub struct Reconstructor<T: Real> {
    pub intr: CameraIntrinsics<T>,
    pub params: PipelineParams<T>,
    map: VoxelBlockMap,
    associator: IdAssociator,
    scorer: DynamicityScorer<T>,
    prev: Option<(RgbdFrame<T>, Pose<T>, InstanceMap)>,
}

impl<T: Real> Reconstructor<T> {
    pub fn new(intr: CameraIntrinsics<T>, params: PipelineParams<T>) -> Self {
        Self {
            map: VoxelBlockMap::new(params.fusion.voxel_size, params.fusion.truncation),
            associator: IdAssociator::new(params.perception.assoc_iou),
            scorer: DynamicityScorer::new(params.dynamics),
            prev: None,
            intr,
            params,
        }
    }

    pub fn map(&self) -> &VoxelBlockMap {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut VoxelBlockMap {
        &mut self.map
    }

    pub fn scorer(&self) -> &DynamicityScorer<T> {
        &self.scorer
    }

    /// Processes the next frame. `external_pose` is used when the pose source
    /// is external and is otherwise ignored; the first frame always defines
    /// the world origin.
    pub fn process(
        &mut self,
        frame: RgbdFrame<T>,
        seg: &mut dyn SegmentationProvider<T>,
        flow_src: &mut dyn FlowProvider<T>,
        external_pose: Option<&Pose<T>>,
    ) -> FrameOutput<T> {
        let (w, h) = (frame.width(), frame.height());
        let proposals = segment(seg, &frame);
        let per_frame = resolve_proposals(w, h, &proposals, self.params.perception.nms_iou);

        let (odometry, flow, odo, flow3) = match &self.prev {
            None => {
                let odometry = OdometryResult::from_poses(&Pose::identity(), Pose::identity());
                (odometry, FlowField::invalid(w, h), FlowField::invalid(w, h), Grid::new(w, h, Vec3::zero()))
            }
            Some((prev, prev_pose, _)) => {
                let odometry = match (self.params.pose_source, external_pose) {
                    (PoseSource::External, Some(p)) => OdometryResult::from_poses(prev_pose, *p),
                    (PoseSource::External, None) => {
                        warn!("frame {}: external pose missing, falling back to ICP", frame.index);
                        estimate_pose(prev, &frame, &self.intr, prev_pose, &Pose::identity(), &self.params.odometry)
                    }
                    (PoseSource::Icp, _) => {
                        estimate_pose(prev, &frame, &self.intr, prev_pose, &Pose::identity(), &self.params.odometry)
                    }
                };
                if !odometry.converged {
                    warn!("frame {}: odometry failed ({:?})", frame.index, odometry.failure);
                }
                let flow = flow_src.flow(&frame, prev);
                let odo = odometry_flow(&frame.depth, &odometry.absolute, prev_pose, &self.intr);
                let (flow3, _) = flow_3d(&flow, &frame.depth, &prev.depth, &odometry.absolute, prev_pose, &self.intr);
                (odometry, flow, odo, flow3)
            }
        };

        let prev_instances = self.prev.as_ref().map(|p| &p.2);
        let instances = self.associator.associate(prev_instances, &per_frame, &flow);
        let scores = self.scorer.process(&flow, &odo, &instances, &flow3);

        let fused = odometry.converged;
        let dirty = if fused {
            let input = FusionInput {
                depth: &frame.depth,
                color: &frame.color,
                pose: &odometry.absolute,
                intr: &self.intr,
                scores: &scores.dynamicity,
                accumulated: &scores.accumulated,
                dynamic_mask: &scores.dynamic_mask,
                frame_index: frame.index,
            };
            integrate(&input, &mut self.map, &self.params.fusion)
        } else {
            BTreeSet::new()
        };
        debug!(
            "frame {}: {} instances, {} dynamic px, {} dirty blocks",
            frame.index,
            instances.instances.len(),
            scores.dynamic_pixel_count(),
            dirty.len()
        );

        let out = FrameOutput {
            index: frame.index,
            timestamp_us: frame.timestamp_us,
            odometry: odometry.clone(),
            instances: instances.clone(),
            scores,
            dirty,
            fused,
        };
        self.prev = Some((frame, odometry.absolute, instances));
        out
    }
}
