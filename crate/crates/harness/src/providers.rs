//! Ground-truth perception: instance masks and flow handed over from the
//! renderer or a recorded sequence, looked up by frame index.

use std::collections::BTreeMap;

use dynfuse_core::frame::{FlowField, RgbdFrame};
use dynfuse_core::perception::{FlowProvider, ProviderError, SegmentationProvider};
use dynfuse_core::{InstanceMap, RegionProposal};
use log::warn;

/// Reports each ground-truth instance as one proposal with score 1.
#[derive(Debug, Default)]
pub struct GtSegmentation {
    pending: BTreeMap<u64, InstanceMap>,
}

impl GtSegmentation {
    pub fn push(&mut self, index: u64, map: InstanceMap) {
        self.pending.insert(index, map);
    }
}

impl SegmentationProvider<f64> for GtSegmentation {
    fn segment(&mut self, frame: &RgbdFrame<f64>) -> Result<Vec<RegionProposal>, ProviderError> {
        let map = self
            .pending
            .remove(&frame.index)
            .ok_or_else(|| ProviderError::Unavailable(format!("no ground truth for frame {}", frame.index)))?;
        self.pending.retain(|k, _| *k > frame.index);
        map.instances
            .iter()
            .map(|m| RegionProposal::new(map.mask_of(m.id), m.class, 1.0))
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct GtFlow {
    pending: BTreeMap<u64, FlowField<f64>>,
}

impl GtFlow {
    pub fn push(&mut self, index: u64, flow: FlowField<f64>) {
        self.pending.insert(index, flow);
    }
}

impl FlowProvider<f64> for GtFlow {
    fn flow(&mut self, cur: &RgbdFrame<f64>, _prev: &RgbdFrame<f64>) -> FlowField<f64> {
        let found = self.pending.remove(&cur.index);
        self.pending.retain(|k, _| *k > cur.index);
        match found {
            Some(f) if f.dims() == (cur.width(), cur.height()) => f,
            Some(_) | None => {
                warn!("no usable ground-truth flow for frame {}", cur.index);
                FlowField::invalid(cur.width(), cur.height())
            }
        }
    }
}
