//! Browser-facing gateway: mirrors exploration state changes to WebSocket
//! viewers as length-prefixed binary messages.
//!
//! Each WebSocket binary message holds one record: type (u8), payload length
//! (u32 LE), payload. Types reuse the packet numbering:
//!
//! - `0x03` mesh upsert: [`BlockMesh::encode`]; zero triangles means the block is empty
//! - `0x04` dynamic cloud: frame index u64, timestamp u64, count u32, then xyz f32 and rgb per point
//! - `0x05` pose: the POSE payload
//! - `0x06` mesh removal: the BLOCK_REMOVE payload

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use dynfuse_core::fusion::{BlockCoord, MeshVertex};
use dynfuse_core::Rgb;
use log::{debug, info, warn};
use tungstenite::{Message as WsMessage, WebSocket};

use crate::client::StateCell;
use crate::exploration::{BlockMesh, Change, DynamicCloud, ExplorationState};
use crate::payload::{Message, PosePayload};
use crate::protocol::{PacketType, ProtocolError};
use crate::queue::{lane_for, OutboundQueue};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, PartialEq)]
pub enum ViewerMessage {
    MeshUpsert(BlockMesh),
    MeshRemove(Vec<BlockCoord>),
    Cloud(DynamicCloud),
    Pose(PosePayload),
}

impl ViewerMessage {
    pub fn kind(&self) -> PacketType {
        match self {
            ViewerMessage::MeshUpsert(_) => PacketType::McBlocks,
            ViewerMessage::MeshRemove(_) => PacketType::BlockRemove,
            ViewerMessage::Cloud(_) => PacketType::DynFrame,
            ViewerMessage::Pose(_) => PacketType::Pose,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = match self {
            ViewerMessage::MeshUpsert(m) => m.encode(),
            ViewerMessage::MeshRemove(c) => Message::BlockRemove(c.clone()).to_payload(),
            ViewerMessage::Pose(p) => Message::Pose(p.clone()).to_payload(),
            ViewerMessage::Cloud(c) => {
                let mut w = Writer::with_capacity(20 + c.points.len() * 15);
                w.u64(c.frame_index).u64(c.timestamp_us).u32(c.points.len() as u32);
                for (p, rgb) in &c.points {
                    for v in p {
                        w.f32(*v as f32);
                    }
                    w.bytes(rgb);
                }
                w.finish()
            }
        };
        let mut out = Vec::with_capacity(5 + payload.len());
        out.push(self.kind() as u8);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let kind = PacketType::from_u8(r.u8()?)?;
        let n = r.u32()? as usize;
        let payload = r.take(n)?;
        r.finish()?;
        let mut r = Reader::new(payload);
        let msg = match kind {
            PacketType::McBlocks => {
                let coord = BlockCoord([r.i32()?, r.i32()?, r.i32()?]);
                let nv = r.count(19)?;
                let mut vertices = Vec::with_capacity(nv);
                for _ in 0..nv {
                    let position = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
                    let c = r.take(3)?;
                    vertices.push(MeshVertex {
                        position,
                        rgb: [c[0], c[1], c[2]],
                        motion: r.f32()? as f64,
                    });
                }
                let nt = r.count(12)?;
                let mut triangles = Vec::with_capacity(nt);
                for _ in 0..nt {
                    let t = [r.u32()?, r.u32()?, r.u32()?];
                    if t.iter().any(|i| *i as usize >= nv) {
                        return Err(ProtocolError::Malformed("triangle index out of range".into()));
                    }
                    triangles.push(t);
                }
                ViewerMessage::MeshUpsert(BlockMesh { coord, vertices, triangles })
            }
            PacketType::DynFrame => {
                let frame_index = r.u64()?;
                let timestamp_us = r.u64()?;
                let n = r.count(15)?;
                let mut points: Vec<([f64; 3], Rgb)> = Vec::with_capacity(n);
                for _ in 0..n {
                    let p = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
                    let c = r.take(3)?;
                    points.push((p, [c[0], c[1], c[2]]));
                }
                ViewerMessage::Cloud(DynamicCloud {
                    frame_index,
                    timestamp_us,
                    points,
                })
            }
            PacketType::Pose | PacketType::BlockRemove => {
                return match Message::from_payload(kind, payload)? {
                    Message::Pose(p) => Ok(ViewerMessage::Pose(p)),
                    Message::BlockRemove(c) => Ok(ViewerMessage::MeshRemove(c)),
                    _ => unreachable!(),
                }
            }
            k => return Err(ProtocolError::Unexpected(k)),
        };
        r.finish()?;
        Ok(msg)
    }
}

type PoseForwarder = Box<dyn Fn(PosePayload) + Send + Sync>;

/// Fan-out point between the exploration client and connected viewers.
pub struct GatewayHub {
    queue_cap: usize,
    subscribers: Mutex<Vec<Arc<OutboundQueue<Vec<u8>>>>>,
    forward_pose: Mutex<Option<PoseForwarder>>,
}

impl std::fmt::Debug for GatewayHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GatewayHub").field("viewers", &self.viewers()).finish()
    }
}

impl GatewayHub {
    pub fn new(queue_cap: usize) -> Arc<Self> {
        Arc::new(Self {
            queue_cap,
            subscribers: Mutex::new(Vec::new()),
            forward_pose: Mutex::new(None),
        })
    }

    pub fn viewers(&self) -> usize {
        self.subscribers.lock().expect("hub lock").len()
    }

    /// Viewer poses are handed to this callback (normally the exploration client's uplink).
    pub fn set_pose_forwarder(&self, f: impl Fn(PosePayload) + Send + Sync + 'static) {
        *self.forward_pose.lock().expect("hub lock") = Some(Box::new(f));
    }

    fn messages_for(state: &ExplorationState, change: &Change) -> Vec<ViewerMessage> {
        let vs = state.voxel_size.unwrap_or(0.0);
        match change {
            Change::Blocks(coords) => coords
                .iter()
                .filter_map(|c| state.blocks.get(c))
                .map(|b| ViewerMessage::MeshUpsert(BlockMesh::from_block(b, vs)))
                .collect(),
            Change::Removed(c) if !c.is_empty() => vec![ViewerMessage::MeshRemove(c.clone())],
            Change::Cloud => state.cloud.clone().map(ViewerMessage::Cloud).into_iter().collect(),
            Change::Pose(0) => state.sensor_pose.clone().map(ViewerMessage::Pose).into_iter().collect(),
            Change::Pose(s) => state.user_poses.get(s).cloned().map(ViewerMessage::Pose).into_iter().collect(),
            _ => Vec::new(),
        }
    }

    /// Full state as viewer messages: non-empty meshes, then cloud and poses.
    pub fn snapshot(state: &ExplorationState) -> Vec<ViewerMessage> {
        let vs = state.voxel_size.unwrap_or(0.0);
        let mut out: Vec<ViewerMessage> = state
            .blocks
            .values()
            .map(|b| BlockMesh::from_block(b, vs))
            .filter(|m| !m.triangles.is_empty())
            .map(ViewerMessage::MeshUpsert)
            .collect();
        out.extend(state.cloud.clone().map(ViewerMessage::Cloud));
        out.extend(state.sensor_pose.clone().map(ViewerMessage::Pose));
        out.extend(state.user_poses.values().cloned().map(ViewerMessage::Pose));
        out
    }

    /// Called with the state lock held, after `change` was applied.
    pub fn publish(&self, state: &ExplorationState, change: &Change) {
        let mut subs = self.subscribers.lock().expect("hub lock");
        if subs.is_empty() {
            return;
        }
        let msgs = Self::messages_for(state, change);
        subs.retain(|q| {
            for m in &msgs {
                if let Err(e) = q.push(lane_for(m.kind()), m.encode()) {
                    debug!("dropping viewer: {e}");
                    return false;
                }
            }
            true
        });
    }

    /// Registers a viewer queue preloaded with the snapshot. Hold the state lock while calling.
    fn subscribe(&self, state: &ExplorationState) -> Arc<OutboundQueue<Vec<u8>>> {
        let q = Arc::new(OutboundQueue::new(self.queue_cap.max(state.blocks.len() + 16)));
        for m in Self::snapshot(state) {
            let _ = q.push(lane_for(m.kind()), m.encode());
        }
        self.subscribers.lock().expect("hub lock").push(q.clone());
        q
    }
}

pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn spawn_gateway(listen: &str, cell: Arc<StateCell>, hub: Arc<GatewayHub>) -> io::Result<GatewayHandle> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    info!("viewer gateway on ws://{addr}");
    let stop = Arc::new(AtomicBool::new(false));
    let accept = {
        let stop = stop.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let (cell, hub, stop) = (cell.clone(), hub.clone(), stop.clone());
                thread::spawn(move || {
                    if let Err(e) = serve_viewer(stream, &cell, &hub, &stop) {
                        debug!("viewer closed: {e}");
                    }
                });
            }
        })
    };
    Ok(GatewayHandle {
        addr,
        stop,
        accept: Some(accept),
    })
}

fn serve_viewer(stream: TcpStream, cell: &StateCell, hub: &GatewayHub, stop: &AtomicBool) -> Result<(), tungstenite::Error> {
    let _ = stream.set_nodelay(true);
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    let queue = {
        let state = cell.state.lock().expect("state lock");
        hub.subscribe(&state)
    };
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let result = loop {
        if stop.load(Ordering::SeqCst) || queue.is_closed() {
            break Ok(());
        }
        let mut sent = false;
        while let Some(m) = queue.try_pop() {
            ws.write(WsMessage::binary(m))?;
            sent = true;
        }
        if sent {
            ws.flush()?;
        }
        match ws.read() {
            Ok(WsMessage::Binary(b)) => match ViewerMessage::decode(&b) {
                Ok(ViewerMessage::Pose(p)) => {
                    if let Some(f) = hub.forward_pose.lock().expect("hub lock").as_ref() {
                        f(p);
                    }
                }
                Ok(_) => warn!("viewer sent an unsupported message"),
                Err(e) => warn!("viewer message: {e}"),
            },
            Ok(WsMessage::Close(_)) => break Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => break Err(e),
        }
    };
    queue.close();
    hub.subscribers.lock().expect("hub lock").retain(|q| !Arc::ptr_eq(q, &queue));
    result
}
