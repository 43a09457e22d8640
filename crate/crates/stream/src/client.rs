//! Reconstruction and exploration clients.

use std::io::{self, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use dynfuse_core::fusion::VoxelBlock;
use dynfuse_core::geometry::{CameraIntrinsics, Pose};
use dynfuse_core::frame::RgbdFrame;
use dynfuse_core::{Grid, Real};
use log::{debug, warn};
use thiserror::Error;

use crate::exploration::ExplorationState;
use crate::gateway::GatewayHub;
use crate::payload::{pose_to_wire, serialize_dyn_frame, Hello, Message, MetricsPayload, PosePayload, Role, TimeSyncPayload};
use crate::protocol::{read_packet, Codec, Packet, PacketType, ProtocolError};
use crate::queue::{lane_for, OutboundQueue, QueueError};
use crate::timesync::{estimate_offset, now_us, ClockSync, SyncSample, SYNC_ROUNDS};
use crate::traffic::{CountingReader, Direction, TrafficCounters, TrafficRecord};

const SYNC_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("writer thread panicked")]
    WriterPanicked,
}

/// Runs the four-timestamp exchange. Every packet read, replies included, is handed to `other`.
pub fn sync_clock(
    writer: &mut impl Write,
    reader: &mut impl Read,
    codec: Codec,
    rounds: usize,
    mut other: impl FnMut(Packet, usize),
) -> Result<ClockSync, ProtocolError> {
    let mut samples = Vec::with_capacity(rounds);
    for seq in 0..rounds as u32 {
        let t1 = now_us();
        let req = Message::TimeSync(TimeSyncPayload {
            reply: false,
            seq,
            t1,
            t2: 0,
            t3: 0,
        });
        writer.write_all(&req.encode(codec)?)?;
        writer.flush()?;
        loop {
            let (packet, wire) = match read_packet(reader) {
                Ok(Some(p)) => p,
                Ok(None) => return Err(ProtocolError::Io(io::ErrorKind::UnexpectedEof.into())),
                Err(ProtocolError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    warn!("time sync timed out; latency metrics unreliable");
                    return Ok(ClockSync {
                        offset_us: None,
                        samples: samples.len(),
                    });
                }
                Err(e) => return Err(e),
            };
            let t4 = now_us();
            if packet.kind == PacketType::TimeSync {
                if let Message::TimeSync(t) = Message::from_packet(&packet)? {
                    if t.reply && t.seq == seq {
                        samples.push(SyncSample { t1: t.t1, t2: t.t2, t3: t.t3, t4 });
                        other(packet, wire.len());
                        break;
                    }
                }
            }
            other(packet, wire.len());
        }
    }
    Ok(ClockSync {
        offset_us: estimate_offset(&samples),
        samples: samples.len(),
    })
}

fn connect(addr: impl ToSocketAddrs) -> io::Result<TcpStream> {
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    Ok(s)
}

type Pending = (PacketType, Vec<u8>);

/// What the writer actually put on the socket. Packets replaced in a
/// latest-wins slot never appear here.
#[derive(Debug, Clone, Default)]
pub struct SendReport {
    pub counters: TrafficCounters,
    /// One record per packet, stamped after the write returned.
    pub log: Vec<TrafficRecord>,
}

/// Sends the reconstruction stream to the server through a bounded queue.
pub struct ReconstructionClient {
    codec: Codec,
    queue: Arc<OutboundQueue<Pending>>,
    writer: Option<JoinHandle<io::Result<SendReport>>>,
    stream: TcpStream,
    pub sync: ClockSync,
    frames_sent: u64,
    last_frame: u64,
    /// Bytes handed to the queue per type, before any latest-wins replacement.
    pub emitted: TrafficCounters,
}

impl ReconstructionClient {
    pub fn connect(addr: impl ToSocketAddrs, codec: Codec, name: &str, voxel_size: f64, truncation: f64, queue_cap: usize) -> Result<Self, ClientError> {
        let mut stream = connect(addr)?;
        let hello = Message::Hello(Hello {
            role: Role::Reconstruction,
            voxel_size,
            truncation,
            name: name.into(),
        });
        stream.write_all(&hello.encode(codec)?)?;
        let mut read_half = stream.try_clone()?;
        read_half.set_read_timeout(Some(SYNC_TIMEOUT))?;
        let sync = sync_clock(&mut stream, &mut read_half, codec, SYNC_ROUNDS, |p, _| {
            if p.kind != PacketType::TimeSync {
                debug!("ignoring {:?} during sync", p.kind)
            }
        })?;
        let queue = Arc::new(OutboundQueue::<Pending>::new(queue_cap));
        let writer = {
            let queue = queue.clone();
            let mut w = stream.try_clone()?;
            thread::spawn(move || -> io::Result<SendReport> {
                let mut report = SendReport::default();
                while let Some((kind, bytes)) = queue.pop(None) {
                    w.write_all(&bytes)?;
                    report.counters.add(kind, bytes.len());
                    report.log.push(TrafficRecord {
                        timestamp_us: now_us(),
                        direction: Direction::Out,
                        kind,
                        bytes: bytes.len(),
                    });
                }
                w.flush()?;
                Ok(report)
            })
        };
        Ok(Self {
            codec,
            queue,
            writer: Some(writer),
            stream,
            sync,
            frames_sent: 0,
            last_frame: 0,
            emitted: TrafficCounters::default(),
        })
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        let kind = msg.packet_type();
        let bytes = msg.encode(self.codec)?;
        self.emitted.add(kind, bytes.len());
        self.queue.push(lane_for(kind), (kind, bytes))?;
        Ok(())
    }

    /// Sends one frame's model update, dynamic pixels and sensor pose, in that order.
    pub fn send_frame<T: Real>(
        &mut self,
        frame: &RgbdFrame<T>,
        dynamic_mask: &Grid<bool>,
        pose: &Pose<T>,
        intr: &CameraIntrinsics<T>,
        blocks: Vec<VoxelBlock>,
    ) -> Result<(), ClientError> {
        if !blocks.is_empty() {
            self.send(&Message::TsdfBlocks(blocks))?;
        }
        self.send(&Message::DynFrame(serialize_dyn_frame(frame, dynamic_mask, pose, intr)))?;
        self.send(&Message::Pose(PosePayload {
            frame_index: frame.index,
            timestamp_us: frame.timestamp_us,
            source: 0,
            pose: pose_to_wire(pose),
        }))?;
        self.frames_sent += 1;
        self.last_frame = frame.index;
        Ok(())
    }

    /// Signals the end of the stream, drains the queue and closes the connection.
    pub fn finish(mut self) -> Result<SendReport, ClientError> {
        self.send(&Message::Metrics(MetricsPayload {
            end_of_stream: true,
            last_frame_index: self.last_frame,
            frames_sent: self.frames_sent,
        }))?;
        self.queue.close();
        let sent = self.writer.take().expect("writer").join().map_err(|_| ClientError::WriterPanicked)??;
        let _ = self.stream.shutdown(Shutdown::Write);
        // Wait for the server to finish reading before the socket is dropped.
        let mut sink = [0u8; 256];
        let _ = self.stream.set_read_timeout(Some(Duration::from_secs(10)));
        while matches!(self.stream.read(&mut sink), Ok(n) if n > 0) {}
        Ok(sent)
    }
}

impl Drop for ReconstructionClient {
    fn drop(&mut self) {
        self.queue.close();
    }
}

/// One packet received by an exploration client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub wall_us: u64,
    pub kind: PacketType,
    pub bytes: usize,
    /// Frame index and capture timestamp for DYN_FRAME packets.
    pub frame: Option<(u64, u64)>,
}

#[derive(Debug, Default)]
pub struct StateCell {
    pub state: Mutex<ExplorationState>,
    pub changed: Condvar,
}

#[derive(Debug, Default)]
struct ClientLog {
    arrivals: Vec<Arrival>,
    counters: TrafficCounters,
    socket_bytes: u64,
    error: Option<String>,
    closed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExplorationReport {
    pub arrivals: Vec<Arrival>,
    pub counters: TrafficCounters,
    /// Every byte read from the socket.
    pub socket_bytes: u64,
    pub sync: ClockSync,
    pub error: Option<String>,
}

/// Headless exploration client; applies the received stream to an [`ExplorationState`].
pub struct ExplorationClient {
    cell: Arc<StateCell>,
    log: Arc<Mutex<ClientLog>>,
    stream: Mutex<TcpStream>,
    reader: Option<JoinHandle<()>>,
    codec: Codec,
    pub sync: ClockSync,
}

impl ExplorationClient {
    pub fn connect(addr: impl ToSocketAddrs, codec: Codec, name: &str, hub: Option<Arc<GatewayHub>>) -> Result<Self, ClientError> {
        let mut stream = connect(addr)?;
        let hello = Message::Hello(Hello {
            role: Role::Exploration,
            voxel_size: 0.0,
            truncation: 0.0,
            name: name.into(),
        });
        stream.write_all(&hello.encode(codec)?)?;
        let cell = Arc::new(StateCell::default());
        let log = Arc::new(Mutex::new(ClientLog::default()));
        let read_half = stream.try_clone()?;
        read_half.set_read_timeout(Some(SYNC_TIMEOUT))?;
        let mut reader = CountingReader::new(BufReader::new(read_half));
        let apply = {
            let cell = cell.clone();
            let log = log.clone();
            move |packet: Packet, bytes: usize| {
                let wall_us = now_us();
                let msg = Message::from_packet(&packet);
                let mut l = log.lock().expect("log lock");
                l.counters.add(packet.kind, bytes);
                let msg = match msg {
                    Ok(m) => m,
                    Err(e) => {
                        l.error = Some(e.to_string());
                        return false;
                    }
                };
                l.arrivals.push(Arrival {
                    wall_us,
                    kind: packet.kind,
                    bytes,
                    frame: match &msg {
                        Message::DynFrame(f) => Some((f.frame_index, f.timestamp_us)),
                        _ => None,
                    },
                });
                drop(l);
                let mut state = cell.state.lock().expect("state lock");
                let change = state.apply(&msg);
                if let Some(h) = &hub {
                    h.publish(&state, &change);
                }
                cell.changed.notify_all();
                true
            }
        };
        let apply_sync = apply.clone();
        let sync = sync_clock(&mut stream, &mut reader, codec, SYNC_ROUNDS, |p, n| {
            apply_sync(p, n);
        })?;
        reader.get_ref().get_ref().set_read_timeout(None)?;
        let handle = {
            let log = log.clone();
            let cell = cell.clone();
            let apply = apply;
            thread::spawn(move || {
                loop {
                    match read_packet(&mut reader) {
                        Ok(Some((packet, wire))) => {
                            if !apply(packet, wire.len()) {
                                break;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            log.lock().expect("log lock").error = Some(e.to_string());
                            break;
                        }
                    }
                }
                let mut l = log.lock().expect("log lock");
                l.socket_bytes = reader.count;
                l.closed = true;
                drop(l);
                let _g = cell.state.lock().expect("state lock");
                cell.changed.notify_all();
            })
        };
        Ok(Self {
            cell,
            log,
            stream: Mutex::new(stream),
            reader: Some(handle),
            codec,
            sync,
        })
    }

    pub fn cell(&self) -> Arc<StateCell> {
        self.cell.clone()
    }

    pub fn snapshot(&self) -> ExplorationState {
        self.cell.state.lock().expect("state lock").clone()
    }

    /// Publishes this user's pose; the server relays it to other clients.
    pub fn send_pose(&self, pose: PosePayload) -> Result<(), ClientError> {
        let bytes = Message::Pose(pose).encode(self.codec)?;
        self.stream.lock().expect("stream lock").write_all(&bytes)?;
        Ok(())
    }

    /// Waits until `pred` holds on the state, the connection closes, or the timeout passes.
    pub fn wait_for(&self, timeout: Duration, mut pred: impl FnMut(&ExplorationState) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut state = self.cell.state.lock().expect("state lock");
        loop {
            if pred(&state) {
                return true;
            }
            if self.log.lock().expect("log lock").closed {
                return false;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            state = self.cell.changed.wait_timeout(state, (deadline - now).min(Duration::from_millis(50))).expect("state lock").0;
        }
    }

    pub fn wait_for_end(&self, timeout: Duration) -> bool {
        self.wait_for(timeout, |s| s.ended.is_some())
    }

    /// Closes the connection and returns what was received.
    pub fn close(mut self) -> (ExplorationState, ExplorationReport) {
        let _ = self.stream.lock().expect("stream lock").shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
        let l = std::mem::take(&mut *self.log.lock().expect("log lock"));
        let state = self.snapshot();
        (
            state,
            ExplorationReport {
                arrivals: l.arrivals,
                counters: l.counters,
                socket_bytes: l.socket_bytes,
                sync: self.sync,
                error: l.error,
            },
        )
    }
}

impl Drop for ExplorationClient {
    fn drop(&mut self) {
        if let Ok(s) = self.stream.lock() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}
