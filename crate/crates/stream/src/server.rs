//! Relay server: keeps a replica of the reconstruction model, converts TSDF
//! updates to Marching Cubes blocks and fans them out to exploration clients.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use dynfuse_core::fusion::{extract_mc_block, BlockCoord, McBlock, VoxelBlockMap};
use log::{debug, info, warn};

use crate::exploration::{mc_digest, StateDigest};
use crate::payload::{Hello, Message, MetricsPayload, Role, TimeSyncPayload};
use crate::protocol::{read_packet, Codec, PacketType, ProtocolError};
use crate::queue::{lane_for, OutboundQueue, QueueError};
use crate::timesync::now_us;
use crate::traffic::{Direction, TrafficCounters, TrafficRecord};

/// Blocks per MC_BLOCKS packet in a join snapshot.
const SNAPSHOT_CHUNK: usize = 256;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub codec: Codec,
    pub max_clients: usize,
    /// Bound on each connection's reliable lane, in packets.
    pub queue_cap: usize,
    pub keep_traffic_log: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            codec: Codec::Default,
            max_clients: 16,
            queue_cap: 4096,
            keep_traffic_log: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConnectionStats {
    pub id: u64,
    pub role: Option<Role>,
    pub name: String,
    pub written: TrafficCounters,
    pub read: TrafficCounters,
    pub open: bool,
    pub log: Vec<TrafficRecord>,
}

#[derive(Debug, Clone)]
struct Outgoing {
    kind: PacketType,
    bytes: Arc<[u8]>,
}

#[derive(Default)]
struct Replica {
    map: Option<VoxelBlockMap>,
    mc: BTreeMap<BlockCoord, McBlock>,
    hello: Option<Hello>,
    ended: Option<MetricsPayload>,
}

struct Shared {
    config: ServerConfig,
    replica: RwLock<Replica>,
    clients: Mutex<BTreeMap<u64, Arc<OutboundQueue<Outgoing>>>>,
    stats: Mutex<BTreeMap<u64, ConnectionStats>>,
    streams: Mutex<BTreeMap<u64, TcpStream>>,
    next_id: AtomicU64,
    shutdown: AtomicBool,
}

impl Shared {
    fn encode(&self, msg: &Message) -> Result<Outgoing, ProtocolError> {
        Ok(Outgoing {
            kind: msg.packet_type(),
            bytes: msg.encode(self.config.codec)?.into(),
        })
    }

    fn with_stats(&self, id: u64, f: impl FnOnce(&mut ConnectionStats)) {
        if let Some(s) = self.stats.lock().expect("stats lock").get_mut(&id) {
            f(s);
        }
    }

    fn record(&self, id: u64, direction: Direction, kind: PacketType, bytes: usize) {
        let keep = self.config.keep_traffic_log;
        self.with_stats(id, |s| {
            match direction {
                Direction::In => s.read.add(kind, bytes),
                Direction::Out => s.written.add(kind, bytes),
            }
            if keep {
                s.log.push(TrafficRecord {
                    timestamp_us: now_us(),
                    direction,
                    kind,
                    bytes,
                });
            }
        });
    }

    fn drop_client(&self, id: u64) {
        if let Some(q) = self.clients.lock().expect("clients lock").remove(&id) {
            q.close();
        }
        if let Some(s) = self.streams.lock().expect("streams lock").remove(&id) {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.with_stats(id, |s| s.open = false);
    }

    /// Sends to every exploration client except `skip`. Callers hold the replica
    /// lock so that joins observe either all or none of an update.
    fn broadcast(&self, out: &Outgoing, skip: Option<u64>) {
        let mut stalled = Vec::new();
        for (id, q) in self.clients.lock().expect("clients lock").iter() {
            if Some(*id) == skip {
                continue;
            }
            match q.push(lane_for(out.kind), out.clone()) {
                Ok(_) | Err(QueueError::Closed) => {}
                Err(e) => {
                    warn!("client {id}: {e}");
                    stalled.push(*id);
                }
            }
        }
        for id in stalled {
            self.drop_client(id);
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> Vec<ConnectionStats> {
        self.shared.stats.lock().expect("stats lock").values().cloned().collect()
    }

    /// Digest of the server's current MC block set.
    pub fn mc_digest(&self) -> StateDigest {
        mc_digest(self.shared.replica.read().expect("replica lock").mc.values())
    }

    pub fn replica_blocks(&self) -> usize {
        self.shared.replica.read().expect("replica lock").map.as_ref().map_or(0, |m| m.len())
    }

    pub fn exploration_clients(&self) -> usize {
        self.shared.clients.lock().expect("clients lock").len()
    }

    /// Whether the reconstruction client has signalled the end of its stream.
    pub fn ended(&self) -> bool {
        self.shared.replica.read().expect("replica lock").ended.is_some()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutdown.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for s in self.shared.streams.lock().expect("streams lock").values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for q in self.shared.clients.lock().expect("clients lock").values() {
            q.close();
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn spawn_server(config: ServerConfig) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(&config.listen)?;
    let addr = listener.local_addr()?;
    info!("server listening on {addr}");
    let shared = Arc::new(Shared {
        config,
        replica: RwLock::new(Replica::default()),
        clients: Mutex::new(BTreeMap::new()),
        stats: Mutex::new(BTreeMap::new()),
        streams: Mutex::new(BTreeMap::new()),
        next_id: AtomicU64::new(1),
        shutdown: AtomicBool::new(false),
    });
    let accept = {
        let shared = shared.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                if shared.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                match stream {
                    Ok(s) => {
                        let shared = shared.clone();
                        thread::spawn(move || handle_connection(shared, s));
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        })
    };
    Ok(ServerHandle {
        addr,
        shared,
        accept: Some(accept),
    })
}

fn spawn_writer(shared: Arc<Shared>, id: u64, mut stream: TcpStream, queue: Arc<OutboundQueue<Outgoing>>) {
    thread::spawn(move || {
        while let Some(out) = queue.pop(None) {
            if let Err(e) = stream.write_all(&out.bytes) {
                debug!("connection {id}: write failed: {e}");
                break;
            }
            shared.record(id, Direction::Out, out.kind, out.bytes.len());
        }
        let _ = stream.flush();
        if queue.is_stalled() {
            let _ = stream.shutdown(Shutdown::Both);
        } else {
            let _ = stream.shutdown(Shutdown::Write);
        }
    });
}

fn handle_connection(shared: Arc<Shared>, stream: TcpStream) {
    let id = shared.next_id.fetch_add(1, Ordering::SeqCst);
    let _ = stream.set_nodelay(true);
    let (Ok(write_half), Ok(registry_half)) = (stream.try_clone(), stream.try_clone()) else {
        return;
    };
    shared.streams.lock().expect("streams lock").insert(id, registry_half);
    shared.stats.lock().expect("stats lock").insert(
        id,
        ConnectionStats {
            id,
            open: true,
            ..Default::default()
        },
    );
    let mut reader = BufReader::new(stream);
    let result = (|| -> Result<(), ProtocolError> {
        let Some((first, wire)) = read_packet(&mut reader)? else {
            return Ok(());
        };
        shared.record(id, Direction::In, first.kind, wire.len());
        let Message::Hello(hello) = Message::from_packet(&first)? else {
            return Err(ProtocolError::Unexpected(first.kind));
        };
        shared.with_stats(id, |s| {
            s.role = Some(hello.role);
            s.name = hello.name.clone();
        });
        let queue = Arc::new(OutboundQueue::new(shared.config.queue_cap));
        spawn_writer(shared.clone(), id, write_half, queue.clone());
        match hello.role {
            Role::Reconstruction => run_reconstruction(&shared, id, &hello, &queue, &mut reader),
            Role::Exploration => run_exploration(&shared, id, &queue, &mut reader),
            Role::Server => Err(ProtocolError::Malformed("peer claims server role".into())),
        }
    })();
    match result {
        Ok(()) => debug!("connection {id} closed"),
        Err(e) => warn!("connection {id}: {e}"),
    }
    shared.drop_client(id);
}

fn time_sync_reply(shared: &Shared, queue: &OutboundQueue<Outgoing>, t: TimeSyncPayload, received_us: u64) -> Result<(), ProtocolError> {
    if t.reply {
        return Ok(());
    }
    let reply = Message::TimeSync(TimeSyncPayload {
        reply: true,
        seq: t.seq,
        t1: t.t1,
        t2: received_us,
        t3: now_us(),
    });
    queue
        .push(lane_for(PacketType::TimeSync), shared.encode(&reply)?)
        .map_err(|e| ProtocolError::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Blocks whose extraction reads any voxel of `changed`: each block and its lower neighbours.
fn affected_blocks(map: &VoxelBlockMap, changed: &[BlockCoord]) -> BTreeSet<BlockCoord> {
    let mut out = BTreeSet::new();
    for c in changed {
        for dz in [0, -1] {
            for dy in [0, -1] {
                for dx in [0, -1] {
                    let n = c.offset(dx, dy, dz);
                    if map.contains(n) {
                        out.insert(n);
                    }
                }
            }
        }
    }
    out
}

/// Re-extracts the given blocks; returns the ones whose cells changed.
fn refresh_mc(replica: &mut Replica, coords: &BTreeSet<BlockCoord>) -> Vec<McBlock> {
    let Some(map) = replica.map.as_ref() else {
        return Vec::new();
    };
    let mut changed = Vec::new();
    for c in coords {
        let Ok(block) = extract_mc_block(map, *c) else {
            continue;
        };
        let old = replica.mc.get(c);
        let differs = match old {
            Some(o) => *o != block,
            None => !block.is_empty(),
        };
        if differs {
            changed.push(block.clone());
        }
        replica.mc.insert(*c, block);
    }
    changed
}

fn run_reconstruction(
    shared: &Arc<Shared>,
    id: u64,
    hello: &Hello,
    queue: &Arc<OutboundQueue<Outgoing>>,
    reader: &mut BufReader<TcpStream>,
) -> Result<(), ProtocolError> {
    {
        let mut r = shared.replica.write().expect("replica lock");
        let reuse = r.map.as_ref().is_some_and(|m| m.voxel_size == hello.voxel_size && m.truncation == hello.truncation);
        if !reuse {
            r.map = Some(VoxelBlockMap::new(hello.voxel_size, hello.truncation));
            r.mc.clear();
        }
        r.ended = None;
        let announce = Hello {
            role: Role::Server,
            voxel_size: hello.voxel_size,
            truncation: hello.truncation,
            name: "server".into(),
        };
        shared.broadcast(&shared.encode(&Message::Hello(announce.clone()))?, None);
        r.hello = Some(announce);
    }
    while let Some((packet, wire)) = read_packet(reader)? {
        let received = now_us();
        shared.record(id, Direction::In, packet.kind, wire.len());
        match packet.kind {
            PacketType::DynFrame | PacketType::Pose => {
                let _r = shared.replica.read().expect("replica lock");
                shared.broadcast(
                    &Outgoing {
                        kind: packet.kind,
                        bytes: wire.into(),
                    },
                    None,
                );
            }
            _ => match Message::from_packet(&packet)? {
                Message::TsdfBlocks(blocks) => {
                    let mut r = shared.replica.write().expect("replica lock");
                    let coords: Vec<BlockCoord> = blocks.iter().map(|b| b.coord).collect();
                    let Some(map) = r.map.as_mut() else {
                        continue;
                    };
                    for b in blocks {
                        map.insert(b);
                    }
                    let affected = affected_blocks(map, &coords);
                    let changed = refresh_mc(&mut r, &affected);
                    if !changed.is_empty() {
                        shared.broadcast(&shared.encode(&Message::McBlocks(changed))?, None);
                    }
                }
                Message::BlockRemove(coords) => {
                    let mut r = shared.replica.write().expect("replica lock");
                    let Some(map) = r.map.as_mut() else {
                        continue;
                    };
                    let removed: Vec<BlockCoord> = coords.into_iter().filter(|c| map.remove(*c).is_some()).collect();
                    let affected = affected_blocks(map, &removed);
                    for c in &removed {
                        r.mc.remove(c);
                    }
                    if !removed.is_empty() {
                        shared.broadcast(&shared.encode(&Message::BlockRemove(removed))?, None);
                    }
                    let changed = refresh_mc(&mut r, &affected);
                    if !changed.is_empty() {
                        shared.broadcast(&shared.encode(&Message::McBlocks(changed))?, None);
                    }
                }
                Message::TimeSync(t) => time_sync_reply(shared, queue, t, received)?,
                Message::Metrics(m) => {
                    let mut r = shared.replica.write().expect("replica lock");
                    if m.end_of_stream {
                        r.ended = Some(m);
                    }
                    shared.broadcast(&shared.encode(&Message::Metrics(m))?, None);
                }
                Message::Hello(_) | Message::McBlocks(_) => return Err(ProtocolError::Unexpected(packet.kind)),
                Message::DynFrame(_) | Message::Pose(_) => unreachable!("relayed above"),
            },
        }
    }
    queue.close();
    Ok(())
}

fn run_exploration(
    shared: &Arc<Shared>,
    id: u64,
    queue: &Arc<OutboundQueue<Outgoing>>,
    reader: &mut BufReader<TcpStream>,
) -> Result<(), ProtocolError> {
    {
        let r = shared.replica.read().expect("replica lock");
        let mut clients = shared.clients.lock().expect("clients lock");
        if clients.len() >= shared.config.max_clients {
            warn!("connection {id}: client limit {} reached", shared.config.max_clients);
            return Ok(());
        }
        let mut snapshot = Vec::new();
        if let Some(h) = &r.hello {
            snapshot.push(shared.encode(&Message::Hello(h.clone()))?);
        }
        let blocks: Vec<McBlock> = r.mc.values().filter(|b| !b.is_empty()).cloned().collect();
        for chunk in blocks.chunks(SNAPSHOT_CHUNK) {
            snapshot.push(shared.encode(&Message::McBlocks(chunk.to_vec()))?);
        }
        if let Some(m) = r.ended {
            snapshot.push(shared.encode(&Message::Metrics(m))?);
        }
        for out in snapshot {
            queue
                .push(lane_for(out.kind), out)
                .map_err(|e| ProtocolError::Io(std::io::Error::other(e)))?;
        }
        clients.insert(id, queue.clone());
        info!("exploration client {id} joined with {} blocks", blocks.len());
    }
    while let Some((packet, wire)) = read_packet(reader)? {
        let received = now_us();
        shared.record(id, Direction::In, packet.kind, wire.len());
        match Message::from_packet(&packet)? {
            Message::TimeSync(t) => time_sync_reply(shared, queue, t, received)?,
            Message::Pose(mut p) => {
                p.source = id as u32;
                let _r = shared.replica.read().expect("replica lock");
                shared.broadcast(&shared.encode(&Message::Pose(p))?, Some(id));
            }
            _ => return Err(ProtocolError::Unexpected(packet.kind)),
        }
    }
    Ok(())
}
