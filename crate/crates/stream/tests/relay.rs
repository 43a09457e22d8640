use std::time::Duration;

use dynfuse_core::fusion::{extract_mc_block, BlockCoord, VoxelBlock, VoxelBlockMap, BLOCK_SIDE};
use dynfuse_core::geometry::{CameraIntrinsics, Pose};
use dynfuse_core::{DepthRange, Grid};
use dynfuse_stream::exploration::{mc_digest, mesh_digest, BlockMesh, StateDigest};
use dynfuse_stream::gateway::{spawn_gateway, GatewayHub, ViewerMessage};
use dynfuse_stream::payload::PosePayload;
use dynfuse_stream::{spawn_server, Codec, ExplorationClient, PacketType, ReconstructionClient, ServerConfig};

const VS: f64 = 0.01;
const TRUNC: f64 = 0.04;
const WAIT: Duration = Duration::from_secs(20);

type Frame = dynfuse_core::frame::RgbdFrame<f64>;

/// Writes a sphere of the given radius into the map; returns the blocks it touched.
fn sphere_update(map: &mut VoxelBlockMap, radius: f64, frame: u64) -> Vec<BlockCoord> {
    let mut touched = Vec::new();
    let reach = ((radius + TRUNC) / VS / BLOCK_SIDE as f64).ceil() as i32;
    for bz in -reach..reach {
        for by in -reach..reach {
            for bx in -reach..reach {
                let c = BlockCoord::new(bx, by, bz);
                let origin = c.origin_voxel();
                let mut near = false;
                let mut block = map.get(c).cloned().unwrap_or_else(|| VoxelBlock::new(c));
                for z in 0..BLOCK_SIDE {
                    for y in 0..BLOCK_SIDE {
                        for x in 0..BLOCK_SIDE {
                            let p = [origin[0] + x as i64, origin[1] + y as i64, origin[2] + z as i64].map(|g| g as f64 * VS);
                            let d = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - radius;
                            if d.abs() < TRUNC {
                                near = true;
                                let v = block.voxel_mut(x, y, z);
                                v.sdf = (d / TRUNC) as f32;
                                v.weight = 1.0;
                                v.color = [(128.0 + p[0] * 400.0) as u8, 90, (frame % 255) as u8];
                                v.motion = radius as f32;
                            }
                        }
                    }
                }
                if near {
                    block.last_update = frame;
                    map.insert(block);
                    touched.push(c);
                }
            }
        }
    }
    touched
}

fn local_digest(map: &VoxelBlockMap) -> StateDigest {
    let blocks: Vec<_> = map.coords_sorted().into_iter().map(|c| extract_mc_block(map, c).unwrap()).collect();
    mc_digest(&blocks)
}

fn dyn_frame(k: u64) -> (Frame, Grid<bool>, CameraIntrinsics<f64>) {
    let intr = CameraIntrinsics::new(40.0, 40.0, 16.0, 12.0, 32, 24).unwrap();
    let depth = Grid::new(32, 24, 1.0 + 0.01 * k as f64);
    let f = Frame::new(k, Grid::new(32, 24, [k as u8, 1, 2]), depth, k * 33_333, &intr, DepthRange::default()).unwrap();
    let mask = Grid::from_fn(32, 24, |x, y| (x + y + k as usize).is_multiple_of(5));
    (f, mask, intr)
}

struct Run {
    map: VoxelBlockMap,
}

impl Run {
    fn new() -> Self {
        Self {
            map: VoxelBlockMap::new(VS, TRUNC),
        }
    }

    fn frame(&mut self, recon: &mut ReconstructionClient, k: u64) {
        let touched = sphere_update(&mut self.map, 0.08 + 0.004 * k as f64, k);
        let blocks = touched.iter().map(|c| self.map.get(*c).unwrap().clone()).collect();
        let (f, mask, intr) = dyn_frame(k);
        recon.send_frame(&f, &mask, &Pose::identity(), &intr, blocks).unwrap();
    }
}

#[test]
fn late_joiner_matches_always_connected_client_and_reconstruction() {
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let a = ExplorationClient::connect(addr, Codec::Default, "a", None).unwrap();
    let mut recon = ReconstructionClient::connect(addr, Codec::Default, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    let mut late = None;
    for k in 0..16 {
        run.frame(&mut recon, k);
        if k == 8 {
            std::thread::sleep(Duration::from_millis(50));
            late = Some(ExplorationClient::connect(addr, Codec::Default, "b", None).unwrap());
        }
    }
    recon.finish().unwrap();
    let b = late.unwrap();
    assert!(a.wait_for_end(WAIT));
    assert!(b.wait_for_end(WAIT));
    let expected = local_digest(&run.map);
    assert_eq!(server.mc_digest(), expected);

    let stats = server.stats();
    let (sa, ra) = a.close();
    let (sb, rb) = b.close();
    assert_eq!(sa.mc_digest(), expected);
    assert_eq!(sb.mc_digest(), expected);
    assert_eq!(sa.mesh_digest(), sb.mesh_digest());
    assert!(sa.triangle_count() > 100);
    assert!(ra.error.is_none() && rb.error.is_none(), "{:?} {:?}", ra.error, rb.error);
    assert!(ra.sync.reliable());
    assert!(ra.sync.offset_us.unwrap().abs() < 5_000.0);

    // Counters on each exploration connection cover every byte the client read.
    for (name, report) in [("a", &ra), ("b", &rb)] {
        let s = stats.iter().find(|s| s.name == name).unwrap();
        assert_eq!(s.written.sum_by_type(), s.written.total);
        assert_eq!(s.written.total, report.socket_bytes, "client {name}");
        assert_eq!(report.counters.total, report.socket_bytes);
        for t in PacketType::ALL {
            assert_eq!(s.written.get(t), report.counters.get(t), "{name} {t:?}");
        }
    }
    let recon_stats = stats.iter().find(|s| s.name == "recon").unwrap();
    assert_eq!(recon_stats.read.sum_by_type(), recon_stats.read.total);
    assert!(ra.arrivals.iter().any(|x| x.kind == PacketType::DynFrame));
}

#[test]
fn two_clients_receive_identical_mc_streams() {
    let server = spawn_server(ServerConfig {
        codec: Codec::Identity,
        ..Default::default()
    })
    .unwrap();
    let addr = server.local_addr();
    let a = ExplorationClient::connect(addr, Codec::Identity, "a", None).unwrap();
    let b = ExplorationClient::connect(addr, Codec::Identity, "b", None).unwrap();
    let mut recon = ReconstructionClient::connect(addr, Codec::Identity, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    for k in 0..6 {
        run.frame(&mut recon, k);
    }
    recon.finish().unwrap();
    assert!(a.wait_for_end(WAIT) && b.wait_for_end(WAIT));
    let (_, ra) = a.close();
    let (_, rb) = b.close();
    let mc = |r: &dynfuse_stream::ExplorationReport| -> Vec<usize> {
        r.arrivals.iter().filter(|x| x.kind == PacketType::McBlocks).map(|x| x.bytes).collect()
    };
    assert_eq!(mc(&ra), mc(&rb));
    let dynf = |r: &dynfuse_stream::ExplorationReport| -> Vec<(u64, usize)> {
        r.arrivals.iter().filter_map(|x| x.frame.map(|f| (f.0, x.bytes))).collect()
    };
    for (fa, na) in dynf(&ra) {
        if let Some((_, nb)) = dynf(&rb).into_iter().find(|(fb, _)| *fb == fa) {
            assert_eq!(na, nb);
        }
    }
}

#[test]
fn server_integrates_without_clients_and_snapshots_after_end() {
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let mut recon = ReconstructionClient::connect(addr, Codec::Default, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    for k in 0..4 {
        run.frame(&mut recon, k);
    }
    recon.finish().unwrap();
    let deadline = std::time::Instant::now() + WAIT;
    while !server.ended() && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(server.replica_blocks(), run.map.len());
    assert!(server.stats().iter().all(|s| s.written.get(PacketType::McBlocks) == 0));

    let late = ExplorationClient::connect(addr, Codec::Default, "late", None).unwrap();
    assert!(late.wait_for_end(WAIT));
    assert_eq!(late.snapshot().mc_digest(), local_digest(&run.map));
}

#[test]
fn disconnecting_client_does_not_disturb_others() {
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let a = ExplorationClient::connect(addr, Codec::Default, "a", None).unwrap();
    let mut c = Some(ExplorationClient::connect(addr, Codec::Default, "c", None).unwrap());
    let mut recon = ReconstructionClient::connect(addr, Codec::Default, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    for k in 0..10 {
        run.frame(&mut recon, k);
        if k == 3 {
            drop(c.take().unwrap().close());
        }
    }
    recon.finish().unwrap();
    assert!(a.wait_for_end(WAIT));
    assert_eq!(a.snapshot().mc_digest(), local_digest(&run.map));
    // Reconnect gets a fresh snapshot.
    let again = ExplorationClient::connect(addr, Codec::Default, "c2", None).unwrap();
    assert!(again.wait_for_end(WAIT));
    assert_eq!(again.snapshot().mc_digest(), local_digest(&run.map));
    assert_eq!(server.exploration_clients(), 2);
}

#[test]
fn corrupted_stream_closes_only_that_connection() {
    use std::io::{Read, Write};
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let a = ExplorationClient::connect(addr, Codec::Default, "a", None).unwrap();
    let mut bad = std::net::TcpStream::connect(addr).unwrap();
    bad.write_all(b"XXXXgarbage-garbage").unwrap();
    let mut buf = [0u8; 8];
    bad.set_read_timeout(Some(WAIT)).unwrap();
    assert!(matches!(bad.read(&mut buf), Ok(0) | Err(_)));
    let mut recon = ReconstructionClient::connect(addr, Codec::Default, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    run.frame(&mut recon, 0);
    recon.finish().unwrap();
    assert!(a.wait_for_end(WAIT));
    assert_eq!(a.snapshot().mc_digest(), local_digest(&run.map));
}

#[test]
fn user_poses_reach_other_clients() {
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let a = ExplorationClient::connect(addr, Codec::Default, "a", None).unwrap();
    let b = ExplorationClient::connect(addr, Codec::Default, "b", None).unwrap();
    let mut pose = [0f32; 16];
    pose[3] = 1.5;
    a.send_pose(PosePayload {
        frame_index: 0,
        timestamp_us: 0,
        source: 0,
        pose,
    })
    .unwrap();
    assert!(b.wait_for(WAIT, |s| !s.user_poses.is_empty()));
    let s = b.snapshot();
    let p = s.user_poses.values().next().unwrap();
    assert_ne!(p.source, 0);
    assert_eq!(p.pose[3], 1.5);
    assert!(s.sensor_pose.is_none());
    assert!(a.snapshot().user_poses.is_empty());
}

#[test]
fn gateway_mirrors_exploration_state() {
    let server = spawn_server(ServerConfig::default()).unwrap();
    let addr = server.local_addr();
    let hub = GatewayHub::new(1 << 16);
    let a = ExplorationClient::connect(addr, Codec::Default, "a", Some(hub.clone())).unwrap();
    let gateway = spawn_gateway("127.0.0.1:0", a.cell(), hub.clone()).unwrap();
    let mut recon = ReconstructionClient::connect(addr, Codec::Default, "recon", VS, TRUNC, 1 << 16).unwrap();
    let mut run = Run::new();
    for k in 0..5 {
        run.frame(&mut recon, k);
    }
    // Viewer joins mid-run.
    let url = format!("ws://{}", gateway.local_addr());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    for k in 5..10 {
        run.frame(&mut recon, k);
    }
    recon.finish().unwrap();
    assert!(a.wait_for_end(WAIT));
    let expected = a.snapshot().mesh_digest();

    if let tungstenite::stream::MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(500))).unwrap();
    }
    let mut meshes = std::collections::BTreeMap::new();
    let mut cloud = None;
    let deadline = std::time::Instant::now() + WAIT;
    while std::time::Instant::now() < deadline {
        match ws.read() {
            Ok(tungstenite::Message::Binary(b)) => match ViewerMessage::decode(&b).unwrap() {
                ViewerMessage::MeshUpsert(m) => {
                    meshes.insert(m.coord, m);
                }
                ViewerMessage::MeshRemove(c) => {
                    for c in c {
                        meshes.remove(&c);
                    }
                }
                ViewerMessage::Cloud(c) => cloud = Some(c),
                ViewerMessage::Pose(_) => {}
            },
            Ok(_) => {}
            Err(_) => {
                if mesh_digest(meshes.values()) == expected {
                    break;
                }
            }
        }
    }
    let got: Vec<&BlockMesh> = meshes.values().collect();
    assert_eq!(mesh_digest(got), expected);
    assert_eq!(cloud.unwrap().frame_index, 9);
    assert_eq!(hub.viewers(), 1);
    drop(ws);
    gateway.shutdown();
}
