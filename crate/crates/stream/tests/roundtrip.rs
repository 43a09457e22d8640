use dynfuse_core::fusion::mc::active_edges;
use dynfuse_core::fusion::{BlockCoord, McBlock, McCell, McEdge, TsdfVoxel, VoxelBlock, BLOCK_VOXELS};
use dynfuse_stream::payload::{
    DynFramePayload, DynPixel, Hello, Message, MetricsPayload, PosePayload, Role, TimeSyncPayload, WireIntrinsics,
};
use dynfuse_stream::protocol::{decode_packet, encode_packet, read_packet, Codec, PacketType, ProtocolError};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::{Rng, RngCore, SeedableRng};

const CASES: u32 = 10_000;

fn coord() -> impl Strategy<Value = BlockCoord> {
    prop::array::uniform3(-1000i32..1000).prop_map(BlockCoord)
}

fn tsdf_block() -> impl Strategy<Value = VoxelBlock> {
    (coord(), any::<u64>(), any::<u64>()).prop_map(|(c, last, seed)| {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut b = VoxelBlock::new(c);
        b.last_update = last;
        for v in b.voxels.iter_mut() {
            *v = TsdfVoxel {
                sdf: f32::from_bits(rng.next_u32()),
                weight: rng.random_range(0.0..64.0),
                color: [rng.random(), rng.random(), rng.random()],
                motion: rng.random(),
            };
        }
        b
    })
}

fn mc_block() -> impl Strategy<Value = McBlock> {
    (coord(), prop::collection::vec((0u16..BLOCK_VOXELS as u16, any::<u8>(), any::<u64>()), 0..12)).prop_map(|(coord, cells)| {
        let cells = cells
            .into_iter()
            .map(|(index, case, seed)| {
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
                let edges = active_edges(case)
                    .map(|_| McEdge {
                        t: rng.random(),
                        rgb: [rng.random(), rng.random(), rng.random()],
                        motion_mm: rng.random(),
                    })
                    .collect();
                McCell { index, case, edges }
            })
            .collect();
        McBlock { coord, cells }
    })
}

fn matrix() -> impl Strategy<Value = [f32; 16]> {
    prop::array::uniform16(any::<f32>())
}

fn dyn_frame() -> impl Strategy<Value = DynFramePayload> {
    (any::<u64>(), any::<u64>(), matrix(), 1u16..400, 1u16..300, any::<u64>(), 0.0f64..1.0).prop_map(
        |(frame_index, timestamp_us, pose, width, height, seed, density)| {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let mut pixels = Vec::new();
            let stride = ((width as usize * height as usize) / 200).max(1);
            for i in (0..width as usize * height as usize).step_by(stride) {
                if rng.random::<f64>() < density {
                    pixels.push(DynPixel {
                        x: (i % width as usize) as u16,
                        y: (i / width as usize) as u16,
                        depth_mm: rng.random_range(1..=u16::MAX),
                        rgb: [rng.random(), rng.random(), rng.random()],
                    });
                }
            }
            DynFramePayload {
                frame_index,
                timestamp_us,
                pose,
                intrinsics: WireIntrinsics {
                    fx: rng.random(),
                    fy: rng.random(),
                    cx: rng.random(),
                    cy: rng.random(),
                    width,
                    height,
                },
                pixels,
            }
        },
    )
}

fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        (prop_oneof![Just(Role::Reconstruction), Just(Role::Exploration), Just(Role::Server)], any::<f64>(), any::<f64>(), ".{0,40}")
            .prop_map(|(role, voxel_size, truncation, name)| Message::Hello(Hello {
                role,
                voxel_size,
                truncation,
                name
            })),
        prop::collection::vec(tsdf_block(), 0..3).prop_map(Message::TsdfBlocks),
        prop::collection::vec(mc_block(), 0..4).prop_map(Message::McBlocks),
        dyn_frame().prop_map(Message::DynFrame),
        (any::<u64>(), any::<u64>(), any::<u32>(), matrix()).prop_map(|(frame_index, timestamp_us, source, pose)| Message::Pose(
            PosePayload {
                frame_index,
                timestamp_us,
                source,
                pose
            }
        )),
        prop::collection::vec(coord(), 0..20).prop_map(Message::BlockRemove),
        (any::<bool>(), any::<u32>(), any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(reply, seq, t1, t2, t3)| Message::TimeSync(
            TimeSyncPayload { reply, seq, t1, t2, t3 }
        )),
        (any::<bool>(), any::<u64>(), any::<u64>()).prop_map(|(end_of_stream, last_frame_index, frames_sent)| Message::Metrics(
            MetricsPayload {
                end_of_stream,
                last_frame_index,
                frames_sent
            }
        )),
    ]
}

/// Byte-exact: decode(encode(m)) re-encodes to the same bytes, through both codecs.
fn check_roundtrip(m: &Message) -> Result<(), TestCaseError> {
    let payload = m.to_payload();
    let decoded = Message::from_payload(m.packet_type(), &payload).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(decoded.to_payload(), payload.clone());
    prop_assert_eq!(decoded.packet_type(), m.packet_type());
    for codec in [Codec::Identity, Codec::Default] {
        let framed = m.encode(codec).unwrap();
        let (p, n) = decode_packet(&framed).unwrap();
        prop_assert_eq!(n, framed.len());
        prop_assert_eq!(&p.payload, &payload);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn every_message_roundtrips(m in message()) {
        check_roundtrip(&m)?;
    }

    #[test]
    fn mc_blocks_roundtrip(blocks in prop::collection::vec(mc_block(), 0..6)) {
        let m = Message::McBlocks(blocks.clone());
        check_roundtrip(&m)?;
        prop_assert_eq!(Message::from_payload(PacketType::McBlocks, &m.to_payload()).unwrap(), m);
    }

    #[test]
    fn dyn_frames_roundtrip(f in dyn_frame()) {
        let m = Message::DynFrame(f);
        check_roundtrip(&m)?;
    }

    #[test]
    fn framing_roundtrips(payload in prop::collection::vec(any::<u8>(), 0..2048), t in 1u8..=8) {
        let kind = PacketType::from_u8(t).unwrap();
        for codec in [Codec::Identity, Codec::Default] {
            let framed = encode_packet(kind, &payload, codec).unwrap();
            let (p, wire) = read_packet(&mut &framed[..]).unwrap().unwrap();
            prop_assert_eq!(p.kind, kind);
            prop_assert_eq!(&p.payload, &payload);
            prop_assert_eq!(wire, framed);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn tsdf_blocks_roundtrip(blocks in prop::collection::vec(tsdf_block(), 0..3)) {
        let m = Message::TsdfBlocks(blocks);
        check_roundtrip(&m)?;
    }
}

#[test]
fn one_mib_random_roundtrip() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let mut payload = vec![0u8; 1 << 20];
    rng.fill_bytes(&mut payload);
    for codec in [Codec::Identity, Codec::Default] {
        let framed = encode_packet(PacketType::TsdfBlocks, &payload, codec).unwrap();
        let (p, _) = decode_packet(&framed).unwrap();
        assert_eq!(p.payload, payload);
    }
}

fn corrupt(rng: &mut impl Rng, mut bytes: Vec<u8>) -> Vec<u8> {
    match rng.random_range(0..4) {
        0 => {
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..bytes.len());
                bytes[i] ^= 1 << rng.random_range(0..8);
            }
        }
        1 => bytes.truncate(rng.random_range(0..bytes.len())),
        2 => {
            let i = rng.random_range(0..bytes.len());
            bytes[i] = rng.random();
        }
        _ => {
            let i = rng.random_range(0..bytes.len().min(16));
            bytes[i] = rng.random();
        }
    }
    bytes
}

/// Corrupted frames never panic; every failure is a typed error.
#[test]
fn corrupted_frames_yield_typed_errors() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let strategy = message();
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    let mut errors = 0;
    for i in 0..20_000 {
        let m = strategy.new_tree(&mut runner).unwrap().current();
        let codec = if i % 2 == 0 { Codec::Identity } else { Codec::Default };
        let bad = corrupt(&mut rng, m.encode(codec).unwrap());
        let outcome = std::panic::catch_unwind(|| {
            let from_slice = decode_packet(&bad).and_then(|(p, _)| Message::from_packet(&p));
            let from_stream = read_packet(&mut &bad[..]).and_then(|r| match r {
                Some((p, _)) => Message::from_packet(&p).map(Some),
                None => Ok(None),
            });
            (from_slice.is_err(), from_stream.is_err())
        });
        let (a, _) = outcome.expect("decoder panicked");
        errors += a as usize;
    }
    assert!(errors > 10_000, "most corruptions should be detected, got {errors}");
}

#[test]
fn random_garbage_is_rejected() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    for _ in 0..10_000 {
        let n = rng.random_range(0..64);
        let mut bytes = vec![0u8; n];
        rng.fill_bytes(&mut bytes);
        if rng.random_bool(0.5) && n >= 4 {
            bytes[..4].copy_from_slice(b"DYNF");
        }
        for t in PacketType::ALL {
            let _ = Message::from_payload(t, &bytes);
        }
        assert!(!matches!(decode_packet(&bytes), Err(ProtocolError::Io(_))), "slice decoding never does I/O");
    }
}
