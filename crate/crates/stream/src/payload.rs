//! Typed payloads and their byte encodings.

use dynfuse_core::fusion::mc::active_edges;
use dynfuse_core::fusion::{BlockCoord, McBlock, McCell, McEdge, TsdfVoxel, VoxelBlock, BLOCK_VOXELS};
use dynfuse_core::geometry::{CameraIntrinsics, Pose};
use dynfuse_core::frame::RgbdFrame;
use dynfuse_core::{Grid, Real, Rgb};

use crate::protocol::{encode_packet, Codec, Packet, PacketType, ProtocolError};
use crate::wire::{Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Role {
    Reconstruction = 1,
    Exploration = 2,
    Server = 3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub role: Role,
    /// Model voxel size and truncation (meters); zero when unknown.
    pub voxel_size: f64,
    pub truncation: f64,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u16,
    pub height: u16,
}

impl WireIntrinsics {
    pub fn from_camera<T: Real>(c: &CameraIntrinsics<T>) -> Self {
        Self {
            fx: c.fx.as_f32(),
            fy: c.fy.as_f32(),
            cx: c.cx.as_f32(),
            cy: c.cy.as_f32(),
            width: c.width as u16,
            height: c.height as u16,
        }
    }

    /// Camera-frame point of a pixel at a depth in meters.
    pub fn backproject(&self, x: u16, y: u16, depth: f64) -> [f64; 3] {
        [
            (x as f64 - self.cx as f64) / self.fx as f64 * depth,
            (y as f64 - self.cy as f64) / self.fy as f64 * depth,
            depth,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynPixel {
    pub x: u16,
    pub y: u16,
    pub depth_mm: u16,
    pub rgb: Rgb,
}

/// Masked RGB-D pixels of one frame with the pose and camera needed to place them.
#[derive(Debug, Clone, PartialEq)]
pub struct DynFramePayload {
    pub frame_index: u64,
    pub timestamp_us: u64,
    /// Row-major camera-to-world matrix.
    pub pose: [f32; 16],
    pub intrinsics: WireIntrinsics,
    pub pixels: Vec<DynPixel>,
}

/// Depth in meters to wire millimeters; `None` for depths the wire cannot carry.
pub fn depth_to_mm(d: f64) -> Option<u16> {
    if !d.is_finite() || d <= 0.0 {
        return None;
    }
    let mm = (d * 1000.0).round();
    (mm >= 1.0 && mm <= u16::MAX as f64).then_some(mm as u16)
}

pub fn pose_to_wire<T: Real>(pose: &Pose<T>) -> [f32; 16] {
    pose.to_matrix().map(|v| v.as_f32())
}

/// Masked pixels with representable depth, row-major.
pub fn serialize_dyn_frame<T: Real>(
    frame: &RgbdFrame<T>,
    mask: &Grid<bool>,
    pose: &Pose<T>,
    intr: &CameraIntrinsics<T>,
) -> DynFramePayload {
    assert_eq!(mask.dims(), frame.depth.dims(), "mask dimensions must match the frame");
    let mut pixels = Vec::new();
    for (x, y, m) in mask.iter_xy() {
        if !*m {
            continue;
        }
        if let Some(depth_mm) = depth_to_mm(frame.depth.get(x, y).as_f64()) {
            pixels.push(DynPixel {
                x: x as u16,
                y: y as u16,
                depth_mm,
                rgb: *frame.color.get(x, y),
            });
        }
    }
    DynFramePayload {
        frame_index: frame.index,
        timestamp_us: frame.timestamp_us,
        pose: pose_to_wire(pose),
        intrinsics: WireIntrinsics::from_camera(intr),
        pixels,
    }
}

impl DynFramePayload {
    /// World-space points and colors.
    pub fn points(&self) -> Vec<([f64; 3], Rgb)> {
        let m = self.pose.map(|v| v as f64);
        self.pixels
            .iter()
            .map(|p| {
                let c = self.intrinsics.backproject(p.x, p.y, p.depth_mm as f64 / 1000.0);
                let w = [0, 1, 2].map(|r| m[4 * r] * c[0] + m[4 * r + 1] * c[1] + m[4 * r + 2] * c[2] + m[4 * r + 3]);
                (w, p.rgb)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosePayload {
    pub frame_index: u64,
    pub timestamp_us: u64,
    /// 0 is the sensor; other values identify exploring users.
    pub source: u32,
    pub pose: [f32; 16],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSyncPayload {
    pub reply: bool,
    pub seq: u32,
    pub t1: u64,
    pub t2: u64,
    pub t3: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricsPayload {
    pub end_of_stream: bool,
    pub last_frame_index: u64,
    pub frames_sent: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    TsdfBlocks(Vec<VoxelBlock>),
    McBlocks(Vec<McBlock>),
    DynFrame(DynFramePayload),
    Pose(PosePayload),
    BlockRemove(Vec<BlockCoord>),
    TimeSync(TimeSyncPayload),
    Metrics(MetricsPayload),
}

fn write_coord(w: &mut Writer, c: BlockCoord) {
    for v in c.0 {
        w.i32(v);
    }
}

fn read_coord(r: &mut Reader) -> Result<BlockCoord, ProtocolError> {
    Ok(BlockCoord([r.i32()?, r.i32()?, r.i32()?]))
}

fn write_matrix(w: &mut Writer, m: &[f32; 16]) {
    for v in m {
        w.f32(*v);
    }
}

fn read_matrix(r: &mut Reader) -> Result<[f32; 16], ProtocolError> {
    let mut m = [0f32; 16];
    for v in &mut m {
        *v = r.f32()?;
    }
    Ok(m)
}

const VOXEL_BYTES: usize = 4 + 4 + 3 + 4;
const TSDF_BLOCK_BYTES: usize = 12 + 8 + BLOCK_VOXELS * VOXEL_BYTES;
const PIXEL_BYTES: usize = 9;

pub fn encode_tsdf_blocks<'a>(blocks: impl IntoIterator<Item = &'a VoxelBlock>) -> Vec<u8> {
    let blocks: Vec<&VoxelBlock> = blocks.into_iter().collect();
    let mut w = Writer::with_capacity(4 + blocks.len() * TSDF_BLOCK_BYTES);
    w.u32(blocks.len() as u32);
    for b in blocks {
        write_coord(&mut w, b.coord);
        w.u64(b.last_update);
        for v in b.voxels.iter() {
            w.f32(v.sdf).f32(v.weight).bytes(&v.color).f32(v.motion);
        }
    }
    w.finish()
}

pub fn decode_tsdf_blocks(bytes: &[u8]) -> Result<Vec<VoxelBlock>, ProtocolError> {
    let mut r = Reader::new(bytes);
    let n = r.count(TSDF_BLOCK_BYTES)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = VoxelBlock::new(read_coord(&mut r)?);
        b.last_update = r.u64()?;
        for v in b.voxels.iter_mut() {
            let sdf = r.f32()?;
            let weight = r.f32()?;
            let c = r.take(3)?;
            *v = TsdfVoxel {
                sdf,
                weight,
                color: [c[0], c[1], c[2]],
                motion: r.f32()?,
            };
        }
        out.push(b);
    }
    r.finish()?;
    Ok(out)
}

fn write_mc_block(w: &mut Writer, b: &McBlock) {
    write_coord(w, b.coord);
    w.u32(b.cells.len() as u32);
    for c in &b.cells {
        w.u16(c.index).u8(c.case);
        for e in &c.edges {
            w.u8(e.t).bytes(&e.rgb).u16(e.motion_mm);
        }
    }
}

/// Canonical encoding of one block, also used for digests.
pub fn encode_mc_block(b: &McBlock) -> Vec<u8> {
    let mut w = Writer::new();
    write_mc_block(&mut w, b);
    w.finish()
}

pub fn encode_mc_blocks<'a>(blocks: impl IntoIterator<Item = &'a McBlock>) -> Vec<u8> {
    let blocks: Vec<&McBlock> = blocks.into_iter().collect();
    let mut w = Writer::new();
    w.u32(blocks.len() as u32);
    for b in blocks {
        write_mc_block(&mut w, b);
    }
    w.finish()
}

pub fn decode_mc_blocks(bytes: &[u8]) -> Result<Vec<McBlock>, ProtocolError> {
    let mut r = Reader::new(bytes);
    let n = r.count(16)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let coord = read_coord(&mut r)?;
        let cells_n = r.count(3)?;
        let mut cells = Vec::with_capacity(cells_n);
        for _ in 0..cells_n {
            let index = r.u16()?;
            if index as usize >= BLOCK_VOXELS {
                return Err(ProtocolError::Malformed(format!("cell index {index} out of range")));
            }
            let case = r.u8()?;
            let edges = (0..active_edges(case).count())
                .map(|_| {
                    let t = r.u8()?;
                    let c = r.take(3)?;
                    Ok(McEdge {
                        t,
                        rgb: [c[0], c[1], c[2]],
                        motion_mm: r.u16()?,
                    })
                })
                .collect::<Result<Vec<_>, ProtocolError>>()?;
            cells.push(McCell { index, case, edges });
        }
        out.push(McBlock { coord, cells });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_dyn_frame(f: &DynFramePayload) -> Vec<u8> {
    let mut w = Writer::with_capacity(100 + f.pixels.len() * PIXEL_BYTES);
    w.u64(f.frame_index).u64(f.timestamp_us);
    write_matrix(&mut w, &f.pose);
    let i = &f.intrinsics;
    w.f32(i.fx).f32(i.fy).f32(i.cx).f32(i.cy).u16(i.width).u16(i.height);
    w.u32(f.pixels.len() as u32);
    for p in &f.pixels {
        w.u16(p.x).u16(p.y).u16(p.depth_mm).bytes(&p.rgb);
    }
    w.finish()
}

pub fn decode_dyn_frame(bytes: &[u8]) -> Result<DynFramePayload, ProtocolError> {
    let mut r = Reader::new(bytes);
    let frame_index = r.u64()?;
    let timestamp_us = r.u64()?;
    let pose = read_matrix(&mut r)?;
    let intrinsics = WireIntrinsics {
        fx: r.f32()?,
        fy: r.f32()?,
        cx: r.f32()?,
        cy: r.f32()?,
        width: r.u16()?,
        height: r.u16()?,
    };
    let n = r.count(PIXEL_BYTES)?;
    let mut pixels = Vec::with_capacity(n);
    let mut last: Option<(u16, u16)> = None;
    for _ in 0..n {
        let (x, y, depth_mm) = (r.u16()?, r.u16()?, r.u16()?);
        let c = r.take(3)?;
        if x >= intrinsics.width || y >= intrinsics.height {
            return Err(ProtocolError::Malformed(format!("pixel ({x}, {y}) outside image")));
        }
        if last.is_some_and(|(lx, ly)| (y, x) <= (ly, lx)) {
            return Err(ProtocolError::Malformed("pixels not strictly row-major".into()));
        }
        if depth_mm == 0 {
            return Err(ProtocolError::Malformed("zero depth".into()));
        }
        last = Some((x, y));
        pixels.push(DynPixel {
            x,
            y,
            depth_mm,
            rgb: [c[0], c[1], c[2]],
        });
    }
    r.finish()?;
    Ok(DynFramePayload {
        frame_index,
        timestamp_us,
        pose,
        intrinsics,
        pixels,
    })
}

impl Message {
    pub fn packet_type(&self) -> PacketType {
        match self {
            Message::Hello(_) => PacketType::Hello,
            Message::TsdfBlocks(_) => PacketType::TsdfBlocks,
            Message::McBlocks(_) => PacketType::McBlocks,
            Message::DynFrame(_) => PacketType::DynFrame,
            Message::Pose(_) => PacketType::Pose,
            Message::BlockRemove(_) => PacketType::BlockRemove,
            Message::TimeSync(_) => PacketType::TimeSync,
            Message::Metrics(_) => PacketType::Metrics,
        }
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            Message::Hello(h) => {
                w.u8(h.role as u8).f64(h.voxel_size).f64(h.truncation);
                let name = &h.name.as_bytes()[..h.name.len().min(u16::MAX as usize)];
                w.u16(name.len() as u16).bytes(name);
            }
            Message::TsdfBlocks(b) => return encode_tsdf_blocks(b),
            Message::McBlocks(b) => return encode_mc_blocks(b),
            Message::DynFrame(f) => return encode_dyn_frame(f),
            Message::Pose(p) => {
                w.u64(p.frame_index).u64(p.timestamp_us).u32(p.source);
                write_matrix(&mut w, &p.pose);
            }
            Message::BlockRemove(coords) => {
                w.u32(coords.len() as u32);
                for c in coords {
                    write_coord(&mut w, *c);
                }
            }
            Message::TimeSync(t) => {
                w.u8(t.reply as u8).u32(t.seq).u64(t.t1).u64(t.t2).u64(t.t3);
            }
            Message::Metrics(m) => {
                w.u8(m.end_of_stream as u8).u64(m.last_frame_index).u64(m.frames_sent);
            }
        }
        w.finish()
    }

    pub fn from_payload(kind: PacketType, bytes: &[u8]) -> Result<Self, ProtocolError> {
        let mut r = Reader::new(bytes);
        let flag = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(ProtocolError::Malformed(format!("bad flag byte {v}"))),
        };
        let msg = match kind {
            PacketType::TsdfBlocks => return decode_tsdf_blocks(bytes).map(Message::TsdfBlocks),
            PacketType::McBlocks => return decode_mc_blocks(bytes).map(Message::McBlocks),
            PacketType::DynFrame => return decode_dyn_frame(bytes).map(Message::DynFrame),
            PacketType::Hello => {
                let role = match r.u8()? {
                    1 => Role::Reconstruction,
                    2 => Role::Exploration,
                    3 => Role::Server,
                    v => return Err(ProtocolError::Malformed(format!("unknown role {v}"))),
                };
                let voxel_size = r.f64()?;
                let truncation = r.f64()?;
                let n = r.u16()? as usize;
                let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| ProtocolError::Malformed("name is not UTF-8".into()))?;
                Message::Hello(Hello {
                    role,
                    voxel_size,
                    truncation,
                    name,
                })
            }
            PacketType::Pose => Message::Pose(PosePayload {
                frame_index: r.u64()?,
                timestamp_us: r.u64()?,
                source: r.u32()?,
                pose: read_matrix(&mut r)?,
            }),
            PacketType::BlockRemove => {
                let n = r.count(12)?;
                Message::BlockRemove((0..n).map(|_| read_coord(&mut r)).collect::<Result<_, _>>()?)
            }
            PacketType::TimeSync => Message::TimeSync(TimeSyncPayload {
                reply: flag(r.u8()?)?,
                seq: r.u32()?,
                t1: r.u64()?,
                t2: r.u64()?,
                t3: r.u64()?,
            }),
            PacketType::Metrics => Message::Metrics(MetricsPayload {
                end_of_stream: flag(r.u8()?)?,
                last_frame_index: r.u64()?,
                frames_sent: r.u64()?,
            }),
        };
        r.finish()?;
        Ok(msg)
    }

    pub fn from_packet(p: &Packet) -> Result<Self, ProtocolError> {
        Self::from_payload(p.kind, &p.payload)
    }

    pub fn encode(&self, codec: Codec) -> Result<Vec<u8>, ProtocolError> {
        encode_packet(self.packet_type(), &self.to_payload(), codec)
    }
}
