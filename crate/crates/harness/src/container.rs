//! `DFSQ` sequence container: a header followed by one length-prefixed,
//! optionally zstd-compressed record per frame.
//!
//! Header (little-endian): magic `DFSQ`, version u16, flags u16 (bit 0 =
//! records compressed), width u32, height u32, fx fy cx cy f64, frame count
//! u32, name length u16 + UTF-8 name.
//!
//! Record: stored length u32, raw length u32, then the body: index u64,
//! timestamp u64, pose 16 × f64 (row-major camera-to-world), color
//! `w·h·3` bytes, depth `w·h` × f32 meters, instance count u16 with
//! (id u32, class u32) each, per-pixel instance id u16, per-pixel flow
//! validity u8, per-pixel flow 2 × f32.

use std::io::{self, Read, Write};

use dynfuse_core::frame::{FlowField, RgbdFrame};
use dynfuse_core::geometry::{CameraIntrinsics, Pose, Vec2};
use dynfuse_core::{DepthRange, Grid, InstanceMap, InstanceMeta};
use dynfuse_stream::protocol::ProtocolError;
use dynfuse_stream::wire::{Reader, Writer};
use thiserror::Error;

use crate::render::GroundTruthFrame;

pub const MAGIC: &[u8; 4] = b"DFSQ";
pub const VERSION: u16 = 1;
const FLAG_ZSTD: u16 = 1;
const MAX_RECORD: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a sequence container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown flags {0:#x}")]
    UnknownFlags(u16),
    #[error("container truncated")]
    Truncated,
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("expected {expected} frames, wrote {written}")]
    FrameCount { expected: u32, written: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<ProtocolError> for ContainerError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Truncated { .. } => ContainerError::Truncated,
            other => ContainerError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceHeader {
    pub name: String,
    pub intrinsics: CameraIntrinsics<f64>,
    pub frames: u32,
    pub compressed: bool,
}

impl SequenceHeader {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC)
            .u16(VERSION)
            .u16(if self.compressed { FLAG_ZSTD } else { 0 })
            .u32(self.intrinsics.width as u32)
            .u32(self.intrinsics.height as u32)
            .f64(self.intrinsics.fx)
            .f64(self.intrinsics.fy)
            .f64(self.intrinsics.cx)
            .f64(self.intrinsics.cy)
            .u32(self.frames)
            .u16(self.name.len() as u16)
            .bytes(self.name.as_bytes());
        w.finish()
    }

    fn read(r: &mut impl Read) -> Result<Self, ContainerError> {
        let mut fixed = [0u8; 4 + 2 + 2 + 8 + 32 + 4 + 2];
        read_exact(r, &mut fixed)?;
        let mut rd = Reader::new(&fixed);
        if rd.take(4)? != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = rd.u16()?;
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let flags = rd.u16()?;
        if flags & !FLAG_ZSTD != 0 {
            return Err(ContainerError::UnknownFlags(flags));
        }
        let (width, height) = (rd.u32()? as usize, rd.u32()? as usize);
        let (fx, fy, cx, cy) = (rd.f64()?, rd.f64()?, rd.f64()?, rd.f64()?);
        let frames = rd.u32()?;
        let name_len = rd.u16()? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
            .map_err(|e| ContainerError::Malformed(format!("intrinsics: {e}")))?;
        Ok(Self {
            name: String::from_utf8(name).map_err(|_| ContainerError::Malformed("name is not UTF-8".into()))?,
            intrinsics,
            frames,
            compressed: flags & FLAG_ZSTD != 0,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ContainerError::Truncated,
        _ => ContainerError::Io(e),
    })
}

fn encode_frame(f: &GroundTruthFrame) -> Vec<u8> {
    let n = f.frame.width() * f.frame.height();
    let mut w = Writer::with_capacity(64 + 128 + n * 20);
    w.u64(f.frame.index).u64(f.frame.timestamp_us);
    for v in f.pose.to_matrix() {
        w.f64(v);
    }
    for c in f.frame.color.as_slice() {
        w.bytes(c);
    }
    for d in f.frame.depth.as_slice() {
        w.f32(*d as f32);
    }
    w.u16(f.instances.instances.len() as u16);
    for m in &f.instances.instances {
        w.u32(m.id).u32(m.class);
    }
    for id in f.instances.ids.as_slice() {
        w.u16(*id as u16);
    }
    for v in f.flow.valid.as_slice() {
        w.u8(*v as u8);
    }
    for v in f.flow.vectors.as_slice() {
        w.f32(v.x as f32).f32(v.y as f32);
    }
    w.finish()
}

fn decode_frame(body: &[u8], intr: &CameraIntrinsics<f64>) -> Result<GroundTruthFrame, ContainerError> {
    let (w, h) = (intr.width, intr.height);
    let n = w * h;
    let mut r = Reader::new(body);
    let index = r.u64()?;
    let timestamp = r.u64()?;
    let mut m = [0.0; 16];
    for v in &mut m {
        *v = r.f64()?;
    }
    let pose = Pose::from_matrix(m).map_err(|e| ContainerError::Malformed(format!("pose: {e}")))?;
    let color_bytes = r.take(n * 3)?;
    let color = Grid::from_vec(w, h, color_bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).expect("sized");
    let mut depth = Vec::with_capacity(n);
    for _ in 0..n {
        depth.push(r.f32()? as f64);
    }
    let count = r.u16()? as usize;
    let mut metas = Vec::with_capacity(count);
    for _ in 0..count {
        metas.push((r.u32()?, r.u32()?));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        ids.push(r.u16()? as u32);
    }
    let mut valid = Vec::with_capacity(n);
    for _ in 0..n {
        valid.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(ContainerError::Malformed(format!("flow validity byte {b}"))),
        });
    }
    let mut vectors = Vec::with_capacity(n);
    for _ in 0..n {
        vectors.push(Vec2::new(r.f32()? as f64, r.f32()? as f64));
    }
    r.finish()?;

    let ids = Grid::from_vec(w, h, ids).expect("sized");
    let class_of = |id: u32| metas.iter().find(|(i, _)| *i == id).map(|(_, c)| *c);
    let mut counts = vec![0usize; count];
    let mut labels = Vec::with_capacity(n);
    for id in ids.as_slice() {
        if *id == 0 {
            labels.push(0);
            continue;
        }
        let slot = metas
            .iter()
            .position(|(i, _)| i == id)
            .ok_or_else(|| ContainerError::Malformed(format!("pixel id {id} has no instance entry")))?;
        counts[slot] += 1;
        labels.push(class_of(*id).unwrap_or(0));
    }
    let instances = InstanceMap {
        labels: Grid::from_vec(w, h, labels).expect("sized"),
        ids,
        instances: metas
            .iter()
            .zip(&counts)
            .map(|((id, class), n)| InstanceMeta {
                id: *id,
                class: *class,
                pixel_count: *n,
            })
            .collect(),
    };
    instances.validate().map_err(|e| ContainerError::Malformed(e.to_string()))?;
    let mut flow = FlowField::exact(Grid::from_vec(w, h, vectors).expect("sized"), Grid::from_vec(w, h, valid).expect("sized"));
    // invalid pixels carry zero vectors by construction
    for (v, ok) in flow.vectors.as_mut_slice().iter_mut().zip(flow.valid.as_slice()) {
        if !ok {
            *v = Vec2::zero();
        }
    }
    let frame = RgbdFrame::new(index, color, Grid::from_vec(w, h, depth).expect("sized"), timestamp, intr, DepthRange::default())
        .map_err(|e| ContainerError::Malformed(e.to_string()))?;
    Ok(GroundTruthFrame {
        frame,
        pose,
        instances,
        flow,
    })
}

pub struct SequenceWriter<W: Write> {
    out: W,
    header: SequenceHeader,
    written: u32,
}

impl<W: Write> SequenceWriter<W> {
    pub fn new(mut out: W, header: SequenceHeader) -> Result<Self, ContainerError> {
        out.write_all(&header.encode())?;
        Ok(Self { out, header, written: 0 })
    }

    pub fn write_frame(&mut self, f: &GroundTruthFrame) -> Result<(), ContainerError> {
        if (f.frame.width(), f.frame.height()) != (self.header.intrinsics.width, self.header.intrinsics.height) {
            return Err(ContainerError::Malformed("frame size differs from header".into()));
        }
        if self.written >= self.header.frames {
            return Err(ContainerError::FrameCount {
                expected: self.header.frames,
                written: self.written + 1,
            });
        }
        let raw = encode_frame(f);
        let stored = if self.header.compressed { zstd::bulk::compress(&raw, 3)? } else { raw.clone() };
        self.out.write_all(&(stored.len() as u32).to_le_bytes())?;
        self.out.write_all(&(raw.len() as u32).to_le_bytes())?;
        self.out.write_all(&stored)?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ContainerError> {
        if self.written != self.header.frames {
            return Err(ContainerError::FrameCount {
                expected: self.header.frames,
                written: self.written,
            });
        }
        self.out.flush()?;
        Ok(self.out)
    }
}

pub struct SequenceReader<R: Read> {
    input: R,
    header: SequenceHeader,
    read: u32,
}

impl<R: Read> SequenceReader<R> {
    pub fn new(mut input: R) -> Result<Self, ContainerError> {
        let header = SequenceHeader::read(&mut input)?;
        Ok(Self { input, header, read: 0 })
    }

    pub fn header(&self) -> &SequenceHeader {
        &self.header
    }

    pub fn next_frame(&mut self) -> Result<Option<GroundTruthFrame>, ContainerError> {
        if self.read == self.header.frames {
            return Ok(None);
        }
        let mut lens = [0u8; 8];
        read_exact(&mut self.input, &mut lens)?;
        let stored = u32::from_le_bytes(lens[..4].try_into().unwrap());
        let raw = u32::from_le_bytes(lens[4..].try_into().unwrap());
        if stored > MAX_RECORD || raw > MAX_RECORD {
            return Err(ContainerError::Malformed(format!("record of {stored}/{raw} bytes")));
        }
        let mut body = vec![0u8; stored as usize];
        read_exact(&mut self.input, &mut body)?;
        let body = if self.header.compressed {
            let out = zstd::bulk::decompress(&body, raw as usize).map_err(|e| ContainerError::Malformed(format!("zstd: {e}")))?;
            if out.len() != raw as usize {
                return Err(ContainerError::Malformed("decompressed length mismatch".into()));
            }
            out
        } else {
            if stored != raw {
                return Err(ContainerError::Malformed("stored and raw lengths differ".into()));
            }
            body
        };
        let f = decode_frame(&body, &self.header.intrinsics)?;
        self.read += 1;
        Ok(Some(f))
    }
}

impl<R: Read> Iterator for SequenceReader<R> {
    type Item = Result<GroundTruthFrame, ContainerError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

/// Renders a whole script into container bytes.
pub fn record_script(script: &crate::scene::SceneScript, compressed: bool, out: impl Write) -> Result<(), crate::HarnessError> {
    let mut r = crate::render::Renderer::new(script)?;
    let header = SequenceHeader {
        name: script.name.clone(),
        intrinsics: r.intrinsics(),
        frames: script.frames as u32,
        compressed,
    };
    let mut w = SequenceWriter::new(out, header)?;
    for k in 0..script.frames {
        w.write_frame(&r.render(k))?;
    }
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::builtin;

    fn small(frames: usize) -> crate::scene::SceneScript {
        let mut s = builtin("moving_box").unwrap().truncated(frames);
        s.width = 80;
        s.height = 60;
        s
    }

    #[test]
    fn roundtrip_is_exact_for_rendered_frames() {
        for compressed in [false, true] {
            let s = small(25);
            let mut bytes = Vec::new();
            record_script(&s, compressed, &mut bytes).unwrap();
            let reader = SequenceReader::new(&bytes[..]).unwrap();
            assert_eq!(reader.header().frames, 25);
            assert_eq!(reader.header().name, "moving_box");
            let mut r = crate::render::Renderer::new(&s).unwrap();
            let mut n = 0;
            for (k, f) in reader.enumerate() {
                let f = f.unwrap();
                let want = r.render(k);
                assert_eq!(f.frame, want.frame);
                assert_eq!(f.instances, want.instances);
                assert_eq!(f.flow.valid, want.flow.valid);
                for (a, b) in f.flow.vectors.as_slice().iter().zip(want.flow.vectors.as_slice()) {
                    assert!((*a - *b).norm() < 1e-4);
                }
                assert!((f.pose.translation - want.pose.translation).norm() == 0.0);
                n += 1;
            }
            assert_eq!(n, 25);
        }
    }

    #[test]
    fn generation_is_bit_identical() {
        let s = small(6);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        record_script(&s, true, &mut a).unwrap();
        record_script(&s, true, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn version_and_truncation_are_rejected() {
        let s = small(2);
        let mut bytes = Vec::new();
        record_script(&s, false, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(SequenceReader::new(&bad[..]), Err(ContainerError::UnsupportedVersion(2))));
        bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SequenceReader::new(&bad[..]), Err(ContainerError::BadMagic)));
        let cut = &bytes[..bytes.len() - 10];
        let mut r = SequenceReader::new(cut).unwrap();
        assert!(r.next_frame().unwrap().is_some());
        assert!(matches!(r.next_frame(), Err(ContainerError::Truncated)));
    }

    #[test]
    fn writer_enforces_frame_count() {
        let s = small(2);
        let mut r = crate::render::Renderer::new(&s).unwrap();
        let header = SequenceHeader {
            name: "x".into(),
            intrinsics: r.intrinsics(),
            frames: 2,
            compressed: false,
        };
        let mut w = SequenceWriter::new(Vec::new(), header).unwrap();
        w.write_frame(&r.render(0)).unwrap();
        assert!(matches!(w.finish(), Err(ContainerError::FrameCount { expected: 2, written: 1 })));
    }
}
