//! Packet framing: a 16-byte header followed by an optionally compressed payload.
//!
//! ```text
//! 0..4   magic "DYNF"
//! 4      version
//! 5      packet type
//! 6      flags (bit 0: zstd)
//! 7      reserved, zero
//! 8..12  payload_len (LE)
//! 12..16 uncompressed_len (LE)
//! ```

use std::io::{self, Read};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DYNF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Upper bound on a decoded payload; larger headers are rejected before allocating.
pub const MAX_PAYLOAD: usize = 256 << 20;

const FLAG_ZSTD: u8 = 0x01;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown packet type {0:#04x}")]
    UnknownType(u8),
    #[error("unknown flags {0:#04x}")]
    UnknownFlags(u8),
    #[error("truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("payload of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("decompressed {actual} bytes, header says {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("unexpected {0:?} packet")]
    Unexpected(PacketType),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum PacketType {
    Hello = 0x01,
    TsdfBlocks = 0x02,
    McBlocks = 0x03,
    DynFrame = 0x04,
    Pose = 0x05,
    BlockRemove = 0x06,
    TimeSync = 0x07,
    Metrics = 0x08,
}

impl PacketType {
    pub const ALL: [PacketType; 8] = [
        PacketType::Hello,
        PacketType::TsdfBlocks,
        PacketType::McBlocks,
        PacketType::DynFrame,
        PacketType::Pose,
        PacketType::BlockRemove,
        PacketType::TimeSync,
        PacketType::Metrics,
    ];

    pub fn from_u8(v: u8) -> Result<Self, ProtocolError> {
        Self::ALL
            .into_iter()
            .find(|t| *t as u8 == v)
            .ok_or(ProtocolError::UnknownType(v))
    }

    /// Dense index `0..8`, for per-type counters.
    pub fn slot(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            PacketType::Hello => "HELLO",
            PacketType::TsdfBlocks => "TSDF_BLOCKS",
            PacketType::McBlocks => "MC_BLOCKS",
            PacketType::DynFrame => "DYN_FRAME",
            PacketType::Pose => "POSE",
            PacketType::BlockRemove => "BLOCK_REMOVE",
            PacketType::TimeSync => "TIME_SYNC",
            PacketType::Metrics => "METRICS",
        }
    }
}

/// Payload compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Codec {
    Identity,
    /// Lossless zstd at the given level.
    Zstd(i32),
    #[default]
    Default,
}

impl Codec {
    fn resolved(self) -> Codec {
        match self {
            Codec::Default => Codec::Zstd(3),
            c => c,
        }
    }
}

impl std::str::FromStr for Codec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Codec::Identity),
            "default" | "zstd" => Ok(Codec::Default),
            _ => Err(format!("unknown codec `{s}` (expected identity or default)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub kind: PacketType,
    pub payload: Vec<u8>,
}

/// Frames a payload. Fails only if the payload cannot be described by the header.
pub fn encode_packet(kind: PacketType, payload: &[u8], codec: Codec) -> Result<Vec<u8>, ProtocolError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(ProtocolError::TooLarge(payload.len()));
    }
    let (flags, body) = match codec.resolved() {
        Codec::Zstd(level) => (FLAG_ZSTD, zstd::bulk::compress(payload, level)?),
        _ => (0, payload.to_vec()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, kind as u8, flags, 0]);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: PacketType,
    pub flags: u8,
    pub payload_len: usize,
    pub uncompressed_len: usize,
}

pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    let magic = [h[0], h[1], h[2], h[3]];
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(ProtocolError::BadVersion(h[4]));
    }
    let kind = PacketType::from_u8(h[5])?;
    let flags = h[6];
    if flags & !FLAG_ZSTD != 0 {
        return Err(ProtocolError::UnknownFlags(flags));
    }
    if h[7] != 0 {
        return Err(ProtocolError::Malformed("reserved byte set".into()));
    }
    let payload_len = u32::from_le_bytes([h[8], h[9], h[10], h[11]]) as usize;
    let uncompressed_len = u32::from_le_bytes([h[12], h[13], h[14], h[15]]) as usize;
    for n in [payload_len, uncompressed_len] {
        if n > MAX_PAYLOAD {
            return Err(ProtocolError::TooLarge(n));
        }
    }
    if flags & FLAG_ZSTD == 0 && payload_len != uncompressed_len {
        return Err(ProtocolError::LengthMismatch {
            expected: uncompressed_len,
            actual: payload_len,
        });
    }
    Ok(Header {
        kind,
        flags,
        payload_len,
        uncompressed_len,
    })
}

fn unpack(header: &Header, body: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    if header.flags & FLAG_ZSTD == 0 {
        return Ok(body.to_vec());
    }
    let out = zstd::bulk::decompress(body, header.uncompressed_len).map_err(|e| ProtocolError::Decompress(e.to_string()))?;
    if out.len() != header.uncompressed_len {
        return Err(ProtocolError::LengthMismatch {
            expected: header.uncompressed_len,
            actual: out.len(),
        });
    }
    Ok(out)
}

/// Decodes one packet from the front of `bytes`, returning it and the number of bytes consumed.
pub fn decode_packet(bytes: &[u8]) -> Result<(Packet, usize), ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let header = parse_header(bytes[..HEADER_LEN].try_into().expect("header length"))?;
    let end = HEADER_LEN + header.payload_len;
    if bytes.len() < end {
        return Err(ProtocolError::Truncated {
            needed: end,
            available: bytes.len(),
        });
    }
    let payload = unpack(&header, &bytes[HEADER_LEN..end])?;
    Ok((
        Packet {
            kind: header.kind,
            payload,
        },
        end,
    ))
}

/// Reads one packet from a byte stream. `Ok(None)` on a clean end of stream
/// at a packet boundary; the second value is the packet's exact wire bytes.
pub fn read_packet(r: &mut impl Read) -> Result<Option<(Packet, Vec<u8>)>, ProtocolError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    needed: HEADER_LEN,
                    available: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let header = parse_header(&h)?;
    let mut wire = vec![0u8; HEADER_LEN + header.payload_len];
    wire[..HEADER_LEN].copy_from_slice(&h);
    r.read_exact(&mut wire[HEADER_LEN..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated {
            needed: header.payload_len,
            available: 0,
        },
        _ => e.into(),
    })?;
    let payload = unpack(&header, &wire[HEADER_LEN..])?;
    Ok(Some((
        Packet {
            kind: header.kind,
            payload,
        },
        wire,
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_payload_roundtrip() {
        for codec in [Codec::Identity, Codec::Default] {
            let bytes = encode_packet(PacketType::Hello, &[], codec).unwrap();
            let (p, n) = decode_packet(&bytes).unwrap();
            assert_eq!(n, bytes.len());
            assert_eq!(p.kind, PacketType::Hello);
            assert!(p.payload.is_empty());
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_packet(PacketType::Pose, &[1, 2, 3], Codec::Identity).unwrap();
        assert_eq!(&bytes[..4], b"DYNF");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0x05);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(&bytes[16..], &[1, 2, 3]);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_packet(PacketType::Pose, &[1, 2, 3], Codec::Identity).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_packet(&bytes), Err(ProtocolError::BadMagic(_))));
        assert!(matches!(read_packet(&mut &bytes[..]), Err(ProtocolError::BadMagic(_))));
    }

    #[test]
    fn bad_version_type_and_truncation() {
        let good = encode_packet(PacketType::Metrics, &[9; 40], Codec::Default).unwrap();
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode_packet(&b), Err(ProtocolError::BadVersion(2))));
        let mut b = good.clone();
        b[5] = 0x09;
        assert!(matches!(decode_packet(&b), Err(ProtocolError::UnknownType(9))));
        assert!(matches!(decode_packet(&good[..good.len() - 1]), Err(ProtocolError::Truncated { .. })));
        assert!(matches!(read_packet(&mut &good[..10]), Err(ProtocolError::Truncated { .. })));
        assert!(read_packet(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn wrong_uncompressed_length_is_rejected() {
        let mut b = encode_packet(PacketType::Metrics, &[9; 40], Codec::Default).unwrap();
        b[12] = 41;
        assert!(decode_packet(&b).is_err());
        let mut b = encode_packet(PacketType::Metrics, &[9; 40], Codec::Identity).unwrap();
        b[12] = 39;
        assert!(matches!(decode_packet(&b), Err(ProtocolError::LengthMismatch { .. })));
    }

    #[test]
    fn stream_of_packets() {
        let mut wire = Vec::new();
        for (i, t) in PacketType::ALL.into_iter().enumerate() {
            wire.extend(encode_packet(t, &vec![i as u8; i * 100], Codec::Default).unwrap());
        }
        let mut r = &wire[..];
        let mut total = 0;
        for (i, t) in PacketType::ALL.into_iter().enumerate() {
            let (p, w) = read_packet(&mut r).unwrap().unwrap();
            assert_eq!(p.kind, t);
            assert_eq!(p.payload, vec![i as u8; i * 100]);
            assert_eq!(w, wire[total..total + w.len()]);
            total += w.len();
        }
        assert_eq!(total, wire.len());
        assert!(read_packet(&mut r).unwrap().is_none());
    }

    #[test]
    fn codec_parsing() {
        assert_eq!("identity".parse::<Codec>().unwrap(), Codec::Identity);
        assert_eq!("default".parse::<Codec>().unwrap(), Codec::Default);
        assert!("lz4".parse::<Codec>().is_err());
    }
}
