//! Byte accounting per packet type and the line-delimited traffic log.

use std::fmt;
use std::io::{self, Read};

use crate::protocol::PacketType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrafficCounters {
    pub by_type: [u64; 8],
    pub total: u64,
}

impl TrafficCounters {
    pub fn add(&mut self, kind: PacketType, bytes: usize) {
        self.by_type[kind.slot()] += bytes as u64;
        self.total += bytes as u64;
    }

    pub fn get(&self, kind: PacketType) -> u64 {
        self.by_type[kind.slot()]
    }

    pub fn sum_by_type(&self) -> u64 {
        self.by_type.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// One packet crossing a connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrafficRecord {
    pub timestamp_us: u64,
    pub direction: Direction,
    pub kind: PacketType,
    pub bytes: usize,
}

impl fmt::Display for TrafficRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dir = match self.direction {
            Direction::In => "in",
            Direction::Out => "out",
        };
        write!(f, "{} {} {} {}", self.timestamp_us, dir, self.kind.name(), self.bytes)
    }
}

impl std::str::FromStr for TrafficRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let [ts, dir, kind, bytes] = parts[..] else {
            return Err(format!("expected 4 fields: `{s}`"));
        };
        Ok(Self {
            timestamp_us: ts.parse().map_err(|e| format!("timestamp: {e}"))?,
            direction: match dir {
                "in" => Direction::In,
                "out" => Direction::Out,
                d => return Err(format!("bad direction `{d}`")),
            },
            kind: PacketType::ALL
                .into_iter()
                .find(|t| t.name() == kind)
                .ok_or_else(|| format!("bad packet type `{kind}`"))?,
            bytes: bytes.parse().map_err(|e| format!("bytes: {e}"))?,
        })
    }
}

/// Counts every byte read through it.
#[derive(Debug)]
pub struct CountingReader<R> {
    inner: R,
    pub count: u64,
}

impl<R> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, count: 0 }
    }

    pub fn get_ref(&self) -> &R {
        &self.inner
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n as u64;
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrips_through_text() {
        let r = TrafficRecord {
            timestamp_us: 123,
            direction: Direction::Out,
            kind: PacketType::McBlocks,
            bytes: 77,
        };
        assert_eq!(r.to_string(), "123 out MC_BLOCKS 77");
        assert_eq!(r.to_string().parse::<TrafficRecord>().unwrap(), r);
        assert!("1 up MC_BLOCKS 2".parse::<TrafficRecord>().is_err());
    }

    #[test]
    fn counters_sum() {
        let mut c = TrafficCounters::default();
        c.add(PacketType::Hello, 10);
        c.add(PacketType::Metrics, 5);
        c.add(PacketType::Hello, 1);
        assert_eq!(c.get(PacketType::Hello), 11);
        assert_eq!(c.sum_by_type(), c.total);
    }
}
