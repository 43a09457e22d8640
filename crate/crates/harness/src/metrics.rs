//! Latency, frame rate and bandwidth computed from per-process event logs.
//!
//! Every function here is pure: the same log always yields the same report.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dynfuse_stream::traffic::{Direction, TrafficRecord};
use dynfuse_stream::PacketType;
use serde::{Deserialize, Serialize};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2})", self.mean, self.std)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Seconds.
    pub mean: f64,
    pub std: f64,
    pub matched: usize,
    /// Emissions without arrival plus arrivals without emission.
    pub unmatched: usize,
}

/// End-to-end latency per frame: arrival minus emission, both mapped to the
/// server clock by adding the respective process's offset.
///
/// Returns `None` when no frame index appears in both logs.
pub fn latency_metric(emissions: &[(u64, u64)], arrivals: &[(u64, u64)], emit_offset_us: f64, arrive_offset_us: f64) -> Option<LatencyStats> {
    let emitted: BTreeMap<u64, u64> = emissions.iter().copied().collect();
    let arrived: BTreeMap<u64, u64> = arrivals.iter().copied().collect();
    let mut gaps = Vec::new();
    for (frame, e) in &emitted {
        if let Some(a) = arrived.get(frame) {
            let sent = *e as f64 + emit_offset_us;
            let got = *a as f64 + arrive_offset_us;
            gaps.push(got - sent);
        }
    }
    let unmatched = emitted.len() + arrived.len() - 2 * gaps.len();
    // Stay in microseconds until the end so whole-µs logs sum exactly.
    let s = Stat::of(&gaps)?;
    Some(LatencyStats {
        mean: s.mean / 1e6,
        std: s.std / 1e6,
        matched: gaps.len(),
        unmatched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpsStats {
    /// `1 / mean(delta)`.
    pub mean: f64,
    /// First-order propagation of the delta spread: `std(delta) / mean(delta)²`.
    pub std: f64,
    /// Seconds between consecutive arrivals.
    pub delta: Stat,
    pub arrivals: usize,
}

/// Frame rate from consecutive dynamic-frame arrival times (µs, any clock).
/// Undefined for fewer than two arrivals or a zero mean delta.
pub fn fps_metric(arrivals_us: &[u64]) -> Option<FpsStats> {
    if arrivals_us.len() < 2 {
        return None;
    }
    let deltas: Vec<f64> = arrivals_us.windows(2).map(|w| w[1] as f64 - w[0] as f64).collect();
    let us = Stat::of(&deltas)?;
    if us.mean <= 0.0 {
        return None;
    }
    Some(FpsStats {
        mean: 1e6 / us.mean,
        std: us.std * 1e6 / (us.mean * us.mean),
        delta: Stat {
            mean: us.mean / 1e6,
            std: us.std / 1e6,
        },
        arrivals: arrivals_us.len(),
    })
}

/// Traffic classes reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficGroup {
    Tsdf,
    Mc,
    Dyn,
    Other,
}

impl TrafficGroup {
    pub fn of(kind: PacketType) -> Self {
        match kind {
            PacketType::TsdfBlocks => TrafficGroup::Tsdf,
            PacketType::McBlocks => TrafficGroup::Mc,
            PacketType::DynFrame => TrafficGroup::Dyn,
            _ => TrafficGroup::Other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ByteRecord {
    pub t_us: f64,
    pub group: TrafficGroup,
    pub bytes: u64,
}

/// MBit/s per group over consecutive one-second windows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BandwidthStats {
    pub tsdf: Stat,
    pub mc: Stat,
    #[serde(rename = "dyn")]
    pub dyn_: Stat,
    pub other: Stat,
    pub windows: usize,
}

impl BandwidthStats {
    pub fn get(&self, g: TrafficGroup) -> Stat {
        match g {
            TrafficGroup::Tsdf => self.tsdf,
            TrafficGroup::Mc => self.mc,
            TrafficGroup::Dyn => self.dyn_,
            TrafficGroup::Other => self.other,
        }
    }
}

pub const WINDOW_US: f64 = 1e6;

/// Splits `[start, end]` into one-second windows (the last may be shorter,
/// and is normalized by its own length) and reports per-group rates.
/// Records outside the span are ignored.
pub fn bandwidth_metric(log: &[ByteRecord], start_us: f64, end_us: f64) -> BandwidthStats {
    let span = (end_us - start_us).max(0.0);
    let windows = ((span / WINDOW_US).ceil() as usize).max(1);
    let len = |i: usize| {
        if i + 1 < windows || span == 0.0 {
            WINDOW_US
        } else {
            span - (windows - 1) as f64 * WINDOW_US
        }
    };
    let mut bits: BTreeMap<TrafficGroup, Vec<f64>> = BTreeMap::new();
    for g in [TrafficGroup::Tsdf, TrafficGroup::Mc, TrafficGroup::Dyn, TrafficGroup::Other] {
        bits.insert(g, vec![0.0; windows]);
    }
    for r in log {
        if r.t_us < start_us || r.t_us > end_us {
            continue;
        }
        let w = (((r.t_us - start_us) / WINDOW_US).floor() as usize).min(windows - 1);
        bits.get_mut(&r.group).expect("all groups present")[w] += r.bytes as f64 * 8.0;
    }
    let rate = |g| {
        let per: Vec<f64> = bits[&g].iter().enumerate().map(|(i, b)| b / 1e6 / (len(i) / 1e6)).collect();
        Stat::of(&per).unwrap_or_default()
    };
    BandwidthStats {
        tsdf: rate(TrafficGroup::Tsdf),
        mc: rate(TrafficGroup::Mc),
        dyn_: rate(TrafficGroup::Dyn),
        other: rate(TrafficGroup::Other),
        windows,
    }
}

/// One line of a process log. `source` names the process.
#[derive(Debug, Clone, PartialEq)]
pub enum LogEvent {
    /// Server clock minus this process's clock; `None` when sync failed.
    Offset { source: String, offset_us: Option<f64> },
    /// A frame entered the pipeline.
    Emit { source: String, frame: u64, t_us: u64 },
    /// A frame's dynamic points reached an exploration client.
    Arrive { source: String, frame: u64, t_us: u64 },
    Traffic { source: String, record: TrafficRecord },
}

impl LogEvent {
    pub fn source(&self) -> &str {
        match self {
            LogEvent::Offset { source, .. }
            | LogEvent::Emit { source, .. }
            | LogEvent::Arrive { source, .. }
            | LogEvent::Traffic { source, .. } => source,
        }
    }

    /// The event without its wall-clock parts, for comparing runs.
    pub fn timeless(&self) -> Option<String> {
        match self {
            LogEvent::Offset { .. } => None,
            LogEvent::Emit { source, frame, .. } => Some(format!("emit {source} {frame}")),
            LogEvent::Arrive { source, frame, .. } => Some(format!("arrive {source} {frame}")),
            LogEvent::Traffic { source, record } => {
                let dir = if record.direction == Direction::In { "in" } else { "out" };
                Some(format!("traffic {source} {dir} {} {}", record.kind.name(), record.bytes))
            }
        }
    }
}

impl fmt::Display for LogEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogEvent::Offset { source, offset_us: Some(o) } => write!(f, "offset {source} {o}"),
            LogEvent::Offset { source, offset_us: None } => write!(f, "offset {source} none"),
            LogEvent::Emit { source, frame, t_us } => write!(f, "emit {source} {frame} {t_us}"),
            LogEvent::Arrive { source, frame, t_us } => write!(f, "arrive {source} {frame} {t_us}"),
            LogEvent::Traffic { source, record } => write!(f, "traffic {source} {record}"),
        }
    }
}

impl FromStr for LogEvent {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut parts = line.split_whitespace();
        let tag = parts.next().ok_or("empty line")?;
        let source = parts.next().ok_or("missing source")?.to_string();
        let rest: Vec<&str> = parts.collect();
        let num = |s: &str| s.parse::<u64>().map_err(|e| format!("`{s}`: {e}"));
        match (tag, &rest[..]) {
            ("offset", ["none"]) => Ok(LogEvent::Offset { source, offset_us: None }),
            ("offset", [o]) => Ok(LogEvent::Offset {
                source,
                offset_us: Some(o.parse().map_err(|e| format!("offset `{o}`: {e}"))?),
            }),
            ("emit", [k, t]) => Ok(LogEvent::Emit {
                source,
                frame: num(k)?,
                t_us: num(t)?,
            }),
            ("arrive", [k, t]) => Ok(LogEvent::Arrive {
                source,
                frame: num(k)?,
                t_us: num(t)?,
            }),
            ("traffic", r) if r.len() == 4 => Ok(LogEvent::Traffic {
                source,
                record: r.join(" ").parse()?,
            }),
            _ => Err(format!("unrecognized log line `{line}`")),
        }
    }
}

/// Parses a whole log, skipping blank lines and `#` comments.
pub fn parse_log(text: &str) -> Result<Vec<LogEvent>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| l.parse().map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub emitter: Option<String>,
    pub explorer: Option<String>,
    /// Seconds; absent without matched frames or clock offsets.
    pub latency: Option<LatencyStats>,
    pub fps: Option<FpsStats>,
    /// MBit/s; TSDF as sent by the emitter, the rest as received by the explorer.
    pub bandwidth: BandwidthStats,
    pub frames_emitted: usize,
    pub frames_arrived: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.latency {
            Some(l) => writeln!(f, "latency   {:.3} ({:.3}) s over {} frames, {} unmatched", l.mean, l.std, l.matched, l.unmatched)?,
            None => writeln!(f, "latency   n/a")?,
        }
        match &self.fps {
            Some(p) => writeln!(f, "fps       {:.2} ({:.2})", p.mean, p.std)?,
            None => writeln!(f, "fps       n/a")?,
        }
        let b = &self.bandwidth;
        writeln!(f, "bandwidth MBit/s over {} windows", b.windows)?;
        writeln!(f, "  tsdf    {}", b.tsdf)?;
        writeln!(f, "  mc      {}", b.mc)?;
        writeln!(f, "  dyn     {}", b.dyn_)?;
        writeln!(f, "  other   {}", b.other)?;
        write!(f, "frames    {} emitted, {} arrived", self.frames_emitted, self.frames_arrived)
    }
}

/// Builds the report from merged logs. The emitter is the first source with
/// emissions; the explorer is `explorer` or the first source with arrivals.
pub fn compute_report(events: &[LogEvent], explorer: Option<&str>) -> MetricsReport {
    let emitter = events.iter().find_map(|e| matches!(e, LogEvent::Emit { .. }).then(|| e.source().to_string()));
    let explorer = explorer
        .map(str::to_string)
        .or_else(|| events.iter().find_map(|e| matches!(e, LogEvent::Arrive { .. }).then(|| e.source().to_string())));
    let offset = |src: &Option<String>| -> Option<f64> {
        let src = src.as_deref()?;
        events.iter().rev().find_map(|e| match e {
            LogEvent::Offset { source, offset_us } if source == src => Some(*offset_us),
            _ => None,
        })?
    };
    let (emit_off, arrive_off) = (offset(&emitter), offset(&explorer));
    let is = |e: &LogEvent, src: &Option<String>| src.as_deref() == Some(e.source());

    let emissions: Vec<(u64, u64)> = events
        .iter()
        .filter_map(|e| match e {
            LogEvent::Emit { frame, t_us, .. } if is(e, &emitter) => Some((*frame, *t_us)),
            _ => None,
        })
        .collect();
    let arrivals: Vec<(u64, u64)> = events
        .iter()
        .filter_map(|e| match e {
            LogEvent::Arrive { frame, t_us, .. } if is(e, &explorer) => Some((*frame, *t_us)),
            _ => None,
        })
        .collect();
    let latency = match (emit_off, arrive_off) {
        (Some(a), Some(b)) => latency_metric(&emissions, &arrivals, a, b),
        _ => None,
    };
    let fps = fps_metric(&arrivals.iter().map(|a| a.1).collect::<Vec<_>>());

    let mut bytes = Vec::new();
    for e in events {
        let LogEvent::Traffic { record, .. } = e else { continue };
        let group = TrafficGroup::of(record.kind);
        let keep = if is(e, &emitter) {
            record.direction == Direction::Out && group == TrafficGroup::Tsdf
        } else if is(e, &explorer) {
            record.direction == Direction::In && group != TrafficGroup::Tsdf
        } else {
            false
        };
        if keep {
            let off = if is(e, &emitter) { emit_off } else { arrive_off };
            bytes.push(ByteRecord {
                t_us: record.timestamp_us as f64 + off.unwrap_or(0.0),
                group,
                bytes: record.bytes as u64,
            });
        }
    }
    let start = emissions
        .first()
        .map(|(_, t)| *t as f64 + emit_off.unwrap_or(0.0))
        .into_iter()
        .chain(bytes.iter().map(|b| b.t_us))
        .fold(f64::INFINITY, f64::min);
    let end = bytes.iter().map(|b| b.t_us).fold(f64::NEG_INFINITY, f64::max);
    let bandwidth = if start.is_finite() && end.is_finite() {
        bandwidth_metric(&bytes, start, end.max(start))
    } else {
        BandwidthStats::default()
    };
    MetricsReport {
        emitter,
        explorer,
        latency,
        fps,
        bandwidth,
        frames_emitted: emissions.len(),
        frames_arrived: arrivals.len(),
    }
}
