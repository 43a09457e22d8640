//! Drives the reconstruction pipeline over a frame source and, for full runs,
//! streams it through a relay server to headless exploration clients.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dynfuse_core::fusion::{extract_mc_block, BlockCoord, McBlock, VoxelBlockMap};
use dynfuse_core::geometry::{CameraIntrinsics, Pose, Vec3};
use dynfuse_core::pipeline::{FrameOutput, PipelineParams, Reconstructor};
use dynfuse_core::frame::RgbdFrame;
use dynfuse_core::{Grid, Mesh, PoseSource};
use dynfuse_stream::exploration::{hex, mc_digest, ExplorationState, StateDigest};
use dynfuse_stream::timesync::now_us;
use dynfuse_stream::traffic::{Direction, TrafficRecord};
use dynfuse_stream::server::ConnectionStats;
use dynfuse_stream::{spawn_server, Codec, ExplorationClient, ExplorationReport, ReconstructionClient, SendReport, ServerConfig};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::container::SequenceReader;
use crate::metrics::{compute_report, LogEvent, MetricsReport};
use crate::providers::{GtFlow, GtSegmentation};
use crate::render::{GroundTruthFrame, Renderer};
use crate::scene::SceneScript;
use crate::HarnessError;

/// Frames with ground truth, rendered on the fly or read from a container.
pub enum FrameSource {
    Script { renderer: Renderer, next: usize },
    Sequence { reader: SequenceReader<Box<dyn Read + Send>> },
}

impl FrameSource {
    pub fn script(script: &SceneScript) -> Result<Self, HarnessError> {
        Ok(FrameSource::Script {
            renderer: Renderer::new(script)?,
            next: 0,
        })
    }

    pub fn reader(input: impl Read + Send + 'static) -> Result<Self, HarnessError> {
        let boxed: Box<dyn Read + Send> = Box::new(input);
        Ok(FrameSource::Sequence {
            reader: SequenceReader::new(boxed)?,
        })
    }

    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        Self::reader(BufReader::new(File::open(path)?))
    }

    pub fn name(&self) -> &str {
        match self {
            FrameSource::Script { renderer, .. } => &renderer.script().name,
            FrameSource::Sequence { reader } => &reader.header().name,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        match self {
            FrameSource::Script { renderer, .. } => renderer.intrinsics(),
            FrameSource::Sequence { reader } => reader.header().intrinsics,
        }
    }

    pub fn frames(&self) -> usize {
        match self {
            FrameSource::Script { renderer, .. } => renderer.script().frames,
            FrameSource::Sequence { reader } => reader.header().frames as usize,
        }
    }

    pub fn next_frame(&mut self) -> Result<Option<GroundTruthFrame>, HarnessError> {
        match self {
            FrameSource::Script { renderer, next } => {
                if *next >= renderer.script().frames {
                    return Ok(None);
                }
                *next += 1;
                Ok(Some(renderer.render(*next - 1)))
            }
            FrameSource::Sequence { reader } => Ok(reader.next_frame()?),
        }
    }
}

/// What one frame did to the model.
#[derive(Debug, Clone)]
pub struct Step {
    pub output: FrameOutput<f64>,
    /// The frame as it entered the pipeline.
    pub frame: RgbdFrame<f64>,
    pub gt: GroundTruthPart,
}

/// Ground truth kept alongside a step for assertions.
#[derive(Debug, Clone)]
pub struct GroundTruthPart {
    pub pose: Pose<f64>,
    pub instances: dynfuse_core::InstanceMap,
}

/// The reconstruction process fed with ground-truth perception, keeping a
/// Marching Cubes view of the model that is refreshed on demand.
pub struct ReconstructionDriver {
    rec: Reconstructor<f64>,
    seg: GtSegmentation,
    flow: GtFlow,
    mc: BTreeMap<BlockCoord, McBlock>,
    /// Blocks written since the last refresh.
    stale: BTreeSet<BlockCoord>,
    /// Scene pose of the first camera, which is the model's origin.
    origin: Option<Pose<f64>>,
}

impl ReconstructionDriver {
    pub fn new(intr: CameraIntrinsics<f64>, params: PipelineParams<f64>) -> Self {
        Self {
            rec: Reconstructor::new(intr, params),
            seg: GtSegmentation::default(),
            flow: GtFlow::default(),
            mc: BTreeMap::new(),
            stale: BTreeSet::new(),
            origin: None,
        }
    }

    pub fn reconstructor(&self) -> &Reconstructor<f64> {
        &self.rec
    }

    pub fn map(&self) -> &VoxelBlockMap {
        self.rec.map()
    }

    pub fn step(&mut self, gt: GroundTruthFrame) -> Step {
        let origin = *self.origin.get_or_insert(gt.pose);
        let relative = origin.inverse().compose(&gt.pose);
        let index = gt.frame.index;
        self.seg.push(index, gt.instances.clone());
        self.flow.push(index, gt.flow);
        let frame = gt.frame.clone();
        let output = self.rec.process(gt.frame, &mut self.seg, &mut self.flow, Some(&relative));
        self.stale.extend(output.dirty.iter().copied());
        Step {
            output,
            frame,
            gt: GroundTruthPart {
                pose: gt.pose,
                instances: gt.instances,
            },
        }
    }

    /// Re-extracts every block that reads a voxel written since the last
    /// refresh; returns the blocks whose cells changed.
    pub fn refresh(&mut self) -> Vec<BlockCoord> {
        let map = self.rec.map();
        let mut affected = BTreeSet::new();
        for c in std::mem::take(&mut self.stale) {
            for dz in [0, -1] {
                for dy in [0, -1] {
                    for dx in [0, -1] {
                        let n = c.offset(dx, dy, dz);
                        if map.contains(n) {
                            affected.insert(n);
                        }
                    }
                }
            }
        }
        let mut changed = Vec::new();
        for c in affected {
            let Ok(block) = extract_mc_block(map, c) else { continue };
            if self.mc.get(&c) != Some(&block) {
                changed.push(c);
                self.mc.insert(c, block);
            }
        }
        changed
    }

    pub fn mc_blocks(&mut self) -> impl Iterator<Item = &McBlock> {
        self.refresh();
        self.mc.values()
    }

    pub fn digest(&mut self) -> StateDigest {
        self.refresh();
        mc_digest(self.mc.values())
    }

    /// Mesh in model coordinates (the first camera's frame).
    pub fn mesh(&mut self) -> Mesh {
        self.refresh();
        Mesh::from_blocks(self.mc.values(), self.rec.params.fusion.voxel_size)
    }

    /// Maps model coordinates to scene coordinates.
    pub fn model_to_scene(&self) -> Pose<f64> {
        self.origin.unwrap_or_else(Pose::identity)
    }

    /// Mesh in scene coordinates.
    pub fn scene_mesh(&mut self) -> Mesh {
        let mut m = self.mesh();
        let t = self.model_to_scene();
        for v in &mut m.vertices {
            v.position = t.transform_point(Vec3::from_array(v.position)).to_array();
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub codec: Codec,
    pub pipeline: PipelineParams<f64>,
    /// Relay server address; `None` starts one in this process.
    pub server: Option<String>,
    /// Frame index after which a second exploration client connects.
    pub late_join: Option<u64>,
    pub queue_cap: usize,
    /// Waits for each dynamic frame to reach the explorer before emitting the
    /// next, so that no latest-wins slot ever drops a packet.
    pub lockstep: bool,
    /// Emits frames at their capture timestamps instead of as fast as possible.
    pub realtime: bool,
    pub timeout: Duration,
    pub debug_dump: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pipeline = PipelineParams {
            pose_source: PoseSource::External,
            ..PipelineParams::default()
        };
        Self {
            codec: Codec::Default,
            pipeline,
            server: None,
            late_join: None,
            queue_cap: 1 << 14,
            lockstep: false,
            realtime: false,
            timeout: Duration::from_secs(60),
            debug_dump: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub reconstruction: String,
    /// Only known when the server runs in this process.
    pub server: Option<String>,
    pub explorer: String,
    pub late_joiner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sequence: String,
    pub frames: usize,
    pub codec: String,
    pub pose_source: String,
    pub fused_frames: usize,
    pub dynamic_pixels: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
    pub digests: Digests,
    /// Every exploration digest equals the reconstruction digest.
    pub equivalent: bool,
    pub metrics: MetricsReport,
    pub elapsed_s: f64,
}

pub struct RunOutput {
    pub report: RunReport,
    /// Final mesh in scene coordinates.
    pub mesh: Mesh,
    pub events: Vec<LogEvent>,
    pub explorer_state: ExplorationState,
    pub explorer_report: ExplorationReport,
    /// What the reconstruction client put on its socket.
    pub sent: SendReport,
    /// Per-connection counters of an in-process server.
    pub server_stats: Option<Vec<ConnectionStats>>,
}

impl RunOutput {
    /// Log events without wall-clock parts, in log order.
    pub fn metric_inputs(&self) -> Vec<String> {
        self.events.iter().filter_map(LogEvent::timeless).collect()
    }
}

pub const RECON: &str = "recon";
pub const EXPLORER: &str = "explore";
pub const LATE: &str = "explore-late";

/// Arrival and inbound traffic events of one exploration client.
pub fn explorer_events<'a>(source: &'a str, report: &'a ExplorationReport) -> impl Iterator<Item = LogEvent> + 'a {
    report.arrivals.iter().flat_map(move |a| {
        let traffic = LogEvent::Traffic {
            source: source.into(),
            record: TrafficRecord {
                timestamp_us: a.wall_us,
                direction: Direction::In,
                kind: a.kind,
                bytes: a.bytes,
            },
        };
        let arrive = a.frame.map(|(frame, _)| LogEvent::Arrive {
            source: source.into(),
            frame,
            t_us: a.wall_us,
        });
        arrive.into_iter().chain(std::iter::once(traffic))
    })
}

/// Streams `source` through reconstruction, relay and exploration and
/// reports digests and metrics.
pub fn run_end_to_end(mut source: FrameSource, config: &RunConfig) -> Result<RunOutput, HarnessError> {
    let started = Instant::now();
    let intr = source.intrinsics();
    let fusion = config.pipeline.fusion;
    let local_server = match &config.server {
        Some(_) => None,
        None => Some(spawn_server(ServerConfig {
            codec: config.codec,
            queue_cap: config.queue_cap,
            ..ServerConfig::default()
        })?),
    };
    let addr = match (&config.server, &local_server) {
        (Some(a), _) => a.clone(),
        (None, Some(s)) => s.local_addr().to_string(),
        (None, None) => unreachable!(),
    };
    info!("streaming `{}` ({} frames) via {addr}", source.name(), source.frames());

    let explorer = ExplorationClient::connect(addr.as_str(), config.codec, EXPLORER, None)?;
    let mut recon = ReconstructionClient::connect(addr.as_str(), config.codec, RECON, fusion.voxel_size, fusion.truncation, config.queue_cap)?;
    let mut late = None;
    let mut driver = ReconstructionDriver::new(intr, config.pipeline.clone());
    let mut events = Vec::new();
    let (mut frames, mut fused, mut dynamic_pixels) = (0usize, 0usize, 0usize);
    let mut first_ts: Option<(u64, Instant)> = None;

    while let Some(gt) = source.next_frame()? {
        if config.realtime {
            let (t0, wall0) = *first_ts.get_or_insert((gt.frame.timestamp_us, Instant::now()));
            let due = wall0 + Duration::from_micros(gt.frame.timestamp_us.saturating_sub(t0));
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let index = gt.frame.index;
        events.push(LogEvent::Emit {
            source: RECON.into(),
            frame: index,
            t_us: now_us(),
        });
        let step = driver.step(gt);
        frames += 1;
        fused += step.output.fused as usize;
        dynamic_pixels += step.output.scores.dynamic_pixel_count();
        if let Some(dir) = &config.debug_dump {
            dump_frame(dir, &step, config.pipeline.dynamics.tau)?;
        }
        let blocks = step.output.dirty.iter().filter_map(|c| driver.map().get(*c).cloned()).collect();
        recon.send_frame(&step.frame, &step.output.scores.dynamic_mask, step.output.pose(), &intr, blocks)?;
        if config.lockstep && !explorer.wait_for(config.timeout, |s| s.cloud.as_ref().is_some_and(|c| c.frame_index >= index)) {
            return Err(HarnessError::Run(format!("frame {index} did not reach the explorer in time")));
        }
        if config.late_join == Some(index) {
            late = Some(ExplorationClient::connect(addr.as_str(), config.codec, LATE, None)?);
        }
    }
    let recon_sync = recon.sync;
    let sent = recon.finish()?;
    let reconstruction = driver.digest();

    for (name, c) in std::iter::once((EXPLORER, &explorer)).chain(late.as_ref().map(|l| (LATE, l))) {
        // The end marker can overtake nothing: the server relays in order.
        if !c.wait_for_end(config.timeout) {
            return Err(HarnessError::Run(format!("{name} did not see the end of the stream")));
        }
    }
    let server_digest = local_server.as_ref().map(|s| {
        let deadline = Instant::now() + config.timeout;
        while !s.ended() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        s.mc_digest()
    });
    let server_stats = local_server.as_ref().map(|s| s.stats());
    let (state, report) = explorer.close();
    if let Some(e) = &report.error {
        return Err(HarnessError::Run(format!("explorer: {e}")));
    }
    let late_closed = late.map(ExplorationClient::close);
    if let Some(s) = local_server {
        s.shutdown();
    }

    let mut log = vec![
        LogEvent::Offset {
            source: RECON.into(),
            offset_us: recon_sync.offset_us,
        },
        LogEvent::Offset {
            source: EXPLORER.into(),
            offset_us: report.sync.offset_us,
        },
    ];
    log.append(&mut events);
    log.extend(sent.log.iter().map(|r| LogEvent::Traffic {
        source: RECON.into(),
        record: *r,
    }));
    log.extend(explorer_events(EXPLORER, &report));
    let mut late_digest = None;
    if let Some((late_state, late_report)) = &late_closed {
        log.push(LogEvent::Offset {
            source: LATE.into(),
            offset_us: late_report.sync.offset_us,
        });
        log.extend(explorer_events(LATE, late_report));
        late_digest = Some(late_state.mc_digest());
    }
    let metrics = compute_report(&log, Some(EXPLORER));

    let explorer_digest = state.mc_digest();
    let equivalent = explorer_digest == reconstruction && late_digest.is_none_or(|d| d == reconstruction);
    let mesh = driver.scene_mesh();
    let explorer_report = report;
    let report = RunReport {
        sequence: source.name().to_string(),
        frames,
        codec: format!("{:?}", config.codec).to_lowercase(),
        pose_source: format!("{:?}", config.pipeline.pose_source).to_lowercase(),
        fused_frames: fused,
        dynamic_pixels,
        mesh_vertices: mesh.vertices.len(),
        mesh_triangles: mesh.triangles.len(),
        digests: Digests {
            reconstruction: hex(&reconstruction),
            server: server_digest.map(|d| hex(&d)),
            explorer: hex(&explorer_digest),
            late_joiner: late_digest.map(|d| hex(&d)),
        },
        equivalent,
        metrics,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    if !equivalent {
        warn!("exploration state differs from the reconstruction");
    }
    Ok(RunOutput {
        report,
        mesh,
        events: log,
        explorer_state: state,
        explorer_report,
        sent,
        server_stats,
    })
}

/// Writes the score, mask and accumulation maps of one frame as PGM images.
pub fn dump_frame(dir: &Path, step: &Step, tau: f64) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let s = &step.output.scores;
    let k = step.output.index;
    write_pgm(&dir.join(format!("{k:05}_score.pgm")), &s.dynamicity.map(|v| (v / (2.0 * tau)).clamp(0.0, 1.0)))?;
    write_pgm(&dir.join(format!("{k:05}_mask.pgm")), &s.dynamic_mask.map(|m| if *m { 1.0 } else { 0.0 }))?;
    let peak = s.accumulated.as_slice().iter().copied().fold(0.0f64, f64::max).max(1e-9);
    write_pgm(&dir.join(format!("{k:05}_motion.pgm")), &s.accumulated.map(|v| v / peak))?;
    Ok(())
}

/// 8-bit binary PGM of values in `[0, 1]`.
pub fn write_pgm(path: &Path, img: &Grid<f64>) -> std::io::Result<()> {
    let (w, h) = img.dims();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()
}
