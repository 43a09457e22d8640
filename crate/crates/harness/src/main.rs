use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dynfuse::metrics::{compute_report, parse_log, LogEvent};
use dynfuse::run::{explorer_events, run_end_to_end, FrameSource, RunConfig, EXPLORER};
use dynfuse::scene::{builtin, SceneScript, BUILTIN};
use dynfuse::record_script;
use dynfuse_core::PoseSource;
use dynfuse_stream::gateway::{spawn_gateway, GatewayHub};
use dynfuse_stream::{spawn_server, Codec, ExplorationClient, ServerConfig};

#[derive(Parser)]
#[command(name = "dynfuse", version, about = "Dynamic-aware RGB-D fusion with live scene streaming")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoseArg {
    /// Ground-truth poses from the sequence.
    Gt,
    /// Poses tracked by ICP.
    Icp,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lists the bundled scene scripts.
    List,
    /// Renders a scene script into a sequence container.
    Gen {
        /// Bundled script name or a JSON script file.
        script: String,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        /// Depth noise standard deviation at 1 m, meters.
        #[arg(long)]
        depth_noise: Option<f64>,
        #[arg(long)]
        uncompressed: bool,
        /// Prints the script as JSON instead of rendering it.
        #[arg(long)]
        dump_script: bool,
    },
    /// Streams a sequence through reconstruction, relay and a headless explorer.
    Run {
        #[arg(long, conflicts_with = "script", required_unless_present = "script")]
        seq: Option<PathBuf>,
        /// Bundled script name or a JSON script file, rendered on the fly.
        #[arg(long)]
        script: Option<String>,
        #[arg(long)]
        frames: Option<usize>,
        /// Relay server address; starts one in-process when omitted.
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Final mesh as ASCII PLY.
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Merged event log of all processes.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        codec: Codec,
        /// Connects a second explorer after this frame index.
        #[arg(long)]
        late_join: Option<u64>,
        #[arg(long, value_enum, default_value = "gt")]
        pose: PoseArg,
        /// Writes per-frame score, mask and motion images here.
        #[arg(long)]
        debug_dump: Option<PathBuf>,
        #[arg(long)]
        lockstep: bool,
        #[arg(long)]
        realtime: bool,
        #[arg(long, default_value_t = 60)]
        timeout_s: u64,
    },
    /// Computes latency, FPS and bandwidth from event logs.
    Metrics {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Source name of the exploration client to evaluate.
        #[arg(long)]
        explorer: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Runs a relay server until interrupted.
    Serve {
        #[arg(long, default_value = "0.0.0.0:7878")]
        listen: String,
        #[arg(long, default_value = "default")]
        codec: Codec,
        #[arg(long, default_value_t = 16)]
        max_clients: usize,
    },
    /// Runs a headless exploration client until the stream ends.
    Explore {
        #[arg(long)]
        server: String,
        #[arg(long, default_value = "default")]
        codec: Codec,
        #[arg(long, default_value = EXPLORER)]
        name: String,
        /// Event log for `dynfuse metrics`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Serves a WebSocket viewer gateway on this address.
        #[arg(long)]
        gateway: Option<String>,
        #[arg(long, default_value_t = 3600)]
        timeout_s: u64,
    },
}

fn load_script(arg: &str, frames: Option<usize>, noise: Option<f64>) -> Result<SceneScript> {
    let mut s = if Path::new(arg).is_file() {
        let text = std::fs::read_to_string(arg).with_context(|| format!("reading {arg}"))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {arg}"))?
    } else {
        builtin(arg)?
    };
    if let Some(n) = frames {
        s = s.truncated(n);
    }
    if let Some(n) = noise {
        s.depth_noise = n;
    }
    s.validate()?;
    Ok(s)
}

fn write_lines<'a>(path: &Path, events: impl IntoIterator<Item = &'a LogEvent>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for e in events {
        writeln!(out, "{e}")?;
    }
    out.flush()?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::List => {
            for name in BUILTIN {
                let s = builtin(name)?;
                println!("{:<18} {}  {:>4} frames  {}", name, s.category.tag(), s.frames, s.description);
            }
        }
        Cmd::Gen {
            script,
            output,
            frames,
            depth_noise,
            uncompressed,
            dump_script,
        } => {
            let s = load_script(&script, frames, depth_noise)?;
            if dump_script {
                println!("{}", serde_json::to_string_pretty(&s)?);
                return Ok(());
            }
            let out = BufWriter::new(File::create(&output).with_context(|| format!("creating {}", output.display()))?);
            record_script(&s, !uncompressed, out)?;
            println!("wrote {} frames of `{}` to {}", s.frames, s.name, output.display());
        }
        Cmd::Run {
            seq,
            script,
            frames,
            server,
            report,
            mesh,
            log,
            codec,
            late_join,
            pose,
            debug_dump,
            lockstep,
            realtime,
            timeout_s,
        } => {
            let source = match (seq, script) {
                (Some(p), _) => FrameSource::open(&p).with_context(|| format!("opening {}", p.display()))?,
                (None, Some(s)) => FrameSource::script(&load_script(&s, frames, None)?)?,
                (None, None) => bail!("either --seq or --script is required"),
            };
            let mut config = RunConfig {
                codec,
                server,
                late_join,
                lockstep,
                realtime,
                debug_dump,
                timeout: Duration::from_secs(timeout_s),
                ..RunConfig::default()
            };
            config.pipeline.pose_source = match pose {
                PoseArg::Gt => PoseSource::External,
                PoseArg::Icp => PoseSource::Icp,
            };
            let out = run_end_to_end(source, &config)?;
            println!("{}", out.report.metrics);
            println!("mesh      {} vertices, {} triangles", out.report.mesh_vertices, out.report.mesh_triangles);
            println!("digest    {}", out.report.digests.reconstruction);
            if let Some(p) = &report {
                std::fs::write(p, serde_json::to_string_pretty(&out.report)?)?;
            }
            if let Some(p) = &mesh {
                std::fs::write(p, out.mesh.to_ply())?;
            }
            if let Some(p) = &log {
                write_lines(p, &out.events)?;
            }
            if !out.report.equivalent {
                bail!("exploration digest differs from the reconstruction digest");
            }
        }
        Cmd::Metrics { logs, explorer, json } => {
            let mut events = Vec::new();
            for p in &logs {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                events.extend(parse_log(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?);
            }
            let r = compute_report(&events, explorer.as_deref());
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("{r}");
            }
        }
        Cmd::Serve { listen, codec, max_clients } => {
            let server = spawn_server(ServerConfig {
                listen,
                codec,
                max_clients,
                ..ServerConfig::default()
            })?;
            println!("listening on {}", server.local_addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Explore {
            server,
            codec,
            name,
            log,
            mesh,
            gateway,
            timeout_s,
        } => {
            let hub = gateway.as_ref().map(|_| GatewayHub::new(1024));
            let client = ExplorationClient::connect(server.as_str(), codec, &name, hub.clone())?;
            let _gw = match (&gateway, hub) {
                (Some(addr), Some(hub)) => Some(spawn_gateway(addr, client.cell(), hub)?),
                _ => None,
            };
            if !client.wait_for_end(Duration::from_secs(timeout_s)) {
                log::warn!("stream did not end within {timeout_s} s");
            }
            let (state, report) = client.close();
            println!("blocks    {}", state.blocks.len());
            println!("triangles {}", state.triangle_count());
            println!("digest    {}", dynfuse_stream::exploration::hex(&state.mc_digest()));
            if let Some(p) = &mesh {
                std::fs::write(p, state.mesh().to_ply())?;
            }
            if let Some(p) = &log {
                let mut events = vec![LogEvent::Offset {
                    source: name.clone(),
                    offset_us: report.sync.offset_us,
                }];
                events.extend(explorer_events(&name, &report));
                write_lines(p, &events)?;
            }
            if let Some(e) = report.error {
                bail!("stream error: {e}");
            }
        }
    }
    Ok(())
}
