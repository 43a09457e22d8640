//! Synthetic scenes with ground truth, a recorded-sequence container,
//! end-to-end runs over the streaming stack, and the pipeline metrics.

pub mod container;
pub mod metrics;
pub mod providers;
pub mod render;
pub mod run;
pub mod scene;

use thiserror::Error;

pub use container::{record_script, ContainerError, SequenceHeader, SequenceReader, SequenceWriter};
pub use metrics::{compute_report, parse_log, LogEvent, MetricsReport, Stat};
pub use providers::{GtFlow, GtSegmentation};
pub use render::{render_frame, GroundTruthFrame, Renderer};
pub use run::{run_end_to_end, FrameSource, ReconstructionDriver, RunConfig, RunOutput, RunReport};
pub use scene::{builtin, SceneScript, ScriptError, BUILTIN};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Client(#[from] dynfuse_stream::ClientError),
    #[error(transparent)]
    Protocol(#[from] dynfuse_stream::ProtocolError),
    #[error(transparent)]
    Geometry(#[from] dynfuse_core::GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Run(String),
}
