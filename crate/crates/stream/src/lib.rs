//! Streaming for the dynamic-aware fusion pipeline: the framed wire protocol,
//! the relay server with its Marching Cubes replica, reconstruction and
//! exploration clients, clock synchronization and the viewer gateway.

pub mod client;
pub mod exploration;
pub mod gateway;
pub mod payload;
pub mod protocol;
pub mod queue;
pub mod server;
pub mod timesync;
pub mod traffic;
pub mod wire;

pub use client::{ClientError, ExplorationClient, ExplorationReport, ReconstructionClient, SendReport};
pub use exploration::{ExplorationState, StateDigest};
pub use payload::Message;
pub use protocol::{Codec, PacketType, ProtocolError};
pub use server::{spawn_server, ServerConfig, ServerHandle};
