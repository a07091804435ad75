//! A paced, human-in-the-loop simulation session and its WebSocket server.
//!
//! The simulation loop owns the world. The network side only exchanges
//! [`protocol`] messages with it through channels.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMsg, ServerMsg, PROTOCOL_VERSION};
pub use server::{Server, ServerHandle};
pub use session::{RecordedRun, Session, SessionConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("session busy: a run is already active")]
    Busy,
    #[error("no active run")]
    NoActiveRun,
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Core(#[from] mixedlane_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
