//! Live correction over the network.
//!
//! Clients send `config`, `note_on`, `note_off` and `reset` messages and get
//! a `decision` for every `note_on`, an `ack` for `config` and `reset`, and an
//! `error` for anything malformed. Each connection owns an independent engine
//! session; the model is shared.

pub mod connection;
pub mod protocol;
pub mod server;

pub use connection::{Connection, WIRE_TICKS_PER_BEAT};
pub use protocol::{parse_client, ClientMessage, ErrorCode, ServerMessage};
pub use server::{Server, ServerOptions, ServiceError, Transport};
