//! Client/server delivery over a length-prefixed message protocol.
//!
//! The client asks for a model at a low bitwidth, starts serving it as soon
//! as it is decoded, then asks for the update that lifts it to the server's
//! 32-bit reference. The update request names the exact base bitstream by
//! checksum, and the server refuses it if that is not its current encoding.

mod client;
mod server;
pub mod wire;

use thiserror::Error;

pub use client::{
    fetch_progressive, list_models, ClientSession, FetchOptions, FetchOutcome, Phase, PhaseFailure,
    Precision, ServedModel, SessionState, TriggerPolicy,
};
pub use server::{serve, serve_listener, spawn, ServerHandle, ServerRepository};
pub use wire::{ErrorCode, Message, RemoteError, Served, WireError};

use crate::codec::CodecError;
use crate::evalnet::EvalError;
use crate::update::UpdateError;

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("server refused: {} ({:?})", .0.message, .0.code)]
    Remote(RemoteError),
    #[error("server closed the connection without replying")]
    ConnectionClosed,
    #[error("server sent a reply that does not answer the request")]
    UnexpectedReply,
    #[error("cannot {action} in state {state:?}")]
    InvalidState {
        state: SessionState,
        action: &'static str,
    },
    #[error("no model to serve in state {0:?}")]
    NotReady(SessionState),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
