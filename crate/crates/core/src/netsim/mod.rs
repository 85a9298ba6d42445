//! Transport: the framed message protocol, a deterministic in-process
//! simulator and a TCP backend. Roles are written once against [`Role`] and
//! [`Context`] and run unchanged on either backend.

pub mod frame;
mod message;
mod sim;
mod tcp;

pub use frame::{
    decode_frame, encode_frame, read_frame, split_frame, write_frame, FrameError, MsgType,
    MAX_FRAME_LEN, MAX_PAYLOAD_LEN,
};
pub use message::{
    BaselineValidateReq, BaselineValidateResp, CaptureSubmit, DecisionMsg, EnrollReq, EnrollResp,
    LocationFixMsg, Message, MessageError, PayIntent, PaymentSubmit, ProvisionReq, ProvisionResp,
    TokenSubmit, TxnRegister,
};
pub use sim::{Envelope, LinkFaults, SimChannel, SimError, Simulator, TraceEntry, TraceEvent};
pub use tcp::{TcpChannel, TcpNode, TcpNodeHandle};

use std::any::Any;

use thiserror::Error;

/// What a role can do while handling an event.
pub trait Context {
    /// Transport clock in milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
    fn send(&mut self, to: &str, msg: Message);
    fn set_timer(&mut self, delay_ms: u64, timer_id: u64);
}

/// A protocol participant. Handlers run one at a time per role.
pub trait Role: Send + 'static {
    fn on_message(&mut self, ctx: &mut dyn Context, from: &str, msg: Message);

    fn on_timer(&mut self, _ctx: &mut dyn Context, _timer_id: u64) {}

    /// Persistable state, if the role has any.
    fn state_json(&self) -> Option<serde_json::Value> {
        None
    }

    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("no reply from {to} within {waited_ms} ms")]
    Timeout { to: String, waited_ms: u64 },
    #[error("cannot reach {to}: {detail}")]
    Unreachable { to: String, detail: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl TransportError {
    /// Transport failures are worth retrying; protocol errors are not.
    pub fn is_retryable(&self) -> bool {
        !matches!(self, TransportError::Protocol(_))
    }
}

/// Blocking request/response, used by the wallet and CLI.
pub trait RequestChannel {
    fn request(&mut self, to: &str, msg: Message) -> Result<Message, TransportError>;
}
