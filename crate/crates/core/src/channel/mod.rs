//! Server-authenticated encrypted sessions keyed by AECS-issued PKIs.
//!
//! Handshake (all messages are [`crate::wire`] frames):
//!
//! ```text
//! client                                   server
//!   ClientHello  {random[32], x25519[32]}  ->
//!             <-  ServerHello {random[32], x25519[32], cert, sig[64]}
//!   ClientFinished {hmac[32]}              ->
//! ```
//!
//! `sig` is the certificate key's Ed25519 signature over the SHA-256 of the
//! ClientHello frame and the ServerHello frame up to the signature. Traffic
//! keys come from HKDF over the X25519 secret salted with the full transcript
//! hash. Records carry an explicit sequence number that is also the AEAD
//! nonce counter and part of the associated data.

mod cert;
mod handshake;
mod pki;
mod record;
mod transport;

pub use cert::Certificate;
pub use handshake::{client_handshake, server_handshake, ClientHandshake, PendingServer, ServerHandshake};
pub(crate) use pki::verify_signature;
pub use pki::{generate_pki, private_key_exported, ConfinedKey, ServicePki, Validity};
pub use record::{Record, Session};
pub use transport::{memory_pair, MemoryTransport, TcpTransport, Transport, TransportError};

use crate::wire::WireError;

pub const SIGNATURE_LEN: usize = 64;

pub mod kind {
    pub const CLIENT_HELLO: u8 = 0x01;
    pub const SERVER_HELLO: u8 = 0x02;
    pub const CLIENT_FINISHED: u8 = 0x03;
    pub const RECORD: u8 = 0x04;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChannelError {
    #[error("server certificate does not match the expected certificate")]
    CertificateMismatch,
    #[error("transcript signature invalid")]
    SignatureInvalid,
    #[error("client finished MAC invalid")]
    FinishedInvalid,
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("record failed authentication")]
    RecordTampered,
    #[error("record sequence number replayed or out of order")]
    ReplayDetected,
    #[error("invalid certificate: {0}")]
    InvalidCertificate(&'static str),
    #[error("malformed message: {0}")]
    Malformed(WireError),
    #[error("key agreement failed")]
    KeyAgreement,
    #[error("transport: {0}")]
    Transport(String),
}

impl From<TransportError> for ChannelError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Timeout => ChannelError::HandshakeTimeout,
            other => ChannelError::Transport(other.to_string()),
        }
    }
}
