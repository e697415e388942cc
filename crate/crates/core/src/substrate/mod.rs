//! Simulated SGX platform.
//!
//! Each [`Node`] is the single authority over its enclaves: launches,
//! terminations and paging-counter integration are serialized behind one
//! lock, while readers get consistent snapshots. EPC over-commitment is never
//! an error; overflow turns into paging throughput, which in turn inflates
//! request latency through a [`LatencyModel`].

mod attest;
mod models;
mod node;
mod seal;
mod snapshot;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use attest::{verify_report, AttestationVerdict, EnclaveReport, PlatformRegistry, RejectReason};
pub use models::{
    compute_paging_throughput, inflate_latency, LatencyModel, LinearInflation, PagingModel, ProportionalOverflow,
};
pub use node::{EnclaveHandle, Node, NodePagingState};
pub use seal::SealedBlob;
pub use snapshot::{parse_snapshot, EpcSnapshot, SnapshotEnclave};

pub const MIB: u64 = 1 << 20;
pub const PAGE_SIZE: u64 = 4096;
/// Usable EPC on a 128 MiB SGX1 part once enclave metadata is reserved.
pub const DEFAULT_EPC_USABLE_BYTES: u64 = 93 * MIB;
/// Full-thrash reference paging throughput, pages per second.
pub const DEFAULT_PAGING_REF: f64 = 1.0e4;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum SubstrateError {
    #[error("enclave {0} already exists on this node")]
    DuplicateEnclave(EnclaveId),
    #[error("enclave {0} is not running")]
    EnclaveNotRunning(EnclaveId),
    #[error("platform {0} is not in the attestation registry")]
    UnknownPlatform(NodeId),
    #[error("unseal failed")]
    UnsealFailure,
    #[error("invalid enclave spec: {0}")]
    InvalidEnclaveSpec(String),
    #[error("invalid node spec: {0}")]
    InvalidNodeSpec(String),
    #[error("malformed snapshot: {0}")]
    MalformedSnapshot(String),
    #[error("malformed blob: {0}")]
    MalformedBlob(&'static str),
    #[error("node {0} unreachable")]
    NodeUnreachable(NodeId),
}

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }

            /// Identifiers appear in whitespace-separated text formats.
            pub fn is_well_formed(&self) -> bool {
                !self.0.is_empty() && !self.0.chars().any(char::is_whitespace)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(NodeId);
string_id!(EnclaveId);

/// Code identity of an enclave (a SHA-256 digest).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn of_code(code: &[u8]) -> Self {
        Measurement(crate::crypto::sha256(&[b"enclave-code", code]))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Measurement(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({}..)", &self.to_hex()[..12])
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Static description of a platform. The two secrets never leave the
/// substrate except through the attestation registry (the stand-in for the
/// vendor attestation service).
#[derive(Clone)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub epc_usable_bytes: u64,
    pub cpu_cores: u32,
    /// Paging throughput at which the default latency model reaches 5x.
    pub paging_ref: f64,
    pub(crate) root_seal_key: [u8; 32],
    pub(crate) platform_attestation_key: [u8; 32],
}

impl NodeSpec {
    /// A node with fresh secrets drawn from `rng`.
    pub fn generate<R: rand::Rng + ?Sized>(node_id: impl Into<NodeId>, rng: &mut R) -> Self {
        let mut root_seal_key = [0u8; 32];
        let mut platform_attestation_key = [0u8; 32];
        rng.fill(&mut root_seal_key);
        rng.fill(&mut platform_attestation_key);
        NodeSpec {
            node_id: node_id.into(),
            epc_usable_bytes: DEFAULT_EPC_USABLE_BYTES,
            cpu_cores: 8,
            paging_ref: DEFAULT_PAGING_REF,
            root_seal_key,
            platform_attestation_key,
        }
    }

    pub fn with_epc(mut self, bytes: u64) -> Self {
        self.epc_usable_bytes = bytes;
        self
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cpu_cores = cores;
        self
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        if !self.node_id.is_well_formed() {
            return Err(SubstrateError::InvalidNodeSpec("node id".into()));
        }
        if self.epc_usable_bytes == 0 {
            return Err(SubstrateError::InvalidNodeSpec("epc_usable_bytes must be > 0".into()));
        }
        if self.cpu_cores == 0 {
            return Err(SubstrateError::InvalidNodeSpec("cpu_cores must be >= 1".into()));
        }
        if self.paging_ref.is_nan() || self.paging_ref <= 0.0 {
            return Err(SubstrateError::InvalidNodeSpec("paging_ref must be > 0".into()));
        }
        Ok(())
    }
}

impl fmt::Debug for NodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NodeSpec")
            .field("node_id", &self.node_id)
            .field("epc_usable_bytes", &self.epc_usable_bytes)
            .field("cpu_cores", &self.cpu_cores)
            .field("paging_ref", &self.paging_ref)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnclaveSpec {
    pub enclave_id: EnclaveId,
    pub measurement: Measurement,
    /// Fixed at launch; may exceed the usable EPC.
    pub requested_epc_bytes: u64,
    pub working_set_bytes: u64,
    /// Pages per second the enclave touches across its working set.
    pub page_access_rate: f64,
    /// Platform enclaves (launch, quoting) are never treated as interference.
    pub system_enclave: bool,
}

impl EnclaveSpec {
    pub fn new(
        enclave_id: impl Into<EnclaveId>,
        measurement: Measurement,
        requested_epc_bytes: u64,
        working_set_bytes: u64,
        page_access_rate: f64,
    ) -> Self {
        EnclaveSpec {
            enclave_id: enclave_id.into(),
            measurement,
            requested_epc_bytes,
            working_set_bytes,
            page_access_rate,
            system_enclave: false,
        }
    }

    pub fn system(mut self) -> Self {
        self.system_enclave = true;
        self
    }

    pub fn validate(&self) -> Result<(), SubstrateError> {
        if !self.enclave_id.is_well_formed() {
            return Err(SubstrateError::InvalidEnclaveSpec(format!(
                "enclave id {:?} must be non-empty without whitespace",
                self.enclave_id.as_str()
            )));
        }
        if self.working_set_bytes > self.requested_epc_bytes {
            return Err(SubstrateError::InvalidEnclaveSpec(
                "working set exceeds requested EPC".into(),
            ));
        }
        if !self.page_access_rate.is_finite() || self.page_access_rate < 0.0 {
            return Err(SubstrateError::InvalidEnclaveSpec("page_access_rate".into()));
        }
        Ok(())
    }
}
