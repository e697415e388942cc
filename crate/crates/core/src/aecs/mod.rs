//! Attestation-based Enclave Configuration Service.
//!
//! Generates one PKI per inference service, releases it only to enclaves
//! whose report matches the registered measurement, and keeps the service
//! map encrypted under a storage key in untrusted storage. Replicas agree on
//! the storage key through a create-if-absent leader marker, local sealing,
//! and attested fetches from running peers.

mod keymap;
mod replica;
mod rpc;
mod store;

pub use keymap::{KeyMap, KeyMapEntry, StorageKey};
pub use replica::{bootstrap, AecsReplica, BootstrapPath, KEYMAP_OBJECT, LEADER_OBJECT};
pub use rpc::{
    handle_frame, serve_connection, AecsClient, AecsDirectory, AecsRequest, Loopback, RpcChannel, StreamChannel,
    WireCapture,
};
pub use store::{dump, DirStore, MemoryStore, StoreError, UntrustedStore};

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::channel::{ServicePki, Validity};
use crate::crypto::{self, TempKeyPair};
use crate::substrate::{EnclaveHandle, EnclaveReport, Measurement, PlatformRegistry, SubstrateError};
use crate::wire::WireError;

/// Code identity of the AECS server enclave.
pub fn aecs_measurement() -> Measurement {
    Measurement::of_code(b"aecs-server")
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AecsError {
    #[error("service already exists")]
    ServiceExists,
    #[error("unknown service")]
    UnknownService,
    #[error("store conflicts persisted after all retries")]
    StoreConflictExhausted,
    #[error("attestation report rejected")]
    AttestationMismatch,
    #[error("report data does not bind the supplied public key")]
    BindingMismatch,
    #[error("no storage key source became available")]
    BootstrapTimeout,
    #[error("local sealed key could not be unsealed")]
    UnsealFailure,
    #[error("storage key generation does not match the deployment")]
    StaleGeneration,
    #[error("no AECS replica is serving")]
    Unavailable,
    #[error("corrupt data: {0}")]
    Corrupt(&'static str),
    #[error("malformed message: {0}")]
    Malformed(WireError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error("remote error: {0}")]
    Remote(String),
}

impl From<WireError> for AecsError {
    fn from(e: WireError) -> Self {
        AecsError::Malformed(e)
    }
}

#[derive(Debug, Clone)]
pub struct AecsConfig {
    /// Expected measurement of peer AECS replicas fetching the storage key.
    pub measurement: Measurement,
    pub registry: PlatformRegistry,
    pub cas_attempts: u32,
    pub backoff_base: Duration,
    /// How long a non-leader keeps polling peers for the storage key.
    pub fetch_attempts: u32,
    pub fetch_interval: Duration,
    pub validity: Validity,
}

impl AecsConfig {
    pub fn new(registry: PlatformRegistry) -> Self {
        AecsConfig {
            measurement: aecs_measurement(),
            registry,
            cas_attempts: 8,
            backoff_base: Duration::from_millis(1),
            fetch_attempts: 400,
            fetch_interval: Duration::from_millis(5),
            validity: Validity::default(),
        }
    }
}

/// Deployment-wide counters.
#[derive(Debug, Default)]
pub struct AecsStats {
    pub key_generations: AtomicU64,
    pub ra_fetches: AtomicU64,
    pub unseal_recoveries: AtomicU64,
    pub cas_conflicts: AtomicU64,
}

impl AecsStats {
    pub fn key_generations(&self) -> u64 {
        self.key_generations.load(Ordering::SeqCst)
    }

    pub fn ra_fetches(&self) -> u64 {
        self.ra_fetches.load(Ordering::SeqCst)
    }

    pub fn unseal_recoveries(&self) -> u64 {
        self.unseal_recoveries.load(Ordering::SeqCst)
    }

    pub fn cas_conflicts(&self) -> u64 {
        self.cas_conflicts.load(Ordering::SeqCst)
    }
}

/// Node-local persistent slot for the sealed storage key.
#[derive(Debug, Clone)]
pub enum LocalDisk {
    Memory(Arc<Mutex<Option<Vec<u8>>>>),
    Path(PathBuf),
}

impl LocalDisk {
    pub fn memory() -> Self {
        LocalDisk::Memory(Arc::default())
    }

    pub fn load(&self) -> Option<Vec<u8>> {
        match self {
            LocalDisk::Memory(m) => m.lock().expect("disk poisoned").clone(),
            LocalDisk::Path(p) => fs::read(p).ok(),
        }
    }

    pub fn store(&self, bytes: &[u8]) -> Result<(), StoreError> {
        match self {
            LocalDisk::Memory(m) => {
                *m.lock().expect("disk poisoned") = Some(bytes.to_vec());
                Ok(())
            }
            LocalDisk::Path(p) => {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir)?;
                }
                fs::write(p, bytes)?;
                Ok(())
            }
        }
    }

    pub fn clear(&self) {
        match self {
            LocalDisk::Memory(m) => *m.lock().expect("disk poisoned") = None,
            LocalDisk::Path(p) => {
                let _ = fs::remove_file(p);
            }
        }
    }
}

/// Digest that an enclave report must carry to bind `public_key`.
pub fn binding_digest(public_key: &[u8; 32]) -> [u8; 32] {
    crypto::sha256(&[public_key])
}

/// Asks AECS to release a service's PKI to the attested enclave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProvisionRequest {
    pub service_id: String,
    pub report: EnclaveReport,
    pub temp_public_key: [u8; 32],
}

/// Asks a running AECS replica for the storage key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchKeyRequest {
    pub report: EnclaveReport,
    pub temp_public_key: [u8; 32],
}

pub(crate) fn provision_context(service_id: &str) -> Vec<u8> {
    [b"aecs/provision/".as_slice(), service_id.as_bytes()].concat()
}

pub(crate) const STORAGE_KEY_CONTEXT: &[u8] = b"aecs/storage-key";

/// Enclave-side half of provisioning: a fresh temporary key pair and a
/// request whose report binds it.
pub fn provision_request(
    enclave: &EnclaveHandle,
    service_id: &str,
) -> Result<(TempKeyPair, ProvisionRequest), SubstrateError> {
    let temp = TempKeyPair::generate();
    let report = enclave.create_report(binding_digest(&temp.public_key()))?;
    let req = ProvisionRequest {
        service_id: service_id.to_owned(),
        report,
        temp_public_key: temp.public_key(),
    };
    Ok((temp, req))
}

/// Decrypts a provisioning response inside the requesting enclave.
pub fn open_provisioned_pki(temp: TempKeyPair, service_id: &str, ciphertext: &[u8]) -> Result<ServicePki, AecsError> {
    let bytes = temp
        .open(&provision_context(service_id), ciphertext)
        .map_err(|_| AecsError::Corrupt("provisioning ciphertext"))?;
    ServicePki::from_enclave_bytes(&bytes).map_err(|_| AecsError::Corrupt("provisioned pki"))
}

/// Source of the storage key for replicas that did not generate it.
pub trait KeySource: Send + Sync {
    fn fetch_storage_key(&self, req: &FetchKeyRequest) -> Result<Vec<u8>, AecsError>;
}
