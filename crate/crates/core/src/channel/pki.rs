use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::RngCore;
use ring::signature::{self, Ed25519KeyPair, KeyPair};

use super::{Certificate, ChannelError, SIGNATURE_LEN};
use crate::crypto;
use crate::wire::{Reader, WireError, Writer};

static PRIVATE_KEY_EXPORTED: AtomicBool = AtomicBool::new(false);

/// True once any raw private-key bytes have left an enclave-boundary
/// operation in this process.
pub fn private_key_exported() -> bool {
    PRIVATE_KEY_EXPORTED.load(Ordering::SeqCst)
}

/// An Ed25519 signing key that is only usable through enclave-side
/// operations. It deliberately implements neither `Clone` via raw bytes nor
/// a revealing `Debug`.
pub struct ConfinedKey {
    seed: [u8; 32],
    pair: Ed25519KeyPair,
}

impl ConfinedKey {
    fn from_seed(seed: [u8; 32]) -> Self {
        let pair = Ed25519KeyPair::from_seed_unchecked(&seed).expect("32-byte ed25519 seed");
        ConfinedKey { seed, pair }
    }

    fn public_key(&self) -> [u8; 32] {
        let mut pk = [0u8; 32];
        pk.copy_from_slice(self.pair.public_key().as_ref());
        pk
    }

    fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        let mut sig = [0u8; SIGNATURE_LEN];
        sig.copy_from_slice(self.pair.sign(msg).as_ref());
        sig
    }
}

impl Clone for ConfinedKey {
    fn clone(&self) -> Self {
        ConfinedKey::from_seed(self.seed)
    }
}

impl fmt::Debug for ConfinedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ConfinedKey(<redacted>)")
    }
}

/// A service certificate together with its confined private key.
#[derive(Clone, Debug)]
pub struct ServicePki {
    certificate: Certificate,
    key: ConfinedKey,
}

/// Issue/expiry window for generated certificates, seconds since the epoch of
/// the deployment clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Validity {
    pub not_before: u64,
    pub not_after: u64,
}

impl Default for Validity {
    fn default() -> Self {
        Validity {
            not_before: 0,
            not_after: 24 * 3600,
        }
    }
}

pub fn generate_pki<R: RngCore + ?Sized>(
    subject: &str,
    validity: Validity,
    rng: &mut R,
) -> Result<ServicePki, ChannelError> {
    if subject.is_empty() {
        return Err(ChannelError::InvalidCertificate("empty subject"));
    }
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let key = ConfinedKey::from_seed(seed);
    let mut certificate = Certificate {
        subject: subject.to_owned(),
        public_key: key.public_key(),
        not_before: validity.not_before,
        not_after: validity.not_after,
        self_signature: [0u8; SIGNATURE_LEN],
    };
    certificate.self_signature = key.sign(&certificate.tbs_bytes());
    Ok(ServicePki { certificate, key })
}

impl ServicePki {
    pub fn certificate(&self) -> &Certificate {
        &self.certificate
    }

    pub(crate) fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_LEN] {
        self.key.sign(msg)
    }

    /// Serialized form for transfer between enclaves. Only called on paths
    /// that immediately encrypt the result for another enclave.
    pub(crate) fn to_enclave_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(&self.certificate.to_bytes()).fixed(&self.key.seed);
        w.into_inner()
    }

    pub(crate) fn from_enclave_bytes(bytes: &[u8]) -> Result<Self, ChannelError> {
        let mut r = Reader::new(bytes);
        let cert = Certificate::from_bytes(r.bytes()?)?;
        let seed: [u8; 32] = r.fixed()?;
        r.finish()?;
        let key = ConfinedKey::from_seed(seed);
        if key.public_key() != cert.public_key {
            return Err(ChannelError::InvalidCertificate("key does not match certificate"));
        }
        Ok(ServicePki { certificate: cert, key })
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, ChannelError> {
        Self::from_enclave_bytes(r.bytes()?)
    }

    /// Scans `haystack` for any 8-byte window of the private key without
    /// exposing the key.
    pub fn private_key_appears_in(&self, haystack: &[u8]) -> bool {
        crypto::contains_any_window(haystack, &self.key.seed, 8)
    }

    /// Same key material on both sides, compared inside the boundary.
    pub fn same_key_as(&self, other: &ServicePki) -> bool {
        self.key.seed == other.key.seed
    }

    /// Returns the raw private key. Marks the process as tainted; production
    /// paths never call this.
    pub fn export_private_key(&self) -> Vec<u8> {
        PRIVATE_KEY_EXPORTED.store(true, Ordering::SeqCst);
        self.key.seed.to_vec()
    }
}

pub(crate) fn verify_signature(public_key: &[u8; 32], msg: &[u8], sig: &[u8]) -> bool {
    signature::UnparsedPublicKey::new(&signature::ED25519, public_key)
        .verify(msg, sig)
        .is_ok()
}

impl From<WireError> for ChannelError {
    fn from(e: WireError) -> Self {
        ChannelError::Malformed(e)
    }
}
