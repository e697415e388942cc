use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use ring::hmac;

use super::{Measurement, Node, NodeId, SubstrateError};
use crate::wire::{Reader, WireError, Writer};

/// Simulated attestation evidence. The platform tag is an HMAC under the
/// node's attestation key, verifiable only through the [`PlatformRegistry`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveReport {
    pub measurement: Measurement,
    pub node_id: NodeId,
    pub report_data: [u8; 32],
    pub platform_tag: [u8; 32],
}

fn tag_input(measurement: &Measurement, node_id: &NodeId, report_data: &[u8; 32]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(b"enclave-report/v1");
    w.fixed(&measurement.0);
    w.str(node_id.as_str());
    w.fixed(report_data);
    w.into_inner()
}

pub(crate) fn sign_report(
    platform_key: &[u8; 32],
    measurement: Measurement,
    node_id: NodeId,
    report_data: [u8; 32],
) -> EnclaveReport {
    let key = hmac::Key::new(hmac::HMAC_SHA256, platform_key);
    let tag = hmac::sign(&key, &tag_input(&measurement, &node_id, &report_data));
    let mut platform_tag = [0u8; 32];
    platform_tag.copy_from_slice(tag.as_ref());
    EnclaveReport {
        measurement,
        node_id,
        report_data,
        platform_tag,
    }
}

impl EnclaveReport {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(&self.measurement.0);
        w.str(self.node_id.as_str());
        w.fixed(&self.report_data);
        w.fixed(&self.platform_tag);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let report = Self::read(&mut r)?;
        r.finish()?;
        Ok(report)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(EnclaveReport {
            measurement: Measurement(r.fixed()?),
            node_id: NodeId::new(r.str()?),
            report_data: r.fixed()?,
            platform_tag: r.fixed()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    InvalidTag,
    MeasurementMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttestationVerdict {
    Accept,
    Reject(RejectReason),
}

impl AttestationVerdict {
    pub fn is_accept(self) -> bool {
        self == AttestationVerdict::Accept
    }
}

/// Trusted map from platform identity to attestation key. Stands in for the
/// vendor's attestation service.
#[derive(Debug, Clone, Default)]
pub struct PlatformRegistry {
    keys: Arc<RwLock<HashMap<NodeId, [u8; 32]>>>,
}

impl PlatformRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, node: &Node) {
        self.keys
            .write()
            .expect("registry poisoned")
            .insert(node.id().clone(), node.spec().platform_attestation_key);
    }

    pub fn contains(&self, node_id: &NodeId) -> bool {
        self.keys.read().expect("registry poisoned").contains_key(node_id)
    }
}

/// Accepts iff the tag verifies under the registered platform key and the
/// measurement equals `expected`.
pub fn verify_report(
    report: &EnclaveReport,
    expected: &Measurement,
    registry: &PlatformRegistry,
) -> Result<AttestationVerdict, SubstrateError> {
    let key_bytes = registry
        .keys
        .read()
        .expect("registry poisoned")
        .get(&report.node_id)
        .copied()
        .ok_or_else(|| SubstrateError::UnknownPlatform(report.node_id.clone()))?;
    let key = hmac::Key::new(hmac::HMAC_SHA256, &key_bytes);
    let input = tag_input(&report.measurement, &report.node_id, &report.report_data);
    if hmac::verify(&key, &input, &report.platform_tag).is_err() {
        return Ok(AttestationVerdict::Reject(RejectReason::InvalidTag));
    }
    if &report.measurement != expected {
        return Ok(AttestationVerdict::Reject(RejectReason::MeasurementMismatch));
    }
    Ok(AttestationVerdict::Accept)
}
