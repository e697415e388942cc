use super::{Measurement, NodeId, SubstrateError};
use crate::crypto::{self, AEAD_NONCE_LEN, KEY_LEN, TAG_LEN};
use crate::wire::{Reader, Writer};

const BLOB_MAGIC: &[u8; 4] = b"SEAL";

/// Enclave data encrypted under a key derived from the node root sealing key
/// and the sealing enclave's measurement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub node_id: NodeId,
    pub measurement: Measurement,
    pub nonce: [u8; AEAD_NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub auth_tag: [u8; TAG_LEN],
}

fn seal_key(root: &[u8; 32], measurement: &Measurement) -> [u8; KEY_LEN] {
    let mut key = [0u8; KEY_LEN];
    crypto::hkdf_expand(b"enclave-serve/seal/v1", root, &[&measurement.0], &mut key);
    key
}

fn aad(node_id: &NodeId, measurement: &Measurement) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(node_id.as_str()).fixed(&measurement.0);
    w.into_inner()
}

pub(crate) fn seal(root: &[u8; 32], node_id: &NodeId, measurement: Measurement, plaintext: &[u8]) -> SealedBlob {
    // 96-bit random nonces: the seal key outlives node restarts, so a
    // counter could repeat.
    let nonce = crypto::random_bytes::<AEAD_NONCE_LEN>();
    let mut ct = crypto::aead_seal(
        &seal_key(root, &measurement),
        nonce,
        &aad(node_id, &measurement),
        plaintext,
    );
    let tag_start = ct.len() - TAG_LEN;
    let mut auth_tag = [0u8; TAG_LEN];
    auth_tag.copy_from_slice(&ct[tag_start..]);
    ct.truncate(tag_start);
    SealedBlob {
        node_id: node_id.clone(),
        measurement,
        nonce,
        ciphertext: ct,
        auth_tag,
    }
}

/// Decrypts with the caller's own node key and measurement, never with
/// whatever the blob header claims.
pub(crate) fn unseal(
    root: &[u8; 32],
    node_id: &NodeId,
    measurement: Measurement,
    blob: &SealedBlob,
) -> Result<Vec<u8>, SubstrateError> {
    if &blob.node_id != node_id || blob.measurement != measurement {
        return Err(SubstrateError::UnsealFailure);
    }
    let mut body = blob.ciphertext.clone();
    body.extend_from_slice(&blob.auth_tag);
    crypto::aead_open(
        &seal_key(root, &measurement),
        blob.nonce,
        &aad(node_id, &measurement),
        &body,
    )
    .map_err(|_| SubstrateError::UnsealFailure)
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(BLOB_MAGIC)
            .str(self.node_id.as_str())
            .fixed(&self.measurement.0)
            .fixed(&self.nonce)
            .bytes(&self.ciphertext)
            .fixed(&self.auth_tag);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SubstrateError> {
        let bad = |_| SubstrateError::MalformedBlob("sealed blob");
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.fixed().map_err(bad)?;
        if &magic != BLOB_MAGIC {
            return Err(SubstrateError::MalformedBlob("sealed blob magic"));
        }
        let blob = SealedBlob {
            node_id: NodeId::new(r.str().map_err(bad)?),
            measurement: Measurement(r.fixed().map_err(bad)?),
            nonce: r.fixed().map_err(bad)?,
            ciphertext: r.bytes().map_err(bad)?.to_vec(),
            auth_tag: r.fixed().map_err(bad)?,
        };
        r.finish().map_err(bad)?;
        Ok(blob)
    }
}

#[cfg(test)]
mod tests {
    use crate::clock::VirtualClock;
    use crate::substrate::{EnclaveSpec, Measurement, Node, NodeSpec, SealedBlob, SubstrateError};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn node(id: &str, seed: u64) -> Node {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Node::new(NodeSpec::generate(id, &mut rng), Arc::new(VirtualClock::new())).unwrap()
    }

    fn enclave(n: &Node, id: &str, code: &[u8]) -> crate::substrate::EnclaveHandle {
        n.launch_enclave(EnclaveSpec::new(id, Measurement::of_code(code), 1, 1, 0.0))
            .unwrap()
    }

    #[test]
    fn round_trip_same_enclave() {
        let n = node("a", 1);
        let e = enclave(&n, "e", b"code");
        let blob = e.seal(b"storage key").unwrap();
        let blob = SealedBlob::from_bytes(&blob.to_bytes()).unwrap();
        assert_eq!(e.unseal(&blob).unwrap(), b"storage key");
    }

    #[test]
    fn other_node_cannot_unseal() {
        let a = node("a", 1);
        let b = node("a", 2); // same name, different root key
        let blob = enclave(&a, "e", b"code").seal(b"x").unwrap();
        assert_eq!(
            enclave(&b, "e", b"code").unseal(&blob),
            Err(SubstrateError::UnsealFailure)
        );
    }

    #[test]
    fn other_measurement_cannot_unseal() {
        let a = node("a", 1);
        let blob = enclave(&a, "e1", b"code").seal(b"x").unwrap();
        assert_eq!(
            enclave(&a, "e2", b"evil").unseal(&blob),
            Err(SubstrateError::UnsealFailure)
        );
    }

    #[test]
    fn distinct_ciphertexts_and_tamper_detection() {
        let a = node("a", 1);
        let e = enclave(&a, "e", b"code");
        let b1 = e.seal(b"same").unwrap();
        let b2 = e.seal(b"same").unwrap();
        assert_ne!(b1.nonce, b2.nonce);
        assert_ne!(b1.ciphertext, b2.ciphertext);
        let bytes = b1.to_bytes();
        for i in 0..bytes.len() {
            let mut m = bytes.clone();
            m[i] ^= 0x01;
            if let Ok(blob) = SealedBlob::from_bytes(&m) {
                assert!(e.unseal(&blob).is_err(), "flip at {i} accepted");
            }
        }
    }
}
