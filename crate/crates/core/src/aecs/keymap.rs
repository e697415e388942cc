use std::collections::BTreeMap;
use std::fmt;

use crate::channel::ServicePki;
use crate::crypto::{self, KEY_LEN};
use crate::substrate::Measurement;
use crate::wire::{Reader, Writer};

use super::AecsError;

const KEYMAP_MAGIC: &[u8; 4] = b"KMAP";
const BLOB_MAGIC: &[u8; 4] = b"KMv1";
const STORAGE_KEY_MAGIC: &[u8; 4] = b"SKv1";

/// The deployment-wide symmetric key that encrypts the persisted key map.
pub struct StorageKey {
    key: [u8; KEY_LEN],
    generation_id: u64,
}

impl StorageKey {
    pub(crate) fn generate(generation_id: u64) -> Self {
        StorageKey {
            key: crypto::random_bytes(),
            generation_id,
        }
    }

    pub fn generation_id(&self) -> u64 {
        self.generation_id
    }

    /// A one-way digest, safe to compare and log.
    pub fn fingerprint(&self) -> [u8; 32] {
        crypto::sha256(&[b"storage-key-fingerprint", &self.key])
    }

    pub fn appears_in(&self, haystack: &[u8]) -> bool {
        crypto::contains_any_window(haystack, &self.key, 8)
    }

    /// Inner form for sealing or encrypting to another AECS enclave.
    pub(crate) fn to_enclave_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(STORAGE_KEY_MAGIC).u64(self.generation_id).fixed(&self.key);
        w.into_inner()
    }

    pub(crate) fn from_enclave_bytes(bytes: &[u8]) -> Result<Self, AecsError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.fixed()?;
        if &magic != STORAGE_KEY_MAGIC {
            return Err(AecsError::Corrupt("storage key encoding"));
        }
        let generation_id = r.u64()?;
        let key = r.fixed()?;
        r.finish()?;
        Ok(StorageKey { key, generation_id })
    }

    fn secret(&self) -> &[u8; KEY_LEN] {
        &self.key
    }
}

impl fmt::Debug for StorageKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StorageKey")
            .field("generation_id", &self.generation_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct KeyMapEntry {
    pub measurement: Measurement,
    pub pki: ServicePki,
}

/// Services and their PKIs. `version` counts successful mutations.
#[derive(Debug, Clone, Default)]
pub struct KeyMap {
    pub version: u64,
    pub entries: BTreeMap<String, KeyMapEntry>,
}

impl KeyMap {
    fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(KEYMAP_MAGIC).u64(self.version).u32(self.entries.len() as u32);
        for (id, e) in &self.entries {
            w.str(id).fixed(&e.measurement.0).bytes(&e.pki.to_enclave_bytes());
        }
        w.into_inner()
    }

    fn decode(bytes: &[u8]) -> Result<Self, AecsError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.fixed()?;
        if &magic != KEYMAP_MAGIC {
            return Err(AecsError::Corrupt("key map encoding"));
        }
        let version = r.u64()?;
        let n = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n {
            let id = r.str()?.to_owned();
            let measurement = Measurement(r.fixed()?);
            let pki = ServicePki::read(&mut r).map_err(|_| AecsError::Corrupt("key map entry"))?;
            if entries.insert(id, KeyMapEntry { measurement, pki }).is_some() {
                return Err(AecsError::Corrupt("duplicate service id"));
            }
        }
        r.finish()?;
        Ok(KeyMap { version, entries })
    }

    /// Stored layout: `"KMv1" | generation_id:u64 | nonce[12] | ciphertext+tag`.
    /// The header is bound as associated data.
    pub fn encrypt(&self, key: &StorageKey) -> Vec<u8> {
        let nonce: [u8; crypto::AEAD_NONCE_LEN] = crypto::random_bytes();
        let mut header = Writer::new();
        header.fixed(BLOB_MAGIC).u64(key.generation_id).fixed(&nonce);
        let mut out = header.into_inner();
        let ct = crypto::aead_seal(key.secret(), nonce, &out, &self.encode());
        out.extend_from_slice(&ct);
        out
    }

    pub fn decrypt(blob: &[u8], key: &StorageKey) -> Result<Self, AecsError> {
        let header_len = 4 + 8 + crypto::AEAD_NONCE_LEN;
        let mut r = Reader::new(blob);
        let magic: [u8; 4] = r.fixed()?;
        let generation_id = r.u64()?;
        let nonce: [u8; crypto::AEAD_NONCE_LEN] = r.fixed()?;
        if &magic != BLOB_MAGIC {
            return Err(AecsError::Corrupt("key map blob"));
        }
        if generation_id != key.generation_id {
            return Err(AecsError::StaleGeneration);
        }
        let pt = crypto::aead_open(key.secret(), nonce, &blob[..header_len], r.rest())
            .map_err(|_| AecsError::Corrupt("key map authentication"))?;
        Self::decode(&pt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_pki, Validity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> KeyMap {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = KeyMap::default();
        for (i, id) in ["resnet", "mobilenet"].iter().enumerate() {
            m.entries.insert(
                id.to_string(),
                KeyMapEntry {
                    measurement: Measurement([i as u8; 32]),
                    pki: generate_pki(id, Validity::default(), &mut rng).unwrap(),
                },
            );
            m.version += 1;
        }
        m
    }

    #[test]
    fn encrypt_round_trip_hides_keys() {
        let key = StorageKey::generate(7);
        let m = sample();
        let blob = m.encrypt(&key);
        assert!(!key.appears_in(&blob));
        for e in m.entries.values() {
            assert!(!e.pki.private_key_appears_in(&blob));
        }
        let back = KeyMap::decrypt(&blob, &key).unwrap();
        assert_eq!(back.version, 2);
        for (id, e) in &m.entries {
            let b = &back.entries[id];
            assert_eq!(b.measurement, e.measurement);
            assert!(b.pki.same_key_as(&e.pki));
            assert_eq!(b.pki.certificate(), e.pki.certificate());
        }
    }

    #[test]
    fn wrong_key_or_tamper_rejected() {
        let key = StorageKey::generate(7);
        let blob = sample().encrypt(&key);
        assert!(matches!(
            KeyMap::decrypt(&blob, &StorageKey::generate(8)),
            Err(AecsError::StaleGeneration)
        ));
        assert!(KeyMap::decrypt(&blob, &StorageKey::generate(7)).is_err());
        for i in 0..blob.len() {
            let mut m = blob.clone();
            m[i] ^= 1;
            assert!(KeyMap::decrypt(&m, &key).is_err(), "flip at {i}");
        }
    }

    #[test]
    fn storage_key_enclave_bytes_round_trip() {
        let key = StorageKey::generate(42);
        let back = StorageKey::from_enclave_bytes(&key.to_enclave_bytes()).unwrap();
        assert_eq!(back.fingerprint(), key.fingerprint());
        assert_eq!(back.generation_id(), 42);
    }
}
