//! Thin helpers over `ring` shared by the substrate, the secure channel and AECS.

use ring::aead::{self, Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305, NONCE_LEN};
use ring::agreement::{self, EphemeralPrivateKey, UnparsedPublicKey, X25519};
use ring::digest;
use ring::hkdf;
use ring::rand::{SecureRandom, SystemRandom};

pub const KEY_LEN: usize = 32;
pub const TAG_LEN: usize = 16;
pub const PUBLIC_KEY_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cryptographic operation failed")]
pub struct CryptoError;

impl From<ring::error::Unspecified> for CryptoError {
    fn from(_: ring::error::Unspecified) -> Self {
        CryptoError
    }
}

pub fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut ctx = digest::Context::new(&digest::SHA256);
    for p in parts {
        ctx.update(p);
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(ctx.finish().as_ref());
    out
}

pub fn random_bytes<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    SystemRandom::new()
        .fill(&mut out)
        .expect("system randomness unavailable");
    out
}

struct OutLen(usize);

impl hkdf::KeyType for OutLen {
    fn len(&self) -> usize {
        self.0
    }
}

/// HKDF-SHA256 extract-and-expand into `out`.
pub fn hkdf_expand(salt: &[u8], ikm: &[u8], info: &[&[u8]], out: &mut [u8]) {
    let prk = hkdf::Salt::new(hkdf::HKDF_SHA256, salt).extract(ikm);
    prk.expand(info, OutLen(out.len()))
        .and_then(|okm| okm.fill(out))
        .expect("hkdf output length within bounds");
}

fn aead_key(key: &[u8; KEY_LEN]) -> LessSafeKey {
    LessSafeKey::new(UnboundKey::new(&CHACHA20_POLY1305, key).expect("32-byte key"))
}

/// ChaCha20-Poly1305 seal; returns ciphertext with the tag appended.
pub fn aead_seal(key: &[u8; KEY_LEN], nonce: [u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let mut buf = plaintext.to_vec();
    aead_key(key)
        .seal_in_place_append_tag(Nonce::assume_unique_for_key(nonce), Aad::from(aad), &mut buf)
        .expect("chacha20poly1305 seal");
    buf
}

pub fn aead_open(
    key: &[u8; KEY_LEN],
    nonce: [u8; NONCE_LEN],
    aad: &[u8],
    ciphertext_and_tag: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let mut buf = ciphertext_and_tag.to_vec();
    let len = aead_key(key)
        .open_in_place(Nonce::assume_unique_for_key(nonce), Aad::from(aad), &mut buf)?
        .len();
    buf.truncate(len);
    Ok(buf)
}

pub use aead::NONCE_LEN as AEAD_NONCE_LEN;

/// A single-use X25519 key pair. The private half never leaves this value
/// and is consumed by [`TempKeyPair::open`].
pub struct TempKeyPair {
    private: EphemeralPrivateKey,
    public: [u8; PUBLIC_KEY_LEN],
}

impl TempKeyPair {
    pub fn generate() -> Self {
        let private = EphemeralPrivateKey::generate(&X25519, &SystemRandom::new()).expect("x25519 keygen");
        let mut public = [0u8; PUBLIC_KEY_LEN];
        public.copy_from_slice(private.compute_public_key().expect("x25519 public").as_ref());
        TempKeyPair { private, public }
    }

    pub fn public_key(&self) -> [u8; PUBLIC_KEY_LEN] {
        self.public
    }

    /// Decrypts a box produced by [`seal_to_public_key`] for this key pair.
    pub fn open(self, context: &[u8], sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        if sealed.len() < PUBLIC_KEY_LEN + TAG_LEN {
            return Err(CryptoError);
        }
        let (sender_pub, body) = sealed.split_at(PUBLIC_KEY_LEN);
        let recipient_pub = self.public;
        let key = agreement::agree_ephemeral(self.private, &UnparsedPublicKey::new(&X25519, sender_pub), |shared| {
            box_key(shared, context, sender_pub, &recipient_pub)
        })?;
        aead_open(&key, [0u8; NONCE_LEN], context, body)
    }

    /// Runs a raw X25519 agreement against `peer`, consuming the private key.
    pub fn agree(self, peer: &[u8]) -> Result<[u8; 32], CryptoError> {
        let shared = agreement::agree_ephemeral(self.private, &UnparsedPublicKey::new(&X25519, peer), |s| {
            let mut out = [0u8; 32];
            out.copy_from_slice(s);
            out
        })?;
        Ok(shared)
    }
}

fn box_key(shared: &[u8], context: &[u8], sender_pub: &[u8], recipient_pub: &[u8]) -> [u8; KEY_LEN] {
    let mut key = [0u8; KEY_LEN];
    hkdf_expand(
        b"enclave-serve/box/v1",
        shared,
        &[context, sender_pub, recipient_pub],
        &mut key,
    );
    key
}

/// Encrypts `plaintext` so that only the holder of the private half of
/// `recipient` can read it. Output layout: sender ephemeral public key (32)
/// followed by ciphertext and tag.
pub fn seal_to_public_key(
    recipient: &[u8; PUBLIC_KEY_LEN],
    context: &[u8],
    plaintext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let sender = TempKeyPair::generate();
    let sender_pub = sender.public;
    let key = agreement::agree_ephemeral(sender.private, &UnparsedPublicKey::new(&X25519, recipient), |shared| {
        box_key(shared, context, &sender_pub, recipient)
    })?;
    // The key is fresh per box, so a fixed nonce is never reused under it.
    let body = aead_seal(&key, [0u8; NONCE_LEN], context, plaintext);
    let mut out = Vec::with_capacity(PUBLIC_KEY_LEN + body.len());
    out.extend_from_slice(&sender_pub);
    out.extend_from_slice(&body);
    Ok(out)
}

/// True if any `window`-byte slice of `secret` occurs in `haystack`.
pub fn contains_any_window(haystack: &[u8], secret: &[u8], window: usize) -> bool {
    if secret.len() < window || haystack.len() < window {
        return false;
    }
    secret
        .windows(window)
        .any(|needle| haystack.windows(window).any(|w| w == needle))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_round_trip_and_wrong_context() {
        let kp = TempKeyPair::generate();
        let sealed = seal_to_public_key(&kp.public_key(), b"ctx", b"hello").unwrap();
        assert_eq!(kp.open(b"ctx", &sealed).unwrap(), b"hello");

        let kp = TempKeyPair::generate();
        let sealed = seal_to_public_key(&kp.public_key(), b"ctx", b"hello").unwrap();
        assert!(kp.open(b"other", &sealed).is_err());
    }

    #[test]
    fn box_rejects_other_recipient() {
        let a = TempKeyPair::generate();
        let b = TempKeyPair::generate();
        let sealed = seal_to_public_key(&a.public_key(), b"ctx", b"secret").unwrap();
        assert!(b.open(b"ctx", &sealed).is_err());
    }

    #[test]
    fn window_scan() {
        let secret = [1u8, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert!(contains_any_window(&[0, 0, 3, 4, 5, 6, 7, 8, 9, 10, 0], &secret, 8));
        assert!(!contains_any_window(&[0, 0, 3, 4, 5, 6, 7, 0, 9, 10, 0], &secret, 8));
    }
}
