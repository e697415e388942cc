use std::fmt;

use super::{kind, ChannelError};
use crate::crypto::{self, AEAD_NONCE_LEN, KEY_LEN};
use crate::wire::{encode_frame, expect_frame, Reader, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Client,
    Server,
}

pub(crate) struct TrafficKeys {
    c2s_key: [u8; KEY_LEN],
    s2c_key: [u8; KEY_LEN],
    c2s_iv: [u8; AEAD_NONCE_LEN],
    s2c_iv: [u8; AEAD_NONCE_LEN],
    pub(crate) finished: [u8; 32],
    exporter: [u8; 32],
}

impl TrafficKeys {
    pub(crate) fn derive(shared: &[u8; 32], transcript: &[u8; 32]) -> Self {
        let mut okm = [0u8; 2 * KEY_LEN + 2 * AEAD_NONCE_LEN + 64];
        crypto::hkdf_expand(transcript, shared, &[b"enclave-serve/traffic/v1"], &mut okm);
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &okm[at..at + n];
            at += n;
            s.to_vec()
        };
        TrafficKeys {
            c2s_key: take(KEY_LEN).try_into().unwrap(),
            s2c_key: take(KEY_LEN).try_into().unwrap(),
            c2s_iv: take(AEAD_NONCE_LEN).try_into().unwrap(),
            s2c_iv: take(AEAD_NONCE_LEN).try_into().unwrap(),
            finished: take(32).try_into().unwrap(),
            exporter: take(32).try_into().unwrap(),
        }
    }
}

/// An encrypted application record as it travels on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub seq: u64,
    pub ciphertext: Vec<u8>,
}

impl Record {
    /// Frame layout: `seq:u64 | ciphertext+tag`.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(self.seq).fixed(&self.ciphertext);
        encode_frame(kind::RECORD, &w.into_inner())
    }

    pub fn from_frame(frame: &[u8]) -> Result<Self, ChannelError> {
        let payload = expect_frame(frame, kind::RECORD)?;
        let mut r = Reader::new(payload);
        let seq = r.u64()?;
        Ok(Record {
            seq,
            ciphertext: r.rest().to_vec(),
        })
    }
}

/// An established session. Each direction has its own key, IV and strictly
/// increasing sequence counter.
pub struct Session {
    send_key: [u8; KEY_LEN],
    recv_key: [u8; KEY_LEN],
    send_iv: [u8; AEAD_NONCE_LEN],
    recv_iv: [u8; AEAD_NONCE_LEN],
    send_seq: u64,
    recv_seq: u64,
    transcript_hash: [u8; 32],
    exporter: [u8; 32],
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("send_seq", &self.send_seq)
            .field("recv_seq", &self.recv_seq)
            .finish_non_exhaustive()
    }
}

fn nonce(iv: &[u8; AEAD_NONCE_LEN], seq: u64) -> [u8; AEAD_NONCE_LEN] {
    let mut n = *iv;
    for (b, s) in n[AEAD_NONCE_LEN - 8..].iter_mut().zip(seq.to_be_bytes()) {
        *b ^= s;
    }
    n
}

fn aad(seq: u64) -> [u8; 10] {
    let mut a = [0u8; 10];
    a[0] = crate::wire::WIRE_VERSION;
    a[1] = kind::RECORD;
    a[2..].copy_from_slice(&seq.to_be_bytes());
    a
}

impl Session {
    pub(crate) fn new(role: Role, keys: TrafficKeys, transcript_hash: [u8; 32]) -> Self {
        let (send_key, recv_key, send_iv, recv_iv) = match role {
            Role::Client => (keys.c2s_key, keys.s2c_key, keys.c2s_iv, keys.s2c_iv),
            Role::Server => (keys.s2c_key, keys.c2s_key, keys.s2c_iv, keys.c2s_iv),
        };
        Session {
            send_key,
            recv_key,
            send_iv,
            recv_iv,
            send_seq: 0,
            recv_seq: 0,
            transcript_hash,
            exporter: keys.exporter,
        }
    }

    /// Identical on both peers of a successful handshake.
    pub fn session_id(&self) -> [u8; 32] {
        self.exporter
    }

    pub fn transcript_hash(&self) -> [u8; 32] {
        self.transcript_hash
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.recv_seq
    }

    pub fn seal_record(&mut self, plaintext: &[u8]) -> Record {
        let seq = self.send_seq;
        self.send_seq += 1;
        Record {
            seq,
            ciphertext: crypto::aead_seal(&self.send_key, nonce(&self.send_iv, seq), &aad(seq), plaintext),
        }
    }

    /// Records must arrive exactly in sequence; earlier or later numbers are
    /// rejected as replays or reorderings.
    pub fn open_record(&mut self, record: &Record) -> Result<Vec<u8>, ChannelError> {
        if record.seq != self.recv_seq {
            return Err(ChannelError::ReplayDetected);
        }
        let pt = crypto::aead_open(
            &self.recv_key,
            nonce(&self.recv_iv, record.seq),
            &aad(record.seq),
            &record.ciphertext,
        )
        .map_err(|_| ChannelError::RecordTampered)?;
        self.recv_seq += 1;
        Ok(pt)
    }
}
