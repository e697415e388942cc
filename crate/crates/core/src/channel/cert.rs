use super::{pki::verify_signature, ChannelError, SIGNATURE_LEN};
use crate::wire::{Reader, Writer};

const CERT_MAGIC: &[u8; 4] = b"CRT1";

/// A self-signed service certificate.
///
/// Encoding: `"CRT1" | subject:str | public_key[32] | not_before:u64 |
/// not_after:u64 | self_signature[64]`; the signature covers every byte
/// before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    pub public_key: [u8; 32],
    pub not_before: u64,
    pub not_after: u64,
    pub self_signature: [u8; SIGNATURE_LEN],
}

impl Certificate {
    pub(crate) fn tbs_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.fixed(CERT_MAGIC)
            .str(&self.subject)
            .fixed(&self.public_key)
            .u64(self.not_before)
            .u64(self.not_after);
        w.into_inner()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.tbs_bytes();
        out.extend_from_slice(&self.self_signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChannelError> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.fixed()?;
        if &magic != CERT_MAGIC {
            return Err(ChannelError::InvalidCertificate("magic"));
        }
        let cert = Certificate {
            subject: r.str()?.to_owned(),
            public_key: r.fixed()?,
            not_before: r.u64()?,
            not_after: r.u64()?,
            self_signature: r.fixed()?,
        };
        r.finish()?;
        if cert.subject.is_empty() {
            return Err(ChannelError::InvalidCertificate("empty subject"));
        }
        Ok(cert)
    }

    pub fn verify_self_signature(&self) -> bool {
        verify_signature(&self.public_key, &self.tbs_bytes(), &self.self_signature)
    }

    pub fn is_valid_at(&self, secs: u64) -> bool {
        self.not_before <= secs && secs <= self.not_after
    }
}
