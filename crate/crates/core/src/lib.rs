//! Secure model serving over a simulated SGX substrate: attestation-gated key
//! management, PKI-synchronized encrypted replicas, and EPC-paging-aware load
//! balancing and autoscaling, plus a discrete-event experiment harness.

pub mod aecs;
pub mod channel;
pub mod clock;
pub mod control;
pub mod crypto;
pub mod harness;
pub mod par;
pub mod serving;
pub mod substrate;
pub mod wire;

/// Serde adapter: `Duration` as fractional milliseconds.
pub(crate) mod serde_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        if !(ms.is_finite() && ms >= 0.0) {
            return Err(serde::de::Error::custom("duration must be a nonnegative number of ms"));
        }
        Ok(Duration::from_secs_f64(ms / 1e3))
    }
}
