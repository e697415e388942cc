use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::substrate::MIB;

/// Calibrated stand-in for one model: how long an idle inference takes and
/// how the model server's enclave uses EPC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPreset {
    pub name: String,
    #[serde(with = "crate::serde_ms")]
    pub base_inference_time: Duration,
    #[serde(with = "crate::serde_ms")]
    pub slo: Duration,
    /// Log-space standard deviation of the per-request work factor.
    pub work_sigma: f64,
    pub requested_epc_bytes: u64,
    pub working_set_bytes: u64,
    pub page_access_rate: f64,
}

impl ModelPreset {
    fn new(name: &str, base_ms: u64, slo_ms: u64, ws_mib: u64) -> Self {
        ModelPreset {
            name: name.to_owned(),
            base_inference_time: Duration::from_millis(base_ms),
            slo: Duration::from_millis(slo_ms),
            work_sigma: 0.08,
            // The library OS reserves a large heap at boot, beyond usable EPC.
            requested_epc_bytes: 128 * MIB,
            working_set_bytes: ws_mib * MIB,
            page_access_rate: 2000.0,
        }
    }

    pub fn all() -> Vec<ModelPreset> {
        vec![
            Self::new("mobilenet-v1-float", 22, 100, 30),
            Self::new("mobilenet-v1-quant", 20, 100, 24),
            Self::new("efficientnet-lite-float", 110, 500, 40),
            Self::new("efficientnet-lite-quant", 130, 600, 32),
        ]
    }

    pub fn by_name(name: &str) -> Option<ModelPreset> {
        Self::all().into_iter().find(|p| p.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slos_sit_several_times_above_idle_latency() {
        for p in ModelPreset::all() {
            // Work factor p99 is about exp(2.33 * sigma).
            let idle_p99 = p.base_inference_time.as_secs_f64() * (2.33 * p.work_sigma).exp();
            let ratio = p.slo.as_secs_f64() / idle_p99;
            assert!((3.0..=5.0).contains(&ratio), "{}: {ratio}", p.name);
            assert!(p.working_set_bytes <= p.requested_epc_bytes);
        }
        assert_eq!(
            ModelPreset::all().iter().map(|p| p.slo.as_millis()).collect::<Vec<_>>(),
            [100, 100, 500, 600]
        );
    }
}
