use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{ControlError, Telemetry};
use crate::serving::Frontend;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloPolicy {
    pub service_id: String,
    #[serde(with = "crate::serde_ms")]
    pub slo_p99: Duration,
    /// Paging throughput (pages/s) above which the SLO is at risk.
    pub boundary: f64,
    #[serde(default = "default_theta")]
    pub threshold_fraction: f64,
    #[serde(default = "default_n")]
    pub consecutive_cycles: u32,
    #[serde(with = "crate::serde_ms", default = "default_interval")]
    pub sample_interval: Duration,
}

fn default_theta() -> f64 {
    0.70
}

fn default_n() -> u32 {
    5
}

fn default_interval() -> Duration {
    Duration::from_secs(1)
}

impl SloPolicy {
    pub fn new(service_id: impl Into<String>, slo_p99: Duration, boundary: f64) -> Self {
        SloPolicy {
            service_id: service_id.into(),
            slo_p99,
            boundary,
            threshold_fraction: default_theta(),
            consecutive_cycles: default_n(),
            sample_interval: default_interval(),
        }
    }

    pub fn threshold(&self) -> f64 {
        self.threshold_fraction * self.boundary
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidPolicy(m.to_owned()));
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction <= 1.0) {
            return bad("threshold_fraction must be in (0, 1]");
        }
        if self.consecutive_cycles == 0 {
            return bad("consecutive_cycles must be >= 1");
        }
        if !(self.boundary > 0.0 && self.boundary.is_finite()) {
            return bad("boundary must be > 0");
        }
        if self.sample_interval.is_zero() {
            return bad("sample_interval must be > 0");
        }
        Ok(())
    }
}

/// What the controller sees of one endpoint at a sampling instant.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointObservation {
    pub replica_id: String,
    pub weight: u32,
    /// Node paging over the last interval; `None` when telemetry is missing.
    pub paging: Option<f64>,
    /// Whether the node runs no non-system enclave besides this replica;
    /// `None` when telemetry is missing.
    pub interference_free: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightChange {
    pub replica_id: String,
    pub from: u32,
    pub to: u32,
}

/// Weight-zeroing and restoring controller for one service.
#[derive(Debug, Clone)]
pub struct SloController {
    policy: SloPolicy,
    streaks: BTreeMap<String, u32>,
    missing: u64,
}

impl SloController {
    pub fn new(policy: SloPolicy) -> Result<Self, ControlError> {
        policy.validate()?;
        Ok(SloController {
            policy,
            streaks: BTreeMap::new(),
            missing: 0,
        })
    }

    pub fn policy(&self) -> &SloPolicy {
        &self.policy
    }

    /// Samples skipped for lack of telemetry.
    pub fn missing(&self) -> u64 {
        self.missing
    }

    pub fn streak(&self, replica_id: &str) -> u32 {
        self.streaks.get(replica_id).copied().unwrap_or(0)
    }

    pub fn forget(&mut self, replica_id: &str) {
        self.streaks.remove(replica_id);
    }

    /// One control cycle.
    pub fn step(&mut self, observations: &[EndpointObservation]) -> Vec<WeightChange> {
        let threshold = self.policy.threshold();
        let n = self.policy.consecutive_cycles;
        let mut changes = Vec::new();
        for obs in observations {
            let streak = self.streaks.entry(obs.replica_id.clone()).or_insert(0);
            let Some(paging) = obs.paging else {
                *streak = 0;
                self.missing += 1;
                continue;
            };
            *streak = if paging > threshold { *streak + 1 } else { 0 };
            let to = match obs.weight {
                0 if obs.interference_free == Some(true) => 1,
                w if w > 0 && *streak >= n => 0,
                w => w,
            };
            if to != obs.weight {
                changes.push(WeightChange {
                    replica_id: obs.replica_id.clone(),
                    from: obs.weight,
                    to,
                });
            }
        }
        changes
    }
}

/// Builds observations for every endpoint of `frontend` not in `skip`.
/// A replica's enclave id equals its replica id.
pub fn observe(frontend: &Frontend, telemetry: &Telemetry, skip: &[String]) -> Vec<EndpointObservation> {
    frontend
        .list_endpoints()
        .into_iter()
        .filter(|e| !skip.contains(&e.replica_id))
        .map(|e| {
            let paging = telemetry.paging_throughput(&e.node_id, 2).ok();
            let interference_free = paging
                .and(telemetry.latest(&e.node_id))
                .map(|s| s.interferers(&e.replica_id).next().is_none());
            EndpointObservation {
                replica_id: e.replica_id,
                weight: e.weight,
                paging,
                interference_free,
            }
        })
        .collect()
}

/// Applies weight changes to the frontend; idempotent.
pub fn actuate(frontend: &Frontend, changes: &[WeightChange]) -> Result<(), ControlError> {
    for c in changes {
        frontend.set_weight(&c.replica_id, c.to)?;
    }
    Ok(())
}
