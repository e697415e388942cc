use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ControlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalePolicy {
    pub service_id: String,
    pub target_utilization: f64,
    pub min_replicas: usize,
    pub max_replicas: usize,
    #[serde(with = "crate::serde_ms")]
    pub cooldown: Duration,
    /// Control period; also the utilization averaging window.
    #[serde(with = "crate::serde_ms", default = "default_period")]
    pub period: Duration,
}

fn default_period() -> Duration {
    Duration::from_secs(5)
}

impl ScalePolicy {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.target_utilization > 0.0 && self.target_utilization <= 1.0) {
            return Err(ControlError::InvalidPolicy(
                "target_utilization must be in (0, 1]".into(),
            ));
        }
        if self.min_replicas > self.max_replicas {
            return Err(ControlError::InvalidPolicy("min_replicas exceeds max_replicas".into()));
        }
        if self.period.is_zero() {
            return Err(ControlError::InvalidPolicy("period must be > 0".into()));
        }
        Ok(())
    }
}

/// `ceil(n * avg / target)` clamped to the policy bounds, where `n` is the
/// number of in-service replicas. Holds `current` when nothing is in service.
pub fn desired_replicas(policy: &ScalePolicy, current: usize, utilizations: &[f64]) -> usize {
    if utilizations.is_empty() {
        return current;
    }
    let total: f64 = utilizations.iter().sum();
    // total = n * avg; the epsilon keeps exact ratios from rounding up.
    let raw = (total / policy.target_utilization - 1e-9).ceil().max(0.0) as usize;
    raw.clamp(policy.min_replicas, policy.max_replicas)
}

/// Utilization-driven scaler with a cooldown after each change.
#[derive(Debug, Clone)]
pub struct Autoscaler {
    policy: ScalePolicy,
    last_change: Option<Duration>,
}

impl Autoscaler {
    pub fn new(policy: ScalePolicy) -> Result<Self, ControlError> {
        policy.validate()?;
        Ok(Autoscaler {
            policy,
            last_change: None,
        })
    }

    pub fn policy(&self) -> &ScalePolicy {
        &self.policy
    }

    /// Desired number of in-service replicas given the utilizations of the
    /// replicas currently in service (`current` of them).
    pub fn step(&mut self, now: Duration, current: usize, utilizations: &[f64]) -> usize {
        if self
            .last_change
            .is_some_and(|t| now.saturating_sub(t) < self.policy.cooldown)
        {
            return current;
        }
        let desired = desired_replicas(&self.policy, current, utilizations);
        if desired != current {
            self.last_change = Some(now);
        }
        desired
    }
}
