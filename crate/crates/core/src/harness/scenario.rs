//! Scenario files (TOML).
//!
//! ```toml
//! name = "lb-mobilenet-v1-float-high-sgx-aware"
//! seed = 42
//! timeout_ms = 10000                  # optional
//! validity_secs = 70                  # optional, certificate lifetime
//!
//! [cluster]
//! nodes = ["node-0", "node-1", "node-2", "node-3"]
//! aecs_nodes = ["aecs-0", "aecs-1", "aecs-2"]
//! epc_mib = 93                        # optional, per node
//! cores = 8                           # optional
//!
//! [service]
//! id = "mnv1f"
//! model = "mobilenet-v1-float"        # preset name
//! replicas = 3                        # placed on the first nodes unless `placement` is given
//! algorithm = "sgx-aware"             # rr | lc | sed | sgx-aware
//! parallelism = 8                     # optional
//!
//! [slo_policy]                        # required for sgx-aware
//! boundary = "auto"                   # or pages/s
//! threshold_fraction = 0.7            # optional
//! consecutive_cycles = 5              # optional
//! sample_interval_ms = 1000           # optional
//!
//! [scale_policy]                      # optional
//! target_utilization = 0.6
//! min_replicas = 1
//! max_replicas = 4
//! cooldown_ms = 10000
//! period_ms = 5000
//!
//! [workload]
//! arrival_rate = 436.0                # requests/s
//! duration_ms = 60000
//! payload_size = 256                  # optional
//!
//! [[interference]]
//! node = "node-0"
//! windows_ms = [[12000, 24000], [36000, 48000]]
//! epc_mib = 640
//! access_rate = 50000.0               # optional
//!
//! [[crashes]]                         # optional
//! at_ms = 20500
//! replica = "mnv1f-1"
//! ```

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{HarnessError, WorkloadSpec};
use crate::channel::Validity;
use crate::control::{ScalePolicy, SloPolicy, MAX_INTERFERENCE_RATE};
use crate::serving::{Algorithm, ModelPreset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LbMode {
    #[serde(rename = "rr")]
    Rr,
    #[serde(rename = "lc")]
    Lc,
    #[serde(rename = "sed")]
    Sed,
    /// SED plus the paging-aware weight controller.
    #[serde(rename = "sgx-aware")]
    SgxAware,
}

impl LbMode {
    pub const ALL: [LbMode; 4] = [LbMode::Rr, LbMode::Lc, LbMode::Sed, LbMode::SgxAware];

    pub fn algorithm(self) -> Algorithm {
        match self {
            LbMode::Rr => Algorithm::RoundRobin,
            LbMode::Lc => Algorithm::LeastConnection,
            LbMode::Sed | LbMode::SgxAware => Algorithm::ShortestExpectedDelay,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LbMode::Rr => "rr",
            LbMode::Lc => "lc",
            LbMode::Sed => "sed",
            LbMode::SgxAware => "sgx-aware",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub nodes: Vec<String>,
    #[serde(default = "default_aecs_nodes")]
    pub aecs_nodes: Vec<String>,
    #[serde(default = "default_epc_mib")]
    pub epc_mib: u64,
    #[serde(default = "default_cores")]
    pub cores: u32,
}

fn default_aecs_nodes() -> Vec<String> {
    vec!["aecs-0".into()]
}

fn default_epc_mib() -> u64 {
    93
}

fn default_cores() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub id: String,
    pub model: String,
    pub replicas: usize,
    pub algorithm: LbMode,
    #[serde(default = "default_parallelism")]
    pub parallelism: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Vec<String>>,
}

fn default_parallelism() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundarySetting {
    Fixed(f64),
    Auto(AutoKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SloPolicyConfig {
    pub boundary: BoundarySetting,
    #[serde(default = "default_theta")]
    pub threshold_fraction: f64,
    #[serde(default = "default_n")]
    pub consecutive_cycles: u32,
    #[serde(default = "default_sample_ms")]
    pub sample_interval_ms: u64,
}

fn default_theta() -> f64 {
    0.70
}

fn default_n() -> u32 {
    5
}

fn default_sample_ms() -> u64 {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalePolicyConfig {
    pub target_utilization: f64,
    pub min_replicas: usize,
    pub max_replicas: usize,
    pub cooldown_ms: u64,
    #[serde(default = "default_period_ms")]
    pub period_ms: u64,
}

fn default_period_ms() -> u64 {
    5000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub arrival_rate: f64,
    pub duration_ms: u64,
    #[serde(default = "default_payload")]
    pub payload_size: usize,
}

fn default_payload() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceScript {
    pub node: String,
    pub windows_ms: Vec<[u64; 2]>,
    pub epc_mib: u64,
    #[serde(default = "default_access_rate")]
    pub access_rate: f64,
}

fn default_access_rate() -> f64 {
    MAX_INTERFERENCE_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashEvent {
    pub at_ms: u64,
    pub replica: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Certificate lifetime; defaults to the run length plus the timeout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity_secs: Option<u64>,
    pub cluster: ClusterConfig,
    pub service: ServiceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo_policy: Option<SloPolicyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_policy: Option<ScalePolicyConfig>,
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub interference: Vec<InterferenceScript>,
    #[serde(default)]
    pub crashes: Vec<CrashEvent>,
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn preset(&self) -> Result<ModelPreset, HarnessError> {
        ModelPreset::by_name(&self.service.model)
            .ok_or_else(|| invalid(format!("unknown model {}", self.service.model)))
    }

    pub fn duration(&self) -> Duration {
        Duration::from_millis(self.workload.duration_ms)
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validity(&self) -> Validity {
        let secs = self
            .validity_secs
            .unwrap_or_else(|| (self.workload.duration_ms + self.timeout_ms).div_ceil(1000));
        Validity {
            not_before: 0,
            not_after: secs,
        }
    }

    pub fn workload_spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            service_id: self.service.id.clone(),
            arrival_rate: self.workload.arrival_rate,
            duration: self.duration(),
            rng_seed: self.seed,
            payload_size: self.workload.payload_size,
        }
    }

    /// Nodes hosting the initial replicas.
    pub fn placement(&self) -> Vec<String> {
        match &self.service.placement {
            Some(p) => p.clone(),
            None => self.cluster.nodes.iter().take(self.service.replicas).cloned().collect(),
        }
    }

    pub fn replica_id(&self, k: usize) -> String {
        format!("{}-{k}", self.service.id)
    }

    /// Policy with a concrete boundary.
    pub fn slo_policy(&self, boundary: f64) -> Option<SloPolicy> {
        self.slo_policy.as_ref().map(|c| SloPolicy {
            service_id: self.service.id.clone(),
            slo_p99: self.preset().map(|p| p.slo).unwrap_or_default(),
            boundary,
            threshold_fraction: c.threshold_fraction,
            consecutive_cycles: c.consecutive_cycles,
            sample_interval: Duration::from_millis(c.sample_interval_ms),
        })
    }

    pub fn scale_policy(&self) -> Option<ScalePolicy> {
        self.scale_policy.as_ref().map(|c| ScalePolicy {
            service_id: self.service.id.clone(),
            target_utilization: c.target_utilization,
            min_replicas: c.min_replicas,
            max_replicas: c.max_replicas,
            cooldown: Duration::from_millis(c.cooldown_ms),
            period: Duration::from_millis(c.period_ms),
        })
    }

    pub fn sample_interval(&self) -> Duration {
        Duration::from_millis(self.slo_policy.as_ref().map_or(1000, |c| c.sample_interval_ms))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.preset()?;
        self.workload_spec().validate()?;
        let c = &self.cluster;
        let mut all: Vec<&String> = c.nodes.iter().chain(&c.aecs_nodes).collect();
        all.sort();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("node names must be unique"));
        }
        if c.aecs_nodes.is_empty() {
            return Err(invalid("at least one AECS node is required"));
        }
        if c.epc_mib == 0 || c.cores == 0 {
            return Err(invalid("epc_mib and cores must be > 0"));
        }
        if self.timeout_ms == 0 {
            return Err(invalid("timeout_ms must be > 0"));
        }
        let s = &self.service;
        if s.replicas == 0 || s.parallelism == 0 {
            return Err(invalid("replicas and parallelism must be > 0"));
        }
        let placement = self.placement();
        if placement.len() != s.replicas {
            return Err(invalid("placement must name one node per replica"));
        }
        let mut p = placement.clone();
        p.sort();
        p.dedup();
        if p.len() != placement.len() || !placement.iter().all(|n| c.nodes.contains(n)) {
            return Err(invalid("replicas need distinct worker nodes"));
        }
        if s.algorithm == LbMode::SgxAware && self.slo_policy.is_none() {
            return Err(invalid("sgx-aware needs [slo_policy]"));
        }
        if let Some(policy) = self.slo_policy(1.0) {
            policy.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(sc) = &self.slo_policy {
            if let BoundarySetting::Fixed(b) = sc.boundary {
                if !(b > 0.0 && b.is_finite()) {
                    return Err(invalid("boundary must be > 0"));
                }
            }
        }
        if let Some(policy) = self.scale_policy() {
            policy.validate().map_err(|e| invalid(e.to_string()))?;
            if policy.max_replicas > c.nodes.len() {
                return Err(invalid("max_replicas exceeds worker nodes"));
            }
        }
        let duration = self.workload.duration_ms;
        for script in &self.interference {
            if !c.nodes.contains(&script.node) {
                return Err(invalid(format!(
                    "interference node {} is not a worker node",
                    script.node
                )));
            }
            if script.epc_mib == 0 || !(script.access_rate >= 0.0 && script.access_rate.is_finite()) {
                return Err(invalid("interference needs epc_mib > 0 and a finite access rate"));
            }
            let mut w = script.windows_ms.clone();
            w.sort();
            for win in &w {
                if win[0] >= win[1] || win[1] > duration {
                    return Err(invalid("interference windows must be nonempty and within the run"));
                }
            }
            if w.windows(2).any(|p| p[1][0] < p[0][1]) {
                return Err(invalid("interference windows overlap"));
            }
        }
        let replica_ids: Vec<String> = (0..s.replicas).map(|k| self.replica_id(k)).collect();
        for crash in &self.crashes {
            if crash.at_ms >= duration || !replica_ids.contains(&crash.replica) {
                return Err(invalid("crash must target an initial replica within the run"));
            }
        }
        Ok(())
    }
}
