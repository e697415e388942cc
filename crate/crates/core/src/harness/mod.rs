//! Scenario runner: workload generation, cluster assembly, virtual-clock and
//! real-clock execution, and report emission.

mod cluster;
mod des;
mod real;
mod report;
mod scenario;
mod sweep;
mod workload;

pub use cluster::{system_enclave_spec, Cluster};
pub use des::{run_virtual, run_virtual_with, RunArtifacts, RunOptions};
pub use real::run_real;
pub use report::{
    emit_report, summarize_latencies_csv, CsvSummary, EpcRow, Percentiles, ReplicaEvent, RequestRecord, RequestStatus,
    RunReport, WeightEvent,
};
pub use scenario::{
    AutoKeyword, BoundarySetting, ClusterConfig, CrashEvent, InterferenceScript, LbMode, ScalePolicyConfig, Scenario,
    ServiceConfig, SloPolicyConfig, WorkloadConfig,
};
pub use sweep::{max_sustainable_rate, run_batch, SustainableRate};
pub(crate) use workload::payload_rng;
pub use workload::{
    generate_arrivals, generate_work_factors, make_payload, percentile, percentile_sorted, WorkloadSpec,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aecs::AecsError;
use crate::control::{profile_boundary, ControlError, SweepConfig};
use crate::par::Execution;
use crate::serving::ServingError;
use crate::substrate::SubstrateError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("no samples")]
    EmptySamples,
    #[error("io: {0}")]
    Io(String),
    #[error("scenario failed: {0}")]
    ScenarioFailed(String),
}

impl From<SubstrateError> for HarnessError {
    fn from(e: SubstrateError) -> Self {
        HarnessError::ScenarioFailed(e.to_string())
    }
}

impl From<AecsError> for HarnessError {
    fn from(e: AecsError) -> Self {
        HarnessError::ScenarioFailed(e.to_string())
    }
}

impl From<ServingError> for HarnessError {
    fn from(e: ServingError) -> Self {
        HarnessError::ScenarioFailed(e.to_string())
    }
}

impl From<ControlError> for HarnessError {
    fn from(e: ControlError) -> Self {
        match e {
            ControlError::InvalidPolicy(m) => HarnessError::ConfigInvalid(m),
            other => HarnessError::ScenarioFailed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Real,
}

/// Paging boundary the SLO controller should use, profiling the preset on
/// the scenario's node class when the scenario asks for `auto`.
pub fn resolve_boundary(scenario: &Scenario, execution: Execution) -> Result<Option<f64>, HarnessError> {
    let Some(policy) = &scenario.slo_policy else {
        return Ok(None);
    };
    if scenario.service.algorithm != LbMode::SgxAware {
        return Ok(None);
    }
    match policy.boundary {
        BoundarySetting::Fixed(b) => Ok(Some(b)),
        BoundarySetting::Auto(_) => {
            let preset = scenario.preset()?;
            let mut sweep = SweepConfig::for_preset(&preset);
            sweep.epc_mib = scenario.cluster.epc_mib;
            sweep.cores = scenario.cluster.cores;
            sweep.parallelism = scenario.service.parallelism;
            sweep.execution = execution;
            let (_, b) = profile_boundary(&preset, preset.slo, &sweep)?;
            Ok(Some(b))
        }
    }
}

/// Loads and runs a scenario file.
pub fn run_scenario(path: &Path, seed: Option<u64>, clock: ClockMode) -> Result<RunReport, HarnessError> {
    let mut scenario = Scenario::load(path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    run(&scenario, clock)
}

pub fn run(scenario: &Scenario, clock: ClockMode) -> Result<RunReport, HarnessError> {
    scenario.validate()?;
    let boundary = resolve_boundary(scenario, Execution::default())?;
    match clock {
        ClockMode::Virtual => run_virtual(scenario, boundary),
        ClockMode::Real => run_real(scenario, boundary),
    }
}
