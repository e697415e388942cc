//! Telemetry, the paging-aware SLO controller, the utilization autoscaler,
//! the deployment reconciler and the offline boundary profiler.

mod autoscale;
mod policy;
mod profiler;
mod reconcile;
mod slo;
mod telemetry;

pub use autoscale::{desired_replicas, Autoscaler, ScalePolicy};
pub use policy::PolicyFile;
pub use profiler::{
    interference_enclave, profile, profile_boundary, BoundaryProfile, ProfilePoint, SweepConfig, MAX_INTERFERENCE_RATE,
};
pub use reconcile::{plan, Action, Plan, ReplicaStatus, DEFAULT_DRAIN_TIMEOUT};
pub use slo::{actuate, observe, EndpointObservation, SloController, SloPolicy, WeightChange};
pub use telemetry::{collect, paging_between, EpcSample, Telemetry};

use std::time::Duration;

use crate::aecs::AecsError;
use crate::harness::HarnessError;
use crate::serving::ServingError;
use crate::substrate::{NodeId, SubstrateError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ControlError {
    #[error("node {0} unreachable")]
    NodeUnreachable(NodeId),
    #[error("sample from {0} is not newer than the previous one")]
    NonMonotonicSample(NodeId),
    #[error("fewer than two samples in the window")]
    InsufficientSamples,
    #[error("SLO {slo:?} is below the idle p99 {idle_p99:?}")]
    SloUnattainable { idle_p99: Duration, slo: Duration },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("no node available for a new replica")]
    PlacementFailure,
    #[error(transparent)]
    Substrate(#[from] SubstrateError),
    #[error(transparent)]
    Serving(#[from] ServingError),
    #[error(transparent)]
    Aecs(#[from] AecsError),
    #[error("profiling setup: {0}")]
    Setup(String),
}

impl From<HarnessError> for ControlError {
    fn from(e: HarnessError) -> Self {
        ControlError::Setup(e.to_string())
    }
}
