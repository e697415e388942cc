//! Model-server replicas and the frontend virtual service.

mod presets;
mod replica;
mod scheduler;

pub use presets::ModelPreset;
pub use replica::{
    decode_inference_response, encode_inference_request, model_server_measurement, start_replica, BusyWindow,
    InferenceJob, InferenceResponse, ModelServerReplica, ReplicaSpec,
};
pub use scheduler::{pick, Algorithm, Dispatch, Endpoint, EndpointView, Frontend, VirtualService};

use crate::aecs::AecsError;
use crate::channel::ChannelError;
use crate::substrate::SubstrateError;
use crate::wire::WireError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServingError {
    #[error("no endpoint has a nonzero weight")]
    NoEligibleEndpoint,
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(String),
    #[error("weight {0} is not 0 or 1")]
    InvalidWeight(u32),
    #[error("connection counter would go negative")]
    ConnectionUnderflow,
    #[error("enclave launch failed: {0}")]
    EnclaveLaunchFailed(SubstrateError),
    #[error("provisioning failed: {0}")]
    ProvisioningFailed(AecsError),
    #[error("session error: {0}")]
    Session(#[from] ChannelError),
    #[error("replica is not serving")]
    NotServing,
    #[error("malformed inference message: {0}")]
    Malformed(#[from] WireError),
}
