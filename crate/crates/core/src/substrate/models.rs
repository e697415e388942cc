use std::fmt;
use std::time::Duration;

use super::EnclaveSpec;

/// Maps the resident enclave set of a node to an aggregate paging rate
/// (pages in plus pages out, per second).
pub trait PagingModel: Send + Sync + fmt::Debug {
    fn throughput(&self, enclaves: &[&EnclaveSpec], epc_usable_bytes: u64) -> f64;
}

/// The share of total working set that does not fit in EPC is assumed to
/// miss on every access.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProportionalOverflow;

impl PagingModel for ProportionalOverflow {
    fn throughput(&self, enclaves: &[&EnclaveSpec], epc_usable_bytes: u64) -> f64 {
        let demand: u64 = enclaves.iter().map(|e| e.working_set_bytes).sum();
        if demand <= epc_usable_bytes || demand == 0 {
            return 0.0;
        }
        let overflow = (demand - epc_usable_bytes) as f64 / demand as f64;
        let access: f64 = enclaves.iter().map(|e| e.page_access_rate).sum();
        overflow * access
    }
}

pub trait LatencyModel: Send + Sync + fmt::Debug {
    fn inflate(&self, base: Duration, paging: f64) -> Duration;
}

/// `base * (1 + kappa * paging / paging_ref)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearInflation {
    pub kappa: f64,
    pub paging_ref: f64,
}

impl LinearInflation {
    pub fn new(paging_ref: f64) -> Self {
        LinearInflation { kappa: 4.0, paging_ref }
    }
}

impl LatencyModel for LinearInflation {
    fn inflate(&self, base: Duration, paging: f64) -> Duration {
        let factor = 1.0 + self.kappa * paging.max(0.0) / self.paging_ref;
        base.mul_f64(factor)
    }
}

pub fn compute_paging_throughput(model: &dyn PagingModel, enclaves: &[&EnclaveSpec], epc_usable_bytes: u64) -> f64 {
    model.throughput(enclaves, epc_usable_bytes)
}

pub fn inflate_latency(base: Duration, paging: f64, model: &dyn LatencyModel) -> Duration {
    model.inflate(base, paging)
}
