use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::telemetry::{collect, paging_between};
use super::ControlError;
use crate::channel::{ClientHandshake, Record, Validity};
use crate::clock::{SharedClock, VirtualClock};
use crate::harness::{
    generate_arrivals, generate_work_factors, make_payload, payload_rng, percentile_sorted, Cluster, ClusterConfig,
    WorkloadSpec,
};
use crate::par::{self, Execution};
use crate::serving::{
    decode_inference_response, encode_inference_request, model_server_measurement, start_replica, ModelPreset,
    ReplicaSpec,
};
use crate::substrate::{EnclaveSpec, Measurement, MIB};

/// Access rate of the interference enclave: it touches its pages in a tight
/// loop, far faster than a model server.
pub const MAX_INTERFERENCE_RATE: f64 = 5.0e4;

/// Enclave standing in for a memory-hungry batch task.
pub fn interference_enclave(id: impl Into<String>, bytes: u64, access_rate: f64) -> EnclaveSpec {
    EnclaveSpec::new(
        id.into(),
        Measurement::of_code(b"stress-sgx"),
        bytes,
        bytes,
        access_rate,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Interference EPC sizes, bytes. 0 means no interference enclave.
    pub interference_sizes: Vec<u64>,
    pub interference_rate: f64,
    pub requests: usize,
    /// Requests per second; `None` uses a quarter of the replica's idle
    /// capacity.
    pub arrival_rate: Option<f64>,
    pub parallelism: u32,
    pub epc_mib: u64,
    pub cores: u32,
    pub seed: u64,
    #[serde(skip)]
    pub execution: Execution,
}

impl SweepConfig {
    /// Dense steps around the size where the node's EPC starts to overflow,
    /// then coarser steps up to heavy thrashing.
    pub fn for_preset(preset: &ModelPreset) -> Self {
        let epc_mib = 93;
        let resident_mib = preset.working_set_bytes / MIB + 1; // + platform enclave
        let edge = epc_mib - resident_mib;
        let mut sizes = vec![0, edge / 2, edge];
        sizes.extend((1..=8).map(|i| edge + 2 * i));
        sizes.extend([edge + 24, edge + 32, edge + 48, edge + 64, edge + 96]);
        SweepConfig {
            interference_sizes: sizes.into_iter().map(|m| m * MIB).collect(),
            interference_rate: MAX_INTERFERENCE_RATE,
            requests: 2000,
            arrival_rate: None,
            parallelism: 8,
            epc_mib,
            cores: 8,
            seed: 1,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub interference_bytes: u64,
    /// Average node paging throughput during the point, pages/s.
    pub paging: f64,
    #[serde(with = "crate::serde_ms")]
    pub p90: Duration,
    #[serde(with = "crate::serde_ms")]
    pub p95: Duration,
    #[serde(with = "crate::serde_ms")]
    pub p99: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryProfile {
    pub model: String,
    pub node_class: String,
    #[serde(with = "crate::serde_ms")]
    pub idle_p99: Duration,
    /// Raw measurements, sorted by paging throughput.
    pub points: Vec<ProfilePoint>,
}

impl BoundaryProfile {
    /// Points with each percentile replaced by its running maximum, the
    /// smallest nondecreasing series that bounds the raw data from above.
    pub fn cleaned(&self) -> Vec<ProfilePoint> {
        let mut out = self.points.clone();
        for i in 1..out.len() {
            let prev = out[i - 1].clone();
            let p = &mut out[i];
            p.p90 = p.p90.max(prev.p90);
            p.p95 = p.p95.max(prev.p95);
            p.p99 = p.p99.max(prev.p99);
        }
        out
    }

    /// Largest measured paging throughput whose cleaned p99 still meets
    /// `slo`.
    pub fn boundary_for(&self, slo: Duration) -> Result<f64, ControlError> {
        let cleaned = self.cleaned();
        match cleaned.first() {
            Some(first) if first.p99 <= slo => {}
            _ => {
                return Err(ControlError::SloUnattainable {
                    idle_p99: self.idle_p99,
                    slo,
                })
            }
        }
        Ok(cleaned
            .iter()
            .take_while(|p| p.p99 <= slo)
            .last()
            .map(|p| p.paging)
            .expect("first point is safe"))
    }
}

/// Measures tail latency of one replica under each interference size and
/// derives the paging boundary for `slo`.
pub fn profile_boundary(
    preset: &ModelPreset,
    slo: Duration,
    sweep: &SweepConfig,
) -> Result<(BoundaryProfile, f64), ControlError> {
    let profile = profile(preset, sweep)?;
    let boundary = profile.boundary_for(slo)?;
    Ok((profile, boundary))
}

/// Runs the sweep without deriving a boundary.
pub fn profile(preset: &ModelPreset, sweep: &SweepConfig) -> Result<BoundaryProfile, ControlError> {
    if sweep.requests == 0 || sweep.interference_sizes.is_empty() {
        return Err(ControlError::InvalidPolicy("empty sweep".into()));
    }
    let idle = run_point(preset, sweep, None)?;
    let jobs: Vec<u64> = sweep.interference_sizes.clone();
    let mut points = par::map(sweep.execution, jobs, |size| run_point(preset, sweep, Some(size)))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    points.sort_by(|a, b| {
        a.paging
            .total_cmp(&b.paging)
            .then(a.interference_bytes.cmp(&b.interference_bytes))
    });
    Ok(BoundaryProfile {
        model: preset.name.clone(),
        node_class: format!("epc{}mib-{}c", sweep.epc_mib, sweep.cores),
        idle_p99: idle.p99,
        points,
    })
}

/// One sweep point on a fresh single-node deployment. Requests are served
/// FIFO by `parallelism` workers; every run uses the same arrivals and work
/// factors. `None` runs with no interference enclave at all.
fn run_point(preset: &ModelPreset, sweep: &SweepConfig, size: Option<u64>) -> Result<ProfilePoint, ControlError> {
    let clock = VirtualClock::new();
    let shared: SharedClock = Arc::new(clock.clone());
    let config = ClusterConfig {
        nodes: vec!["profile-node".into()],
        aecs_nodes: vec!["profile-aecs".into()],
        epc_mib: sweep.epc_mib,
        cores: sweep.cores,
    };
    let cluster = Cluster::build(&config, shared, sweep.seed, Validity::default())?;
    let service = "profile";
    cluster
        .client
        .create_service_pki(service, model_server_measurement(preset))?;
    let node = &cluster.nodes[0];
    let mut spec = ReplicaSpec::new("profile-replica", service, preset.clone());
    spec.parallelism = sweep.parallelism;
    spec.cores = sweep.parallelism;
    let replica = start_replica(spec, node, &cluster.client)?;
    let size = size.unwrap_or(0);
    if size > 0 {
        node.launch_enclave(interference_enclave("interference", size, sweep.interference_rate))?;
    }

    let rate = sweep
        .arrival_rate
        .unwrap_or(0.25 * sweep.parallelism as f64 / preset.base_inference_time.as_secs_f64());
    // Long enough for `requests` arrivals; extra arrivals are dropped.
    let workload = WorkloadSpec {
        service_id: service.into(),
        arrival_rate: rate,
        duration: Duration::from_secs_f64(2.0 * sweep.requests as f64 / rate + 1.0),
        rng_seed: sweep.seed,
        payload_size: 64,
    };
    let mut arrivals = generate_arrivals(&workload);
    arrivals.truncate(sweep.requests);
    let factors = generate_work_factors(sweep.seed, preset.work_sigma, arrivals.len());
    let mut filler = payload_rng(sweep.seed);

    let cert = cluster.client.get_certificate(service)?;
    let (hs, hello) = ClientHandshake::start(&cert);
    let (pending, server_hello) = replica.accept(&hello)?;
    let (mut client, finished) = hs.finish(&server_hello).map_err(crate::serving::ServingError::from)?;
    let mut server = pending.finish(&finished).map_err(crate::serving::ServingError::from)?;

    let before = collect(node)?;
    let mut free: BinaryHeap<Reverse<Duration>> = (0..sweep.parallelism).map(|_| Reverse(Duration::ZERO)).collect();
    let mut latencies = Vec::with_capacity(arrivals.len());
    for (a, wf) in arrivals.iter().zip(&factors) {
        let Reverse(slot) = free.pop().expect("parallelism >= 1");
        let start = (*a).max(slot);
        clock.set(start);
        let payload = make_payload(*wf, workload.payload_size, &mut filler);
        let frame = client.seal_record(&encode_inference_request(&payload)).to_frame();
        let job = replica.open_request(&mut server, &frame)?;
        let service_time = replica.start_service(&job);
        let response = replica.complete(&mut server, &job, service_time);
        let plain = client
            .open_record(&Record::from_frame(&response).map_err(crate::serving::ServingError::from)?)
            .map_err(crate::serving::ServingError::from)?;
        decode_inference_response(&plain)?;
        free.push(Reverse(start + service_time));
        latencies.push(start + service_time - *a);
    }
    let end = free.into_iter().map(|Reverse(t)| t).max().unwrap_or_default();
    clock.set(end.max(before.timestamp + Duration::from_millis(1)));
    let after = collect(node)?;
    latencies.sort_unstable();
    let pct = |p| percentile_sorted(&latencies, p).expect("nonempty");
    Ok(ProfilePoint {
        interference_bytes: size,
        paging: paging_between(&before, &after),
        p90: pct(90.0),
        p95: pct(95.0),
        p99: pct(99.0),
    })
}
