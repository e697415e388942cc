use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::{ModelPreset, ServingError};
use crate::aecs::{open_provisioned_pki, provision_request, AecsClient};
use crate::channel::{Certificate, PendingServer, Record, ServerHandshake, ServicePki, Session};
use crate::clock::SharedClock;
use crate::crypto;
use crate::substrate::{EnclaveHandle, EnclaveSpec, Measurement, Node};
use crate::wire::{Reader, Writer};

/// Code identity of the model-server enclave for a preset.
pub fn model_server_measurement(preset: &ModelPreset) -> Measurement {
    Measurement::of_code(format!("model-server/{}", preset.name).as_bytes())
}

#[derive(Debug, Clone)]
pub struct ReplicaSpec {
    pub replica_id: String,
    pub service_id: String,
    pub preset: ModelPreset,
    /// Requests served concurrently.
    pub parallelism: u32,
    /// Cores allotted for utilization accounting.
    pub cores: u32,
    pub measurement: Measurement,
}

impl ReplicaSpec {
    pub fn new(replica_id: impl Into<String>, service_id: impl Into<String>, preset: ModelPreset) -> Self {
        let measurement = model_server_measurement(&preset);
        ReplicaSpec {
            replica_id: replica_id.into(),
            service_id: service_id.into(),
            preset,
            parallelism: 8,
            cores: 8,
            measurement,
        }
    }

    pub fn enclave_spec(&self) -> EnclaveSpec {
        EnclaveSpec::new(
            self.replica_id.clone(),
            self.measurement,
            self.preset.requested_epc_bytes,
            self.preset.working_set_bytes,
            self.preset.page_access_rate,
        )
    }
}

/// Busy intervals of a replica, for utilization estimates.
#[derive(Debug, Default)]
pub struct BusyWindow {
    intervals: VecDeque<(Duration, Duration)>,
}

const BUSY_HORIZON: Duration = Duration::from_secs(300);

impl BusyWindow {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `[start, end)`. Intervals may extend into the future.
    pub fn record(&mut self, start: Duration, end: Duration) {
        self.intervals.push_back((start, end));
        let cutoff = start.saturating_sub(BUSY_HORIZON);
        while self.intervals.front().is_some_and(|&(_, e)| e < cutoff) {
            self.intervals.pop_front();
        }
    }

    /// Busy time inside `[now - window, now]`.
    pub fn busy_time(&self, now: Duration, window: Duration) -> Duration {
        let lo = now.saturating_sub(window);
        self.intervals
            .iter()
            .map(|&(s, e)| e.min(now).saturating_sub(s.max(lo)))
            .sum()
    }

    pub fn utilization(&self, now: Duration, window: Duration, cores: u32) -> f64 {
        if window.is_zero() || cores == 0 {
            return 0.0;
        }
        let u = self.busy_time(now, window).as_secs_f64() / (window.as_secs_f64() * cores as f64);
        u.clamp(0.0, 1.0)
    }
}

/// A decrypted inference request accepted by a replica.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceJob {
    pub payload: Vec<u8>,
}

impl InferenceJob {
    /// The stub's cost multiplier, carried in the first eight bytes of the
    /// input (little-endian `f64`); 1.0 when absent or not positive.
    pub fn work_factor(&self) -> f64 {
        self.payload
            .get(..8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .filter(|f| f.is_finite() && *f > 0.0)
            .unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceResponse {
    pub output: Vec<u8>,
    pub service_time: Duration,
}

pub fn encode_inference_request(payload: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(payload);
    w.into_inner()
}

pub fn decode_inference_response(bytes: &[u8]) -> Result<InferenceResponse, ServingError> {
    let mut r = Reader::new(bytes);
    let output = r.bytes()?.to_vec();
    let micros = r.u64()?;
    r.finish()?;
    Ok(InferenceResponse {
        output,
        service_time: Duration::from_micros(micros),
    })
}

/// An enclave-hosted model server holding its service's PKI.
#[derive(Debug)]
pub struct ModelServerReplica {
    spec: ReplicaSpec,
    enclave: EnclaveHandle,
    pki: ServicePki,
    clock: SharedClock,
    active: AtomicU32,
    busy: Mutex<BusyWindow>,
    slots: Mutex<u32>,
    slot_freed: Condvar,
}

/// Launches the replica's enclave and provisions its PKI from AECS.
pub fn start_replica(spec: ReplicaSpec, node: &Node, aecs: &AecsClient) -> Result<ModelServerReplica, ServingError> {
    let enclave = node
        .launch_enclave(spec.enclave_spec())
        .map_err(ServingError::EnclaveLaunchFailed)?;
    let provisioned = (|| {
        let (temp, req) = provision_request(&enclave, &spec.service_id)?;
        let ct = aecs.provision_pki(&req)?;
        open_provisioned_pki(temp, &spec.service_id, &ct)
    })();
    let pki = match provisioned {
        Ok(pki) => pki,
        Err(e) => {
            let _ = enclave.terminate();
            return Err(ServingError::ProvisioningFailed(e));
        }
    };
    Ok(ModelServerReplica {
        slots: Mutex::new(spec.parallelism),
        spec,
        enclave,
        pki,
        clock: node.clock().clone(),
        active: AtomicU32::new(0),
        busy: Mutex::new(BusyWindow::new()),
        slot_freed: Condvar::new(),
    })
}

impl ModelServerReplica {
    pub fn replica_id(&self) -> &str {
        &self.spec.replica_id
    }

    pub fn spec(&self) -> &ReplicaSpec {
        &self.spec
    }

    pub fn enclave(&self) -> &EnclaveHandle {
        &self.enclave
    }

    pub fn node(&self) -> &Node {
        self.enclave.node()
    }

    pub fn certificate(&self) -> &Certificate {
        self.pki.certificate()
    }

    pub fn is_serving(&self) -> bool {
        self.enclave.is_running()
    }

    /// Stops the enclave, as on a crash or a scale-down.
    pub fn stop(&self) {
        let _ = self.enclave.terminate();
    }

    pub fn active_connections(&self) -> u32 {
        self.active.load(Ordering::SeqCst)
    }

    /// Test hook: the provisioned PKI, for comparisons inside the boundary.
    pub fn pki(&self) -> &ServicePki {
        &self.pki
    }

    fn ensure_serving(&self) -> Result<(), ServingError> {
        if self.is_serving() {
            Ok(())
        } else {
            Err(ServingError::NotServing)
        }
    }

    /// Server half of a handshake.
    pub fn accept(&self, client_hello: &[u8]) -> Result<(PendingServer, Vec<u8>), ServingError> {
        self.ensure_serving()?;
        Ok(ServerHandshake::respond(&self.pki, client_hello)?)
    }

    /// Decrypts a request record and opens a connection slot.
    pub fn open_request(&self, session: &mut Session, frame: &[u8]) -> Result<InferenceJob, ServingError> {
        self.ensure_serving()?;
        let record = Record::from_frame(frame)?;
        let plaintext = session.open_record(&record)?;
        let mut r = Reader::new(&plaintext);
        let payload = r.bytes()?.to_vec();
        r.finish()?;
        self.active.fetch_add(1, Ordering::SeqCst);
        Ok(InferenceJob { payload })
    }

    /// Starts computing `job` now; returns its service time under the node's
    /// current paging.
    pub fn start_service(&self, job: &InferenceJob) -> Duration {
        let base = self.spec.preset.base_inference_time.mul_f64(job.work_factor());
        let service_time = self.node().inflate(base);
        let now = self.clock.now();
        self.busy
            .lock()
            .expect("busy window poisoned")
            .record(now, now + service_time);
        service_time
    }

    /// Encrypts the response and closes the connection slot.
    pub fn complete(&self, session: &mut Session, job: &InferenceJob, service_time: Duration) -> Vec<u8> {
        let output = crypto::sha256(&[&job.payload]);
        let mut w = Writer::new();
        w.bytes(&output).u64(service_time.as_micros() as u64);
        let frame = session.seal_record(&w.into_inner()).to_frame();
        self.active.fetch_sub(1, Ordering::SeqCst);
        frame
    }

    /// Closes the slot of a request dropped before service, e.g. because the
    /// client timed out while it was queued.
    pub fn abandon(&self, _job: &InferenceJob) {
        self.active.fetch_sub(1, Ordering::SeqCst);
    }

    /// Serves one request end to end, blocking for the service time and
    /// waiting for a free slot when all are busy.
    pub fn serve_inference(&self, session: &mut Session, frame: &[u8]) -> Result<Vec<u8>, ServingError> {
        let job = self.open_request(session, frame)?;
        {
            let mut free = self.slots.lock().expect("slots poisoned");
            while *free == 0 {
                free = self.slot_freed.wait(free).expect("slots poisoned");
            }
            *free -= 1;
        }
        let service_time = self.start_service(&job);
        self.clock.sleep(service_time);
        *self.slots.lock().expect("slots poisoned") += 1;
        self.slot_freed.notify_one();
        Ok(self.complete(session, &job, service_time))
    }

    pub fn utilization(&self, window: Duration) -> f64 {
        self.busy
            .lock()
            .expect("busy window poisoned")
            .utilization(self.clock.now(), window, self.spec.cores)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::aecs::{self, AecsConfig, AecsDirectory, AecsStats, LocalDisk, Loopback, MemoryStore};
    use crate::channel::ClientHandshake;
    use crate::clock::VirtualClock;
    use crate::substrate::{NodeSpec, PlatformRegistry, MIB};

    struct Fixture {
        clock: VirtualClock,
        client: AecsClient,
        nodes: Vec<Node>,
        preset: ModelPreset,
    }

    fn fixture() -> Fixture {
        let clock = VirtualClock::new();
        let shared: SharedClock = Arc::new(clock.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let registry = PlatformRegistry::new();
        let nodes: Vec<Node> = (0..4)
            .map(|i| {
                let n = Node::new(NodeSpec::generate(format!("n{i}"), &mut rng), shared.clone()).unwrap();
                registry.register(&n);
                n
            })
            .collect();
        let aecs_enclave = nodes[3]
            .launch_enclave(EnclaveSpec::new(
                "aecs-0",
                aecs::aecs_measurement(),
                16 * MIB,
                4 * MIB,
                0.0,
            ))
            .unwrap();
        let replica = aecs::bootstrap(
            aecs_enclave,
            Arc::new(MemoryStore::new()),
            &LocalDisk::memory(),
            &AecsClient::new(Arc::new(Loopback::new(AecsDirectory::new()))),
            AecsConfig::new(registry),
            shared,
            Arc::new(AecsStats::default()),
        )
        .unwrap();
        let dir = AecsDirectory::new();
        dir.add(Arc::new(replica));
        let client = AecsClient::new(Arc::new(Loopback::new(dir)));
        let preset = ModelPreset::by_name("mobilenet-v1-quant").unwrap();
        client
            .create_service_pki("svc", model_server_measurement(&preset))
            .unwrap();
        Fixture {
            clock,
            client,
            nodes,
            preset,
        }
    }

    fn session_pair(replica: &ModelServerReplica, cert: &Certificate) -> (Session, Session) {
        let (hs, hello) = ClientHandshake::start(cert);
        let (pending, server_hello) = replica.accept(&hello).unwrap();
        let (client, finished) = hs.finish(&server_hello).unwrap();
        (client, pending.finish(&finished).unwrap())
    }

    #[test]
    fn replicas_share_one_certificate_and_fail_over() {
        let f = fixture();
        let replicas: Vec<_> = (0..3)
            .map(|i| {
                let spec = ReplicaSpec::new(format!("svc-{i}"), "svc", f.preset.clone());
                start_replica(spec, &f.nodes[i], &f.client).unwrap()
            })
            .collect();
        let cert = f.client.get_certificate("svc").unwrap();
        for r in &replicas {
            assert_eq!(r.certificate().to_bytes(), cert.to_bytes());
            assert!(r.pki().same_key_as(replicas[0].pki()));
        }
        for r in &replicas {
            let (mut c, mut s) = session_pair(r, &cert);
            let req = c.seal_record(&encode_inference_request(b"img")).to_frame();
            let resp = r.serve_inference(&mut s, &req).unwrap();
            let out = decode_inference_response(&c.open_record(&Record::from_frame(&resp).unwrap()).unwrap()).unwrap();
            assert_eq!(out.output, crypto::sha256(&[b"img"]).to_vec());
            assert_eq!(r.active_connections(), 0);
        }
    }

    #[test]
    fn rogue_measurement_is_refused() {
        let f = fixture();
        let mut spec = ReplicaSpec::new("svc-x", "svc", f.preset.clone());
        spec.measurement = Measurement::of_code(b"tampered");
        let err = start_replica(spec, &f.nodes[0], &f.client).unwrap_err();
        assert_eq!(
            err,
            ServingError::ProvisioningFailed(crate::aecs::AecsError::AttestationMismatch)
        );
        assert!(f.nodes[0].enclaves().is_empty());
    }

    #[test]
    fn restart_after_crash_reuses_certificate() {
        let f = fixture();
        let spec = ReplicaSpec::new("svc-0", "svc", f.preset.clone());
        let r = start_replica(spec.clone(), &f.nodes[0], &f.client).unwrap();
        let before = r.certificate().clone();
        r.stop();
        assert!(!r.is_serving());
        assert!(matches!(r.accept(&[]), Err(ServingError::NotServing)));
        let r2 = start_replica(spec, &f.nodes[0], &f.client).unwrap();
        assert_eq!(r2.certificate(), &before);
    }

    #[test]
    fn service_time_follows_node_paging() {
        let f = fixture();
        let mut preset = f.preset.clone();
        preset.base_inference_time = Duration::from_millis(20);
        preset.working_set_bytes = 0;
        preset.page_access_rate = 0.0;
        f.client
            .create_service_pki("svc20", model_server_measurement(&preset))
            .unwrap();
        let r = start_replica(ReplicaSpec::new("m", "svc20", preset), &f.nodes[1], &f.client).unwrap();
        let job = InferenceJob { payload: vec![] };
        assert_eq!(r.start_service(&job), Duration::from_millis(20));
        // 186 MiB working set on a 93 MiB node: half overflows, 2e4 accesses/s.
        f.nodes[1]
            .launch_enclave(EnclaveSpec::new(
                "stress",
                Measurement::of_code(b"stress"),
                186 * MIB,
                186 * MIB,
                2.0e4,
            ))
            .unwrap();
        assert_eq!(r.start_service(&job), Duration::from_millis(100));
        let doubled = InferenceJob {
            payload: 2.0f64.to_le_bytes().to_vec(),
        };
        assert_eq!(r.start_service(&doubled), Duration::from_millis(200));
    }

    #[test]
    fn utilization_arithmetic() {
        let mut w = BusyWindow::new();
        let ms = Duration::from_millis;
        for i in 0..50 {
            w.record(ms(40 * i), ms(40 * i + 20));
        }
        assert!((w.utilization(ms(2000), ms(2000), 1) - 0.5).abs() < 1e-12);
        assert_eq!(w.utilization(ms(2000), ms(2000), 0), 0.0);
        let mut busy = BusyWindow::new();
        busy.record(ms(0), ms(5000));
        assert_eq!(busy.utilization(ms(3000), ms(1000), 1), 1.0);
        assert_eq!(BusyWindow::new().utilization(ms(3000), ms(1000), 4), 0.0);
    }

    #[test]
    fn concurrent_requests_drain_to_zero() {
        let f = fixture();
        let r = Arc::new(
            start_replica(
                ReplicaSpec::new("svc-0", "svc", f.preset.clone()),
                &f.nodes[0],
                &f.client,
            )
            .unwrap(),
        );
        let cert = r.certificate().clone();
        let handles: Vec<_> = (0..6)
            .map(|t| {
                let r = r.clone();
                let cert = cert.clone();
                std::thread::spawn(move || {
                    let (mut c, mut s) = session_pair(&r, &cert);
                    for k in 0..20u8 {
                        let body = [t, k];
                        let req = c.seal_record(&encode_inference_request(&body)).to_frame();
                        let resp = r.serve_inference(&mut s, &req).unwrap();
                        let plain = c.open_record(&Record::from_frame(&resp).unwrap()).unwrap();
                        assert_eq!(
                            decode_inference_response(&plain).unwrap().output,
                            crypto::sha256(&[&body])
                        );
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(r.active_connections(), 0);
        f.clock.advance(Duration::from_secs(1));
        assert!(r.utilization(Duration::from_secs(1)) > 0.0);
    }
}
