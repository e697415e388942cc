//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use enclave_serve::aecs::{
    self, provision_request, AecsClient, AecsConfig, AecsDirectory, AecsReplica, AecsStats, BootstrapPath, LocalDisk,
    Loopback, MemoryStore, ProvisionRequest, UntrustedStore,
};
use enclave_serve::channel::{ClientHandshake, ServicePki};
use enclave_serve::clock::{RealClock, SharedClock};
use enclave_serve::harness::Scenario;
use enclave_serve::serving::{Algorithm, EndpointView};
use enclave_serve::substrate::{
    EnclaveReport, EnclaveSpec, Measurement, Node, NodeId, NodeSpec, PlatformRegistry, MIB,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(format!("{name}.toml"))).expect("scenario loads")
}

/// Every scenario file, sorted by name.
pub fn all_scenarios() -> Vec<Scenario> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(scenarios_dir())
        .expect("scenarios dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Scenario::load(p).expect("scenario loads"))
        .collect()
}

pub const MODELS: [&str; 4] = [
    "mobilenet-v1-float",
    "mobilenet-v1-quant",
    "efficientnet-lite-float",
    "efficientnet-lite-quant",
];

// ---- schedulers ----

/// Brute-force scheduling rules, written independently of the crate.
pub fn reference_pick(alg: Algorithm, eps: &[EndpointView], last: Option<usize>) -> Option<usize> {
    let n = eps.len();
    let eligible: Vec<usize> = (0..n).filter(|&i| eps[i].weight > 0).collect();
    if eligible.is_empty() {
        return None;
    }
    match alg {
        Algorithm::RoundRobin => {
            // Walk the ring starting just after the previous pick.
            let first = match last {
                None => 0,
                Some(l) => l + 1,
            };
            (0..n).map(|k| (first + k) % n).find(|i| eligible.contains(i))
        }
        Algorithm::LeastConnection => {
            let min = eligible.iter().map(|&i| eps[i].conns).min().unwrap();
            eligible.into_iter().find(|&i| eps[i].conns == min)
        }
        Algorithm::ShortestExpectedDelay => eligible.iter().copied().find(|&i| {
            eligible.iter().all(|&j| {
                // delay_i <= delay_j  <=>  (c_i+1)/w_i <= (c_j+1)/w_j
                (eps[i].conns as u128 + 1) * eps[j].weight as u128 <= (eps[j].conns as u128 + 1) * eps[i].weight as u128
            })
        }),
    }
}

// ---- controller ----

/// Per-endpoint input at one sampling instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStep {
    /// `None` models missing telemetry.
    pub paging: Option<f64>,
    pub interference_free: bool,
}

/// Reference weight automaton: look back over the whole history instead of
/// keeping a counter.
pub fn reference_weights(trace: &[TraceStep], threshold: f64, n: usize) -> Vec<u32> {
    let mut weight = 1u32;
    let mut out = Vec::with_capacity(trace.len());
    for t in 0..trace.len() {
        let above_run = t + 1 >= n
            && trace[t + 1 - n..=t]
                .iter()
                .all(|s| matches!(s.paging, Some(p) if p > threshold));
        let s = trace[t];
        if s.paging.is_some() {
            if weight == 0 && s.interference_free {
                weight = 1;
            } else if weight > 0 && above_run {
                weight = 0;
            }
        }
        out.push(weight);
    }
    out
}

/// Random trace biased to hover around `threshold`, with gaps and
/// interference toggles.
pub fn random_trace(rng: &mut impl Rng, threshold: f64, len: usize) -> Vec<TraceStep> {
    let mut busy = rng.random_bool(0.5);
    (0..len)
        .map(|_| {
            if rng.random_bool(0.1) {
                busy = !busy;
            }
            let paging = if rng.random_bool(0.05) {
                None
            } else if busy {
                Some(threshold * rng.random_range(0.8..3.0))
            } else {
                Some(threshold * rng.random_range(0.0..1.2))
            };
            TraceStep {
                paging,
                interference_free: !busy && rng.random_bool(0.8),
            }
        })
        .collect()
}

/// Whether the trace ever has `n` consecutive present samples above
/// `threshold`.
pub fn has_run_above(trace: &[TraceStep], threshold: f64, n: usize) -> bool {
    trace
        .windows(n)
        .any(|w| w.iter().all(|s| matches!(s.paging, Some(p) if p > threshold)))
}

// ---- AECS ----

pub struct AecsDeployment {
    pub clock: SharedClock,
    pub registry: PlatformRegistry,
    pub nodes: Vec<Node>,
    pub disks: Vec<LocalDisk>,
    pub store: Arc<dyn UntrustedStore>,
    pub stats: Arc<AecsStats>,
    pub directory: AecsDirectory,
    pub client: AecsClient,
}

impl AecsDeployment {
    pub fn new(seed: u64, replicas: usize) -> Self {
        let clock: SharedClock = Arc::new(RealClock::new());
        let registry = PlatformRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: Vec<Node> = (0..replicas)
            .map(|i| {
                let n = Node::new(NodeSpec::generate(format!("aecs-{i}"), &mut rng), clock.clone()).unwrap();
                registry.register(&n);
                n
            })
            .collect();
        let directory = AecsDirectory::new();
        AecsDeployment {
            clock,
            registry,
            disks: (0..replicas).map(|_| LocalDisk::memory()).collect(),
            nodes,
            store: Arc::new(MemoryStore::new()),
            stats: Arc::default(),
            client: AecsClient::new(Arc::new(Loopback::new(directory.clone()))),
            directory,
        }
    }

    /// Launches and bootstraps every replica concurrently, releasing them
    /// from a barrier. Replicas join the directory as they come up.
    pub fn bootstrap_all(&self) -> Vec<Arc<AecsReplica>> {
        let barrier = Barrier::new(self.nodes.len());
        let mut config = AecsConfig::new(self.registry.clone());
        config.fetch_interval = Duration::from_millis(1);
        config.fetch_attempts = 5000;
        thread::scope(|s| {
            let handles: Vec<_> = self
                .nodes
                .iter()
                .zip(&self.disks)
                .map(|(node, disk)| {
                    let (barrier, config) = (&barrier, config.clone());
                    s.spawn(move || {
                        let enclave = node
                            .launch_enclave(EnclaveSpec::new(
                                "aecs",
                                aecs::aecs_measurement(),
                                32 * MIB,
                                4 * MIB,
                                0.0,
                            ))
                            .unwrap();
                        barrier.wait();
                        let r = Arc::new(
                            aecs::bootstrap(
                                enclave,
                                self.store.clone(),
                                disk,
                                &self.client,
                                config,
                                self.clock.clone(),
                                self.stats.clone(),
                            )
                            .unwrap(),
                        );
                        self.directory.add(r.clone());
                        r
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        })
    }

    /// Stops every replica, as in a full-cluster outage.
    pub fn shut_down(&self, replicas: &[Arc<AecsReplica>]) {
        for r in replicas {
            r.enclave().terminate().unwrap();
        }
        self.directory.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceOutcome {
    pub generations: u64,
    pub keys_agree: bool,
    pub generated: usize,
}

pub fn bootstrap_race(seed: u64) -> RaceOutcome {
    let d = AecsDeployment::new(seed, 3);
    let replicas = d.bootstrap_all();
    let fp = replicas[0].storage_key().fingerprint();
    RaceOutcome {
        generations: d.stats.key_generations(),
        keys_agree: replicas.iter().all(|r| r.storage_key().fingerprint() == fp),
        generated: replicas
            .iter()
            .filter(|r| r.bootstrap_path() == BootstrapPath::Generated)
            .count(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrillOutcome {
    pub paths: Vec<BootstrapPath>,
    pub ra_fetches_during_restart: u64,
    pub services_recovered: bool,
    pub same_storage_key: bool,
}

/// Bootstraps, registers two services, restarts every replica from its
/// sealed copy, and checks the service map survived.
pub fn restart_drill(seed: u64) -> DrillOutcome {
    let d = AecsDeployment::new(seed, 3);
    let first = d.bootstrap_all();
    let fp = first[0].storage_key().fingerprint();
    let services = ["svc-a", "svc-b"];
    let certs: Vec<_> = services
        .iter()
        .map(|s| {
            d.client
                .create_service_pki(s, Measurement::of_code(s.as_bytes()))
                .unwrap()
        })
        .collect();
    d.shut_down(&first);

    let before = d.stats.ra_fetches();
    let second = d.bootstrap_all();
    let ra = d.stats.ra_fetches() - before;
    let recovered = services
        .iter()
        .zip(&certs)
        .all(|(s, c)| d.client.get_certificate(s).ok().as_ref() == Some(c));
    DrillOutcome {
        paths: second.iter().map(|r| r.bootstrap_path()).collect(),
        ra_fetches_during_restart: ra,
        services_recovered: recovered,
        same_storage_key: second.iter().all(|r| r.storage_key().fingerprint() == fp),
    }
}

// ---- attestation forgery ----

/// Target for forged provisioning requests: one AECS replica holding one
/// service, plus a genuine requester enclave.
pub struct ForgeryTarget {
    pub deployment: AecsDeployment,
    pub aecs: Arc<AecsReplica>,
    pub genuine: ProvisionRequest,
    /// An enclave with a different measurement on a registered node.
    pub impostor: enclave_serve::substrate::EnclaveHandle,
    /// A node whose platform key is not registered.
    pub rogue: Node,
    pub service: String,
    pub measurement: Measurement,
}

impl ForgeryTarget {
    pub fn new(seed: u64) -> Self {
        let deployment = AecsDeployment::new(seed, 1);
        let aecs = deployment.bootstrap_all().remove(0);
        let service = "svc".to_string();
        let measurement = Measurement::of_code(b"model-server");
        deployment.client.create_service_pki(&service, measurement).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0);
        let worker = Node::new(NodeSpec::generate("worker", &mut rng), deployment.clock.clone()).unwrap();
        deployment.registry.register(&worker);
        let genuine_enclave = worker
            .launch_enclave(EnclaveSpec::new("server", measurement, MIB, MIB, 0.0))
            .unwrap();
        let (_, genuine) = provision_request(&genuine_enclave, &service).unwrap();
        let impostor = worker
            .launch_enclave(EnclaveSpec::new(
                "impostor",
                Measurement::of_code(b"evil"),
                MIB,
                MIB,
                0.0,
            ))
            .unwrap();
        // Same node name as the registered worker, different platform key.
        let rogue = Node::new(NodeSpec::generate("worker", &mut rng), deployment.clock.clone()).unwrap();
        ForgeryTarget {
            deployment,
            aecs,
            genuine,
            impostor,
            rogue,
            service,
            measurement,
        }
    }

    pub fn accepts(&self, req: &ProvisionRequest) -> bool {
        self.aecs.provision_pki(req).is_ok()
    }

    /// The `i`-th forged request. Every variant differs from anything the
    /// genuine enclave could have produced for its own key.
    pub fn forge(&self, rng: &mut impl Rng) -> ProvisionRequest {
        let mut req = self.genuine.clone();
        match rng.random_range(0..8) {
            0 => {
                // Flip bits anywhere in the serialized report.
                let mut bytes = req.report.to_bytes();
                let k = rng.random_range(1..=4);
                for _ in 0..k {
                    let i = rng.random_range(0..bytes.len());
                    bytes[i] ^= rng.random_range(1..=255u8);
                }
                match EnclaveReport::from_bytes(&bytes) {
                    Ok(r) if r != self.genuine.report => req.report = r,
                    _ => req.report.platform_tag[0] ^= 0x80,
                }
            }
            1 => {
                let i = rng.random_range(0..32);
                req.report.platform_tag[i] ^= rng.random_range(1..=255u8);
            }
            2 => {
                // Claim the expected measurement on someone else's tag.
                let r = self.impostor.create_report(req.report.report_data).unwrap();
                req.report = EnclaveReport {
                    measurement: self.measurement,
                    ..r
                };
            }
            3 => {
                // Honest report from the wrong code.
                req.report = self.impostor.create_report(req.report.report_data).unwrap();
            }
            4 => {
                // Replay the genuine report with a key the enclave never bound.
                let i = rng.random_range(0..32);
                req.temp_public_key[i] ^= rng.random_range(1..=255u8);
            }
            5 => {
                // Signed by an unregistered platform posing as the worker.
                let e = self
                    .rogue
                    .launch_enclave(EnclaveSpec::new(
                        format!("rogue-{}", rng.random::<u64>()),
                        self.measurement,
                        MIB,
                        MIB,
                        0.0,
                    ))
                    .unwrap();
                req.report = e.create_report(req.report.report_data).unwrap();
                e.terminate().unwrap();
            }
            6 => {
                req.report.node_id = NodeId::new(format!("node-{}", rng.random_range(0..1000)));
            }
            _ => {
                rng.fill(&mut req.report.platform_tag);
                rng.fill(&mut req.report.report_data);
            }
        }
        req
    }
}

// ---- secure channel ----

pub fn session_pair(pki: &ServicePki) -> (enclave_serve::channel::Session, enclave_serve::channel::Session) {
    let (hs, hello) = ClientHandshake::start(pki.certificate());
    let (pending, server_hello) = enclave_serve::channel::ServerHandshake::respond(pki, &hello).unwrap();
    let (client, finished) = hs.finish(&server_hello).unwrap();
    let server = pending.finish(&finished).unwrap();
    (client, server)
}

/// Mutates `frame` so that it differs from the original.
pub fn tamper(frame: &[u8], rng: &mut impl Rng) -> Vec<u8> {
    let mut f = frame.to_vec();
    match rng.random_range(0..3) {
        0 => {
            let i = rng.random_range(0..f.len());
            f[i] ^= rng.random_range(1..=255u8);
        }
        1 => {
            f.truncate(rng.random_range(0..f.len()));
        }
        _ => {
            let extra = rng.random_range(1..16);
            f.extend((0..extra).map(|_| rng.random::<u8>()));
        }
    }
    f
}
