//! Wall-clock execution over loopback TCP. Each replica listens on its own
//! port; every request opens a connection, handshakes, and sends one sealed
//! record. Supports the SLO controller, interference and crashes; scale
//! policies need the virtual-clock runner.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::report::{EpcRow, ReplicaEvent, RequestRecord, RequestStatus, RunReport, WeightEvent};
use super::{
    generate_arrivals, generate_work_factors, make_payload, payload_rng, Cluster, HarnessError, LbMode, Percentiles,
    Scenario,
};
use crate::channel::{Certificate, ClientHandshake, Record, TcpTransport, Transport};
use crate::clock::{Clock, RealClock, SharedClock};
use crate::control::{self, collect, interference_enclave, observe, SloController, Telemetry};
use crate::serving::{
    decode_inference_response, encode_inference_request, model_server_measurement, start_replica, Frontend,
    ModelServerReplica, ReplicaSpec,
};
use crate::substrate::{NodeId, MIB};

struct Outcome {
    endpoint: Option<String>,
    status: RequestStatus,
    complete: Option<Duration>,
}

fn serve_connection(replica: &ModelServerReplica, stream: TcpStream, timeout: Duration) -> Option<()> {
    let mut t = TcpTransport::new(stream, Some(timeout)).ok()?;
    let hello = t.recv().ok()?;
    let (pending, server_hello) = replica.accept(&hello).ok()?;
    t.send(&server_hello).ok()?;
    let finished = t.recv().ok()?;
    let mut session = pending.finish(&finished).ok()?;
    loop {
        let frame = t.recv().ok()?;
        let response = replica.serve_inference(&mut session, &frame).ok()?;
        t.send(&response).ok()?;
    }
}

fn listen(replica: Arc<ModelServerReplica>, stop: Arc<AtomicBool>, timeout: Duration) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let replica = replica.clone();
                    thread::spawn(move || serve_connection(&replica, stream, timeout));
                }
                Err(_) => thread::sleep(Duration::from_millis(1)),
            }
        }
    });
    Ok(addr)
}

/// One request over a fresh connection. Returns `None` on a connection-level
/// failure and `Some(false)` on timeout.
fn request(addr: SocketAddr, cert: &Certificate, payload: &[u8], budget: Duration) -> Option<bool> {
    let stream = TcpStream::connect_timeout(&addr, budget).ok()?;
    let mut t = TcpTransport::new(stream, Some(budget)).ok()?;
    let (hs, hello) = ClientHandshake::start(cert);
    t.send(&hello).ok()?;
    let server_hello = t.recv().ok()?;
    let (mut session, finished) = hs.finish(&server_hello).ok()?;
    t.send(&finished).ok()?;
    t.send(&session.seal_record(&encode_inference_request(payload)).to_frame())
        .ok()?;
    match t.recv() {
        Ok(frame) => {
            let record = Record::from_frame(&frame).ok()?;
            let plain = session.open_record(&record).ok()?;
            decode_inference_response(&plain).ok()?;
            Some(true)
        }
        Err(crate::channel::TransportError::Timeout) => Some(false),
        Err(_) => None,
    }
}

enum Step {
    Sample,
    Interference { script: usize, window: usize, on: bool },
    Crash(String),
}

pub fn run_real(scenario: &Scenario, boundary: Option<f64>) -> Result<RunReport, HarnessError> {
    scenario.validate()?;
    if scenario.scale_policy.is_some() {
        return Err(HarnessError::ConfigInvalid(
            "scale policies are only supported with the virtual clock".into(),
        ));
    }
    let preset = scenario.preset()?;
    let clock = RealClock::new();
    let shared: SharedClock = Arc::new(clock.clone());
    let cluster = Cluster::build(&scenario.cluster, shared, scenario.seed, scenario.validity())?;
    let service = scenario.service.id.clone();
    cluster
        .client
        .create_service_pki(&service, model_server_measurement(&preset))?;
    let cert = cluster.client.get_certificate(&service)?;
    let mode = scenario.service.algorithm;
    let frontend = Frontend::new(service.clone(), mode.algorithm());
    let timeout = scenario.timeout();
    let stop = Arc::new(AtomicBool::new(false));

    let mut replicas = BTreeMap::new();
    let mut addrs = BTreeMap::new();
    let mut replica_events = Vec::new();
    for (k, node) in scenario.placement().iter().enumerate() {
        let id = scenario.replica_id(k);
        let node_id = NodeId::new(node.clone());
        let mut spec = ReplicaSpec::new(id.clone(), service.clone(), preset.clone());
        spec.parallelism = scenario.service.parallelism;
        spec.cores = scenario.service.parallelism;
        let node = cluster.node(&node_id).expect("validated placement");
        let replica = Arc::new(start_replica(spec, node, &cluster.client)?);
        let addr = listen(replica.clone(), stop.clone(), timeout).map_err(|e| HarnessError::Io(e.to_string()))?;
        frontend.add_endpoint(id.clone(), node_id.clone());
        replica_events.push(ReplicaEvent {
            ts: clock.now(),
            replica: id.clone(),
            node: node_id.to_string(),
            action: "start".into(),
        });
        replicas.insert(id.clone(), replica);
        addrs.insert(id, addr);
    }

    let mut controller = match (mode, scenario.slo_policy(boundary.unwrap_or(0.0))) {
        (LbMode::SgxAware, Some(policy)) => {
            if boundary.is_none() {
                return Err(HarnessError::ConfigInvalid("sgx-aware run without a boundary".into()));
            }
            Some(SloController::new(policy)?)
        }
        _ => None,
    };

    let mut timeline: Vec<(Duration, Step)> = Vec::new();
    let interval = scenario.sample_interval();
    let mut t = interval;
    while t <= scenario.duration() + timeout {
        timeline.push((t, Step::Sample));
        t += interval;
    }
    for (script, s) in scenario.interference.iter().enumerate() {
        for (window, w) in s.windows_ms.iter().enumerate() {
            timeline.push((
                Duration::from_millis(w[0]),
                Step::Interference {
                    script,
                    window,
                    on: true,
                },
            ));
            timeline.push((
                Duration::from_millis(w[1]),
                Step::Interference {
                    script,
                    window,
                    on: false,
                },
            ));
        }
    }
    for c in &scenario.crashes {
        timeline.push((Duration::from_millis(c.at_ms), Step::Crash(c.replica.clone())));
    }
    timeline.sort_by_key(|(t, _)| *t);

    let spec = scenario.workload_spec();
    let arrivals = generate_arrivals(&spec);
    let factors = generate_work_factors(scenario.seed, preset.work_sigma, arrivals.len());
    let mut filler = payload_rng(scenario.seed);
    let payloads: Vec<Vec<u8>> = factors
        .iter()
        .map(|wf| make_payload(*wf, spec.payload_size, &mut filler))
        .collect();

    let outcomes: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..arrivals.len()).map(|_| None).collect());
    let base = clock.now();
    let mut epc = Vec::new();
    let mut weight_events = Vec::new();

    thread::scope(|scope| {
        let control = scope.spawn(|| {
            let mut telemetry = Telemetry::new();
            for (t, step) in timeline {
                sleep_until(&clock, base + t);
                match step {
                    Step::Sample => {
                        for node in &cluster.nodes {
                            match collect(node) {
                                Ok(sample) => {
                                    epc.push(EpcRow {
                                        ts: sample.timestamp - base,
                                        node: sample.node_id.to_string(),
                                        pages_in: sample.pages_in_total,
                                        pages_out: sample.pages_out_total,
                                        enclaves_json: serde_json::to_string(&sample.enclaves).expect("serializable"),
                                    });
                                    let _ = telemetry.record(sample);
                                }
                                Err(_) => telemetry.record_gap(node.id()),
                            }
                        }
                        if let Some(c) = controller.as_mut() {
                            let changes = c.step(&observe(&frontend, &telemetry, &[]));
                            let _ = control::actuate(&frontend, &changes);
                            for ch in changes {
                                let conns = frontend.endpoint(&ch.replica_id).map_or(0, |e| e.conns);
                                let util = replicas.get(&ch.replica_id).map_or(0.0, |r| r.utilization(interval));
                                weight_events.push(WeightEvent {
                                    ts: clock.now() - base,
                                    endpoint: ch.replica_id,
                                    weight: ch.to,
                                    conns,
                                    util,
                                    source: "controller".into(),
                                });
                            }
                        }
                    }
                    Step::Interference { script, window, on } => {
                        let s = &scenario.interference[script];
                        let node = cluster.node(&NodeId::new(s.node.clone())).expect("validated node");
                        let id = format!("interference-{script}-{window}");
                        let _ = if on {
                            node.launch_enclave(interference_enclave(id, s.epc_mib * MIB, s.access_rate))
                                .map(|_| ())
                        } else {
                            node.terminate_enclave(&id.as_str().into())
                        };
                    }
                    Step::Crash(id) => {
                        if let Some(r) = replicas.get(&id) {
                            r.stop();
                            replica_events.push(ReplicaEvent {
                                ts: clock.now() - base,
                                replica: id,
                                node: r.node().id().to_string(),
                                action: "crash".into(),
                            });
                        }
                    }
                }
            }
        });

        for (i, (&at, payload)) in arrivals.iter().zip(&payloads).enumerate() {
            sleep_until(&clock, base + at);
            let (frontend, addrs, cert, outcomes, clock) = (&frontend, &addrs, &cert, &outcomes, &clock);
            scope.spawn(move || {
                let deadline = base + at + timeout;
                let outcome = match frontend.dispatch() {
                    Err(_) => Outcome {
                        endpoint: None,
                        status: RequestStatus::Unroutable,
                        complete: None,
                    },
                    Ok(d) => {
                        let budget = deadline.saturating_sub(clock.now()).max(Duration::from_millis(1));
                        let result = request(addrs[&d.replica_id], cert, payload, budget);
                        let done = clock.now();
                        let _ = frontend.complete(&d.replica_id);
                        let (status, complete) = match result {
                            Some(true) if done <= deadline => (RequestStatus::Completed, Some(done - base)),
                            Some(_) => (RequestStatus::TimedOut, None),
                            None => (RequestStatus::Unroutable, None),
                        };
                        Outcome {
                            endpoint: Some(d.replica_id),
                            status,
                            complete,
                        }
                    }
                };
                outcomes.lock().expect("outcomes poisoned")[i] = Some(outcome);
            });
        }
        control.join().expect("control thread panicked");
    });
    stop.store(true, Ordering::SeqCst);
    for r in replicas.values() {
        r.stop();
    }

    let requests = outcomes
        .into_inner()
        .expect("outcomes poisoned")
        .into_iter()
        .zip(&arrivals)
        .enumerate()
        .map(|(i, (o, &send))| {
            let o = o.unwrap_or(Outcome {
                endpoint: None,
                status: RequestStatus::InFlight,
                complete: None,
            });
            RequestRecord {
                id: i as u64,
                send,
                complete: o.complete,
                endpoint: o.endpoint,
                latency: o.complete.map_or(timeout, |c| c.saturating_sub(send)),
                status: o.status,
            }
        })
        .collect();
    let mut report = RunReport {
        scenario: scenario.name.clone(),
        service: scenario.service.id.clone(),
        seed: scenario.seed,
        clock: "real".into(),
        algorithm: mode.name().into(),
        model: preset.name.clone(),
        slo: preset.slo,
        boundary: if mode == LbMode::SgxAware { boundary } else { None },
        sent: 0,
        completed: 0,
        timed_out: 0,
        unroutable: 0,
        in_flight_at_cutoff: 0,
        percentiles: Percentiles {
            p90: Duration::ZERO,
            p95: Duration::ZERO,
            p99: Duration::ZERO,
        },
        throughput: 0.0,
        slo_met: false,
        requests,
        weight_events,
        replica_events,
        epc,
    };
    report.finalize(scenario.duration())?;
    Ok(report)
}

fn sleep_until(clock: &RealClock, target: Duration) {
    let now = clock.now();
    if target > now {
        thread::sleep(target - now);
    }
}
