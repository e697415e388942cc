//! Discrete-event execution of a scenario on a virtual clock.
//!
//! Events are processed in `(time, insertion order)` order. Every request
//! travels through the real secure channel: the client seals it on arrival,
//! the replica opens it, and the response is sealed at completion and opened
//! by the client. Replicas serve FIFO with `parallelism` workers.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use super::report::{EpcRow, ReplicaEvent, RequestRecord, RequestStatus, RunReport, WeightEvent};
use super::{
    generate_arrivals, generate_work_factors, make_payload, payload_rng, Cluster, HarnessError, LbMode, Percentiles,
    Scenario,
};
use crate::aecs::{AecsReplica, UntrustedStore, WireCapture};
use crate::channel::{Certificate, ClientHandshake, Record, ServicePki, Session};
use crate::clock::{SharedClock, VirtualClock};
use crate::control::{
    self, collect, interference_enclave, observe, Action, Autoscaler, ReplicaStatus, SloController, Telemetry,
    DEFAULT_DRAIN_TIMEOUT,
};
use crate::serving::{
    decode_inference_response, encode_inference_request, model_server_measurement, start_replica, Frontend,
    InferenceJob, ModelPreset, ModelServerReplica, ReplicaSpec,
};
use crate::substrate::{Node, NodeId, MIB};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep every serving-plane frame (handshakes and records).
    pub capture_serving_wire: bool,
}

/// Byproducts of a run for inspection by tests.
pub struct RunArtifacts {
    pub store: Arc<dyn UntrustedStore>,
    pub aecs_capture: WireCapture,
    pub aecs: Vec<Arc<AecsReplica>>,
    pub serving_frames: Vec<Vec<u8>>,
    pub service_pki: Option<ServicePki>,
    pub certificates: Vec<Certificate>,
}

#[derive(Debug)]
enum Ev {
    Arrival(usize),
    Done {
        replica: String,
        generation: u64,
        req: usize,
    },
    Timeout(usize),
    Sample,
    Autoscale,
    InterferenceOn {
        script: usize,
        window: usize,
    },
    InterferenceOff {
        script: usize,
        window: usize,
    },
    Crash(String),
}

struct Scheduled {
    t: Duration,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.seq) == (other.t, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.t, other.seq).cmp(&(self.t, self.seq))
    }
}

struct Slot {
    replica: ModelServerReplica,
    node_id: NodeId,
    generation: u64,
    sessions: Option<(Session, Session)>,
    queue: VecDeque<(usize, InferenceJob)>,
    running: BTreeMap<usize, (InferenceJob, Duration)>,
    busy: u32,
    draining_since: Option<Duration>,
}

struct Req {
    send: Duration,
    endpoint: Option<String>,
    status: RequestStatus,
    complete: Option<Duration>,
    conn_open: bool,
}

struct Sim<'a> {
    scenario: &'a Scenario,
    preset: ModelPreset,
    clock: VirtualClock,
    cluster: Cluster,
    cert: Certificate,
    frontend: Frontend,
    slots: BTreeMap<String, Slot>,
    reqs: Vec<Req>,
    payloads: Vec<Vec<u8>>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now: Duration,
    cutoff: Duration,
    telemetry: Telemetry,
    controller: Option<SloController>,
    autoscaler: Option<Autoscaler>,
    desired: usize,
    next_replica: usize,
    report: RunReport,
    capture: Option<Vec<Vec<u8>>>,
}

impl Sim<'_> {
    fn schedule(&mut self, t: Duration, ev: Ev) {
        self.seq += 1;
        self.heap.push(Scheduled { t, seq: self.seq, ev });
    }

    fn node(&self, id: &NodeId) -> &Node {
        self.cluster.node(id).expect("validated node")
    }

    fn record_frame(&mut self, frame: &[u8]) {
        if let Some(c) = &mut self.capture {
            c.push(frame.to_vec());
        }
    }

    fn start_slot(&mut self, replica_id: &str, node_id: &NodeId) -> Result<Slot, HarnessError> {
        let mut spec = ReplicaSpec::new(replica_id, self.scenario.service.id.clone(), self.preset.clone());
        spec.parallelism = self.scenario.service.parallelism;
        spec.cores = self.scenario.service.parallelism;
        let replica = start_replica(spec, self.node(node_id), &self.cluster.client)
            .map_err(|e| HarnessError::ScenarioFailed(format!("starting {replica_id}: {e}")))?;
        Ok(Slot {
            replica,
            node_id: node_id.clone(),
            generation: 0,
            sessions: None,
            queue: VecDeque::new(),
            running: BTreeMap::new(),
            busy: 0,
            draining_since: None,
        })
    }

    fn replica_event(&mut self, replica: &str, node: &NodeId, action: &str) {
        self.report.replica_events.push(ReplicaEvent {
            ts: self.now,
            replica: replica.to_owned(),
            node: node.to_string(),
            action: action.to_owned(),
        });
    }

    fn weight_event(&mut self, replica: &str, weight: u32, source: &str) {
        let conns = self.frontend.endpoint(replica).map(|e| e.conns).unwrap_or(0);
        let window = self.scenario.sample_interval();
        let util = self.slots.get(replica).map_or(0.0, |s| s.replica.utilization(window));
        self.report.weight_events.push(WeightEvent {
            ts: self.now,
            endpoint: replica.to_owned(),
            weight,
            conns,
            util,
            source: source.to_owned(),
        });
    }

    fn close_conn(&mut self, i: usize) {
        let req = &mut self.reqs[i];
        if req.conn_open {
            req.conn_open = false;
            if let Some(ep) = &req.endpoint {
                // The endpoint may have been removed by a forced stop.
                let _ = self.frontend.complete(ep);
            }
        }
    }

    fn fail(&mut self, i: usize, status: RequestStatus) {
        let req = &mut self.reqs[i];
        if req.status == RequestStatus::InFlight {
            req.status = status;
        }
        self.close_conn(i);
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), HarnessError> {
        self.schedule(self.now + self.scenario.timeout(), Ev::Timeout(i));
        let Ok(d) = self.frontend.dispatch() else {
            self.fail(i, RequestStatus::Unroutable);
            return Ok(());
        };
        self.reqs[i].endpoint = Some(d.replica_id.clone());
        self.reqs[i].conn_open = true;
        let serving = self.slots.get(&d.replica_id).is_some_and(|s| s.replica.is_serving());
        if !serving {
            self.fail(i, RequestStatus::Unroutable);
            return Ok(());
        }
        let payload = std::mem::take(&mut self.payloads[i]);
        let cert = self.cert.clone();
        let mut frames = Vec::new();
        let slot = self.slots.get_mut(&d.replica_id).expect("checked");
        if slot.sessions.is_none() {
            let (hs, hello) = ClientHandshake::start(&cert);
            let (pending, server_hello) = slot.replica.accept(&hello)?;
            let (client, finished) = hs.finish(&server_hello).map_err(crate::serving::ServingError::from)?;
            let server = pending.finish(&finished).map_err(crate::serving::ServingError::from)?;
            frames.extend([hello, server_hello, finished]);
            slot.sessions = Some((client, server));
        }
        let (client, server) = slot.sessions.as_mut().expect("established");
        let frame = client.seal_record(&encode_inference_request(&payload)).to_frame();
        let job = slot.replica.open_request(server, &frame)?;
        slot.queue.push_back((i, job));
        frames.push(frame);
        for f in frames {
            self.record_frame(&f);
        }
        self.try_start(&d.replica_id);
        Ok(())
    }

    fn try_start(&mut self, replica_id: &str) {
        let parallelism = self.scenario.service.parallelism;
        let mut started = Vec::new();
        let slot = self.slots.get_mut(replica_id).expect("slot exists");
        while slot.busy < parallelism {
            let Some((i, job)) = slot.queue.pop_front() else { break };
            if self.reqs[i].status != RequestStatus::InFlight {
                // The client gave up before service began.
                slot.replica.abandon(&job);
                continue;
            }
            slot.busy += 1;
            let st = slot.replica.start_service(&job);
            slot.running.insert(i, (job, st));
            started.push((i, st, slot.generation));
        }
        for (i, st, generation) in started {
            self.schedule(
                self.now + st,
                Ev::Done {
                    replica: replica_id.to_owned(),
                    generation,
                    req: i,
                },
            );
        }
    }

    fn on_done(&mut self, replica_id: &str, generation: u64, i: usize) -> Result<(), HarnessError> {
        let Some(slot) = self.slots.get_mut(replica_id) else {
            return Ok(());
        };
        if slot.generation != generation {
            return Ok(());
        }
        let (job, st) = slot.running.remove(&i).expect("running job");
        slot.busy -= 1;
        let (client, server) = slot.sessions.as_mut().expect("session exists while jobs run");
        let frame = slot.replica.complete(server, &job, st);
        let plain = client
            .open_record(&Record::from_frame(&frame).map_err(crate::serving::ServingError::from)?)
            .map_err(crate::serving::ServingError::from)?;
        decode_inference_response(&plain)?;
        self.record_frame(&frame);
        let req = &mut self.reqs[i];
        if req.status == RequestStatus::InFlight {
            req.status = RequestStatus::Completed;
            req.complete = Some(self.now);
        }
        self.close_conn(i);
        self.try_start(replica_id);
        Ok(())
    }

    fn on_timeout(&mut self, i: usize) {
        self.fail(i, RequestStatus::TimedOut);
    }

    fn on_crash(&mut self, replica_id: &str) {
        if let Some(slot) = self.slots.get_mut(replica_id) {
            slot.replica.stop();
            slot.generation += 1;
            slot.sessions = None;
            slot.queue.clear();
            slot.running.clear();
            slot.busy = 0;
            let node = slot.node_id.clone();
            self.replica_event(replica_id, &node, "crash");
        }
    }

    fn on_sample(&mut self) -> Result<(), HarnessError> {
        for node in &self.cluster.nodes {
            match collect(node) {
                Ok(sample) => {
                    self.report.epc.push(EpcRow {
                        ts: sample.timestamp,
                        node: sample.node_id.to_string(),
                        pages_in: sample.pages_in_total,
                        pages_out: sample.pages_out_total,
                        enclaves_json: serde_json::to_string(&sample.enclaves).expect("serializable"),
                    });
                    let _ = self.telemetry.record(sample);
                }
                Err(_) => self.telemetry.record_gap(node.id()),
            }
        }
        if self.controller.is_some() {
            let draining: Vec<String> = self
                .slots
                .iter()
                .filter(|(_, s)| s.draining_since.is_some())
                .map(|(id, _)| id.clone())
                .collect();
            let obs = observe(&self.frontend, &self.telemetry, &draining);
            let changes = self.controller.as_mut().expect("checked").step(&obs);
            control::actuate(&self.frontend, &changes)?;
            for c in changes {
                self.weight_event(&c.replica_id, c.to, "controller");
            }
        }
        self.reconcile()
    }

    fn on_autoscale(&mut self) {
        let window = self
            .autoscaler
            .as_ref()
            .expect("scheduled only with a policy")
            .policy()
            .period;
        let mut in_service = Vec::new();
        let mut out_of_service = 0;
        for (id, slot) in &self.slots {
            if slot.draining_since.is_some() {
                continue;
            }
            let weight = self.frontend.endpoint(id).map(|e| e.weight).unwrap_or(0);
            if weight > 0 && slot.replica.is_serving() {
                in_service.push(slot.replica.utilization(window));
            } else {
                out_of_service += 1;
            }
        }
        let n_in = in_service.len();
        let desired_in = self
            .autoscaler
            .as_mut()
            .expect("checked")
            .step(self.now, n_in, &in_service);
        self.desired = desired_in + out_of_service;
    }

    fn reconcile(&mut self) -> Result<(), HarnessError> {
        let statuses: Vec<ReplicaStatus> = self
            .slots
            .iter()
            .map(|(id, s)| {
                let ep = self.frontend.endpoint(id).ok();
                ReplicaStatus {
                    replica_id: id.clone(),
                    node_id: s.node_id.clone(),
                    running: s.replica.is_serving(),
                    weight: ep.as_ref().map_or(0, |e| e.weight),
                    conns: ep.as_ref().map_or(0, |e| e.conns),
                    draining_since: s.draining_since,
                }
            })
            .collect();
        let used: Vec<&NodeId> = self.slots.values().map(|s| &s.node_id).collect();
        let free: Vec<NodeId> = self
            .cluster
            .nodes
            .iter()
            .map(|n| n.id().clone())
            .filter(|n| !used.contains(&n))
            .collect();
        let service = self.scenario.service.id.clone();
        let mut next = self.next_replica;
        let plan = control::plan(
            self.desired,
            &statuses,
            &free,
            self.now,
            DEFAULT_DRAIN_TIMEOUT,
            &mut || {
                next += 1;
                format!("{service}-{}", next - 1)
            },
        );
        self.next_replica = next;
        for _ in 0..plan.unplaced {
            self.replica_event("-", &NodeId::new("-"), "placement_failure");
        }
        for action in plan.actions {
            match action {
                Action::Start { replica_id, node_id } => {
                    let slot = self.start_slot(&replica_id, &node_id)?;
                    self.slots.insert(replica_id.clone(), slot);
                    self.frontend.add_endpoint(replica_id.clone(), node_id.clone());
                    self.replica_event(&replica_id, &node_id, "start");
                }
                Action::Restart { replica_id, node_id } => {
                    let fresh = self.start_slot(&replica_id, &node_id)?;
                    let slot = self.slots.get_mut(&replica_id).expect("restarting a known replica");
                    let generation = slot.generation + 1;
                    *slot = Slot { generation, ..fresh };
                    self.replica_event(&replica_id, &node_id, "restart");
                }
                Action::Drain { replica_id } => {
                    self.frontend.set_weight(&replica_id, 0)?;
                    let slot = self.slots.get_mut(&replica_id).expect("draining a known replica");
                    slot.draining_since = Some(self.now);
                    let node = slot.node_id.clone();
                    if let Some(c) = self.controller.as_mut() {
                        c.forget(&replica_id);
                    }
                    self.weight_event(&replica_id, 0, "reconciler");
                    self.replica_event(&replica_id, &node, "drain");
                }
                Action::Stop { replica_id } => {
                    let slot = self.slots.remove(&replica_id).expect("stopping a known replica");
                    slot.replica.stop();
                    let _ = self.frontend.remove_endpoint(&replica_id);
                    self.replica_event(&replica_id, &slot.node_id, "stop");
                }
            }
        }
        Ok(())
    }

    fn interference(&mut self, script: usize, window: usize, on: bool) -> Result<(), HarnessError> {
        let s = &self.scenario.interference[script];
        let node = self.node(&NodeId::new(s.node.clone())).clone();
        let id = format!("interference-{script}-{window}");
        if on {
            node.launch_enclave(interference_enclave(id, s.epc_mib * MIB, s.access_rate))?;
        } else {
            node.terminate_enclave(&id.as_str().into())?;
        }
        Ok(())
    }

    fn run(mut self) -> Result<(RunReport, RunArtifacts), HarnessError> {
        while let Some(Scheduled { t, ev, .. }) = self.heap.pop() {
            if t > self.cutoff {
                break;
            }
            self.now = t;
            self.clock.set(t);
            match ev {
                Ev::Arrival(i) => self.on_arrival(i)?,
                Ev::Done {
                    replica,
                    generation,
                    req,
                } => self.on_done(&replica, generation, req)?,
                Ev::Timeout(i) => self.on_timeout(i),
                Ev::Sample => {
                    self.on_sample()?;
                    let next = t + self.scenario.sample_interval();
                    self.schedule(next, Ev::Sample);
                }
                Ev::Autoscale => {
                    self.on_autoscale();
                    let next = t + self.autoscaler.as_ref().expect("policy").policy().period;
                    self.schedule(next, Ev::Autoscale);
                }
                Ev::InterferenceOn { script, window } => self.interference(script, window, true)?,
                Ev::InterferenceOff { script, window } => self.interference(script, window, false)?,
                Ev::Crash(r) => self.on_crash(&r),
            }
        }
        let timeout = self.scenario.timeout();
        self.report.requests = self
            .reqs
            .iter()
            .enumerate()
            .map(|(i, r)| RequestRecord {
                id: i as u64,
                send: r.send,
                complete: r.complete,
                endpoint: r.endpoint.clone(),
                latency: r.complete.map_or(timeout, |c| c - r.send),
                status: r.status,
            })
            .collect();
        self.report.finalize(self.scenario.duration())?;
        let artifacts = RunArtifacts {
            store: self.cluster.store.clone(),
            aecs_capture: self.cluster.capture.clone(),
            aecs: self.cluster.aecs.clone(),
            serving_frames: self.capture.unwrap_or_default(),
            service_pki: self.slots.values().next().map(|s| s.replica.pki().clone()),
            certificates: self.slots.values().map(|s| s.replica.certificate().clone()).collect(),
        };
        Ok((self.report, artifacts))
    }
}

/// Runs `scenario` in virtual time. `boundary` is the resolved paging
/// boundary for the SLO controller.
pub fn run_virtual(scenario: &Scenario, boundary: Option<f64>) -> Result<RunReport, HarnessError> {
    run_virtual_with(scenario, boundary, &RunOptions::default()).map(|(r, _)| r)
}

pub fn run_virtual_with(
    scenario: &Scenario,
    boundary: Option<f64>,
    options: &RunOptions,
) -> Result<(RunReport, RunArtifacts), HarnessError> {
    scenario.validate()?;
    let preset = scenario.preset()?;
    let clock = VirtualClock::new();
    let shared: SharedClock = Arc::new(clock.clone());
    let cluster = Cluster::build(&scenario.cluster, shared, scenario.seed, scenario.validity())?;
    let service = scenario.service.id.clone();
    cluster
        .client
        .create_service_pki(&service, model_server_measurement(&preset))?;
    let cert = cluster.client.get_certificate(&service)?;

    let mode = scenario.service.algorithm;
    let controller = match (mode, scenario.slo_policy.is_some()) {
        (LbMode::SgxAware, true) => {
            let b = boundary.ok_or_else(|| HarnessError::ConfigInvalid("sgx-aware run without a boundary".into()))?;
            Some(SloController::new(scenario.slo_policy(b).expect("present"))?)
        }
        _ => None,
    };
    let autoscaler = scenario.scale_policy().map(Autoscaler::new).transpose()?;

    let spec = scenario.workload_spec();
    let arrivals = generate_arrivals(&spec);
    let factors = generate_work_factors(scenario.seed, preset.work_sigma, arrivals.len());
    let mut filler = payload_rng(scenario.seed);
    let payloads = factors
        .iter()
        .map(|wf| make_payload(*wf, spec.payload_size, &mut filler))
        .collect();

    let placeholder = Percentiles {
        p90: Duration::ZERO,
        p95: Duration::ZERO,
        p99: Duration::ZERO,
    };
    let mut sim = Sim {
        scenario,
        preset: preset.clone(),
        clock,
        cert,
        frontend: Frontend::new(service, mode.algorithm()),
        slots: BTreeMap::new(),
        reqs: arrivals
            .iter()
            .map(|&send| Req {
                send,
                endpoint: None,
                status: RequestStatus::InFlight,
                complete: None,
                conn_open: false,
            })
            .collect(),
        payloads,
        heap: BinaryHeap::new(),
        seq: 0,
        now: Duration::ZERO,
        cutoff: scenario.duration() + scenario.timeout(),
        telemetry: Telemetry::new(),
        controller,
        autoscaler,
        desired: scenario.service.replicas,
        next_replica: scenario.service.replicas,
        report: RunReport {
            scenario: scenario.name.clone(),
            service: scenario.service.id.clone(),
            seed: scenario.seed,
            clock: "virtual".into(),
            algorithm: mode.name().into(),
            model: preset.name.clone(),
            slo: preset.slo,
            boundary: if mode == LbMode::SgxAware { boundary } else { None },
            sent: 0,
            completed: 0,
            timed_out: 0,
            unroutable: 0,
            in_flight_at_cutoff: 0,
            percentiles: placeholder,
            throughput: 0.0,
            slo_met: false,
            requests: Vec::new(),
            weight_events: Vec::new(),
            replica_events: Vec::new(),
            epc: Vec::new(),
        },
        capture: options.capture_serving_wire.then(Vec::new),
        cluster,
    };

    for (k, node) in scenario.placement().iter().enumerate() {
        let id = scenario.replica_id(k);
        let node_id = NodeId::new(node.clone());
        let slot = sim.start_slot(&id, &node_id)?;
        sim.slots.insert(id.clone(), slot);
        sim.frontend.add_endpoint(id.clone(), node_id.clone());
        sim.replica_event(&id, &node_id, "start");
    }
    for (script, s) in scenario.interference.iter().enumerate() {
        for (window, w) in s.windows_ms.iter().enumerate() {
            sim.schedule(Duration::from_millis(w[0]), Ev::InterferenceOn { script, window });
            sim.schedule(Duration::from_millis(w[1]), Ev::InterferenceOff { script, window });
        }
    }
    for c in &scenario.crashes {
        sim.schedule(Duration::from_millis(c.at_ms), Ev::Crash(c.replica.clone()));
    }
    for (i, &t) in arrivals.iter().enumerate() {
        sim.schedule(t, Ev::Arrival(i));
    }
    sim.schedule(scenario.sample_interval(), Ev::Sample);
    if let Some(a) = &sim.autoscaler {
        let period = a.policy().period;
        sim.schedule(period, Ev::Autoscale);
    }
    sim.run()
}
