use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use super::attest::{self, EnclaveReport};
use super::models::{LatencyModel, LinearInflation, PagingModel, ProportionalOverflow};
use super::seal::{self, SealedBlob};
use super::snapshot::{EpcSnapshot, SnapshotEnclave};
use super::{EnclaveId, EnclaveSpec, Measurement, NodeId, NodeSpec, SubstrateError, PAGE_SIZE};
use crate::clock::SharedClock;

#[derive(Debug, Clone, PartialEq)]
pub struct NodePagingState {
    pub node_id: NodeId,
    /// Resident bytes per enclave, in launch order.
    pub resident: Vec<(EnclaveId, u64)>,
    pub cumulative_pages_in: u64,
    pub cumulative_pages_out: u64,
}

impl NodePagingState {
    pub fn total_resident(&self) -> u64 {
        self.resident.iter().map(|(_, b)| b).sum()
    }
}

struct NodeState {
    // Launch order is kept so snapshots list enclaves the way the driver does.
    enclaves: Vec<EnclaveSpec>,
    pages_in: f64,
    pages_out: f64,
    last_update: Duration,
}

struct NodeShared {
    spec: NodeSpec,
    clock: SharedClock,
    paging: Arc<dyn PagingModel>,
    latency: Arc<dyn LatencyModel>,
    reachable: AtomicBool,
    state: Mutex<NodeState>,
}

/// Handle to one simulated SGX machine. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Node {
    shared: Arc<NodeShared>,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node").field("id", self.id()).finish()
    }
}

impl Node {
    pub fn new(spec: NodeSpec, clock: SharedClock) -> Result<Self, SubstrateError> {
        let latency = Arc::new(LinearInflation::new(spec.paging_ref));
        Self::with_models(spec, clock, Arc::new(ProportionalOverflow), latency)
    }

    pub fn with_models(
        spec: NodeSpec,
        clock: SharedClock,
        paging: Arc<dyn PagingModel>,
        latency: Arc<dyn LatencyModel>,
    ) -> Result<Self, SubstrateError> {
        spec.validate()?;
        let now = clock.now();
        Ok(Node {
            shared: Arc::new(NodeShared {
                spec,
                clock,
                paging,
                latency,
                reachable: AtomicBool::new(true),
                state: Mutex::new(NodeState {
                    enclaves: Vec::new(),
                    pages_in: 0.0,
                    pages_out: 0.0,
                    last_update: now,
                }),
            }),
        })
    }

    pub fn id(&self) -> &NodeId {
        &self.shared.spec.node_id
    }

    pub fn epc_usable_bytes(&self) -> u64 {
        self.shared.spec.epc_usable_bytes
    }

    pub fn cpu_cores(&self) -> u32 {
        self.shared.spec.cpu_cores
    }

    pub fn clock(&self) -> &SharedClock {
        &self.shared.clock
    }

    pub(crate) fn spec(&self) -> &NodeSpec {
        &self.shared.spec
    }

    pub fn same_node(&self, other: &Node) -> bool {
        Arc::ptr_eq(&self.shared, &other.shared)
    }

    /// Locks state and integrates paging counters up to the current instant.
    fn lock_advanced(&self) -> MutexGuard<'_, NodeState> {
        let mut st = self.shared.state.lock().expect("node state poisoned");
        let now = self.shared.clock.now();
        if now > st.last_update {
            let dt = (now - st.last_update).as_secs_f64();
            let rate = self.throughput_of(&st.enclaves);
            st.pages_in += rate * dt / 2.0;
            st.pages_out += rate * dt / 2.0;
            st.last_update = now;
        }
        st
    }

    fn throughput_of(&self, enclaves: &[EnclaveSpec]) -> f64 {
        let refs: Vec<&EnclaveSpec> = enclaves.iter().collect();
        self.shared.paging.throughput(&refs, self.shared.spec.epc_usable_bytes)
    }

    /// Over-commitment is accepted; the overflow is absorbed by paging.
    pub fn launch_enclave(&self, spec: EnclaveSpec) -> Result<EnclaveHandle, SubstrateError> {
        spec.validate()?;
        let mut st = self.lock_advanced();
        if st.enclaves.iter().any(|e| e.enclave_id == spec.enclave_id) {
            return Err(SubstrateError::DuplicateEnclave(spec.enclave_id));
        }
        let handle = EnclaveHandle {
            node: self.clone(),
            enclave_id: spec.enclave_id.clone(),
            measurement: spec.measurement,
        };
        st.enclaves.push(spec);
        Ok(handle)
    }

    pub fn terminate_enclave(&self, id: &EnclaveId) -> Result<(), SubstrateError> {
        let mut st = self.lock_advanced();
        let before = st.enclaves.len();
        st.enclaves.retain(|e| &e.enclave_id != id);
        if st.enclaves.len() == before {
            return Err(SubstrateError::EnclaveNotRunning(id.clone()));
        }
        Ok(())
    }

    pub fn is_running(&self, id: &EnclaveId) -> bool {
        let st = self.shared.state.lock().expect("node state poisoned");
        st.enclaves.iter().any(|e| &e.enclave_id == id)
    }

    pub fn enclaves(&self) -> Vec<EnclaveSpec> {
        self.shared.state.lock().expect("node state poisoned").enclaves.clone()
    }

    /// Instantaneous paging rate under the node's paging model.
    pub fn paging_throughput(&self) -> f64 {
        let st = self.shared.state.lock().expect("node state poisoned");
        self.throughput_of(&st.enclaves)
    }

    /// Service time of `base` work at the current paging rate.
    pub fn inflate(&self, base: Duration) -> Duration {
        self.shared.latency.inflate(base, self.paging_throughput())
    }

    pub fn latency_model(&self) -> &Arc<dyn LatencyModel> {
        &self.shared.latency
    }

    /// Resident bytes are allocated in proportion to working-set demand when
    /// the node is over-committed, rounded down to whole pages.
    fn residency(&self, enclaves: &[EnclaveSpec]) -> Vec<(EnclaveId, u64)> {
        let epc = self.shared.spec.epc_usable_bytes;
        let demand: u64 = enclaves.iter().map(|e| e.working_set_bytes).sum();
        enclaves
            .iter()
            .map(|e| {
                let bytes = if demand <= epc {
                    e.working_set_bytes
                } else {
                    let share = (e.working_set_bytes as u128 * epc as u128 / demand as u128) as u64;
                    share / PAGE_SIZE * PAGE_SIZE
                };
                (e.enclave_id.clone(), bytes)
            })
            .collect()
    }

    pub fn paging_state(&self) -> NodePagingState {
        let st = self.lock_advanced();
        NodePagingState {
            node_id: self.id().clone(),
            resident: self.residency(&st.enclaves),
            cumulative_pages_in: st.pages_in.floor() as u64,
            cumulative_pages_out: st.pages_out.floor() as u64,
        }
    }

    pub fn snapshot(&self) -> EpcSnapshot {
        let st = self.lock_advanced();
        let resident = self.residency(&st.enclaves);
        EpcSnapshot {
            enclaves: st
                .enclaves
                .iter()
                .zip(resident)
                .map(|(e, (_, bytes))| SnapshotEnclave {
                    enclave_id: e.enclave_id.clone(),
                    measurement: e.measurement,
                    resident_pages: bytes / PAGE_SIZE,
                    system: e.system_enclave,
                })
                .collect(),
            pages_in_total: st.pages_in.floor() as u64,
            pages_out_total: st.pages_out.floor() as u64,
        }
    }

    /// Text rendering of [`Node::snapshot`]; fails while the node is marked
    /// unreachable.
    pub fn snapshot_text(&self) -> Result<String, SubstrateError> {
        if !self.is_reachable() {
            return Err(SubstrateError::NodeUnreachable(self.id().clone()));
        }
        Ok(self.snapshot().render())
    }

    pub fn set_reachable(&self, reachable: bool) {
        self.shared.reachable.store(reachable, Ordering::SeqCst);
    }

    pub fn is_reachable(&self) -> bool {
        self.shared.reachable.load(Ordering::SeqCst)
    }
}

/// A launched enclave. Operations fail with `EnclaveNotRunning` once the
/// enclave has been terminated.
#[derive(Clone)]
pub struct EnclaveHandle {
    node: Node,
    enclave_id: EnclaveId,
    measurement: Measurement,
}

impl fmt::Debug for EnclaveHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnclaveHandle")
            .field("node", self.node.id())
            .field("enclave_id", &self.enclave_id)
            .finish()
    }
}

impl EnclaveHandle {
    pub fn id(&self) -> &EnclaveId {
        &self.enclave_id
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn node(&self) -> &Node {
        &self.node
    }

    pub fn is_running(&self) -> bool {
        self.node.is_running(&self.enclave_id)
    }

    fn ensure_running(&self) -> Result<(), SubstrateError> {
        if self.is_running() {
            Ok(())
        } else {
            Err(SubstrateError::EnclaveNotRunning(self.enclave_id.clone()))
        }
    }

    pub fn terminate(&self) -> Result<(), SubstrateError> {
        self.node.terminate_enclave(&self.enclave_id)
    }

    pub fn create_report(&self, report_data: [u8; 32]) -> Result<EnclaveReport, SubstrateError> {
        self.ensure_running()?;
        Ok(attest::sign_report(
            &self.node.spec().platform_attestation_key,
            self.measurement,
            self.node.id().clone(),
            report_data,
        ))
    }

    pub fn seal(&self, plaintext: &[u8]) -> Result<SealedBlob, SubstrateError> {
        self.ensure_running()?;
        Ok(seal::seal(
            &self.node.spec().root_seal_key,
            self.node.id(),
            self.measurement,
            plaintext,
        ))
    }

    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, SubstrateError> {
        self.ensure_running()?;
        seal::unseal(&self.node.spec().root_seal_key, self.node.id(), self.measurement, blob)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::substrate::MIB;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(clock: &VirtualClock, seed: u64) -> Node {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Node::new(NodeSpec::generate("n0", &mut rng), Arc::new(clock.clone())).unwrap()
    }

    fn spec(id: &str, ws_mib: u64, rate: f64) -> EnclaveSpec {
        EnclaveSpec::new(
            id,
            Measurement::of_code(id.as_bytes()),
            ws_mib * MIB,
            ws_mib * MIB,
            rate,
        )
    }

    #[test]
    fn launch_fits_without_paging() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        n.launch_enclave(spec("m", 60, 1000.0)).unwrap();
        let st = n.paging_state();
        assert_eq!(st.resident[0].1, 60 * MIB);
        assert_eq!(n.paging_throughput(), 0.0);
    }

    #[test]
    fn oversized_request_is_accepted() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        let mut s = spec("occlum", 20, 100.0);
        s.requested_epc_bytes = 128 * MIB;
        n.launch_enclave(s).unwrap();
    }

    #[test]
    fn duplicate_enclave_rejected() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        n.launch_enclave(spec("a", 1, 0.0)).unwrap();
        assert!(matches!(
            n.launch_enclave(spec("a", 1, 0.0)),
            Err(SubstrateError::DuplicateEnclave(_))
        ));
    }

    #[test]
    fn working_set_above_request_rejected() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        let mut s = spec("a", 10, 0.0);
        s.requested_epc_bytes = MIB;
        assert!(matches!(
            n.launch_enclave(s),
            Err(SubstrateError::InvalidEnclaveSpec(_))
        ));
    }

    #[test]
    fn residency_capped_by_epc() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        n.launch_enclave(spec("a", 80, 1000.0)).unwrap();
        n.launch_enclave(spec("b", 77, 1000.0)).unwrap();
        let st = n.paging_state();
        assert!(st.total_resident() <= n.epc_usable_bytes());
        assert!(st.resident[0].1 > st.resident[1].1);
    }

    #[test]
    fn counters_integrate_throughput() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        n.launch_enclave(spec("a", 80, 1000.0)).unwrap();
        n.launch_enclave(spec("b", 40, 1000.0)).unwrap();
        clock.set(Duration::from_secs(2));
        let st = n.paging_state();
        assert_eq!(st.cumulative_pages_in + st.cumulative_pages_out, 900);
        // Terminating stops further paging.
        n.terminate_enclave(&"a".into()).unwrap();
        clock.set(Duration::from_secs(5));
        let st2 = n.paging_state();
        assert_eq!(st2.cumulative_pages_in, st.cumulative_pages_in);
    }

    #[test]
    fn terminated_enclave_cannot_report() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        let h = n.launch_enclave(spec("a", 1, 0.0)).unwrap();
        h.terminate().unwrap();
        assert!(matches!(
            h.create_report([0; 32]),
            Err(SubstrateError::EnclaveNotRunning(_))
        ));
        assert!(matches!(h.seal(b"x"), Err(SubstrateError::EnclaveNotRunning(_))));
    }

    #[test]
    fn unreachable_node_has_no_snapshot() {
        let clock = VirtualClock::new();
        let n = node(&clock, 1);
        n.set_reachable(false);
        assert!(matches!(n.snapshot_text(), Err(SubstrateError::NodeUnreachable(_))));
    }
}
