use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ClusterConfig, HarnessError};
use crate::aecs::{
    self, AecsClient, AecsConfig, AecsDirectory, AecsReplica, AecsStats, LocalDisk, Loopback, MemoryStore,
    UntrustedStore, WireCapture,
};
use crate::channel::Validity;
use crate::clock::SharedClock;
use crate::substrate::{EnclaveSpec, Measurement, Node, NodeId, NodeSpec, PlatformRegistry, MIB};

/// Identity of the per-node platform enclave (launch/quoting stand-in).
pub fn system_enclave_spec() -> EnclaveSpec {
    EnclaveSpec::new("aesm", Measurement::of_code(b"platform-aesm"), MIB, MIB, 0.0).system()
}

/// A set of simulated machines plus a bootstrapped AECS deployment.
pub struct Cluster {
    pub clock: SharedClock,
    pub registry: PlatformRegistry,
    /// Worker nodes, in configuration order.
    pub nodes: Vec<Node>,
    pub aecs_nodes: Vec<Node>,
    pub aecs: Vec<Arc<AecsReplica>>,
    pub directory: AecsDirectory,
    pub client: AecsClient,
    pub store: Arc<dyn UntrustedStore>,
    pub stats: Arc<AecsStats>,
    /// Every AECS request and response frame sent through `client`.
    pub capture: WireCapture,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("nodes", &self.nodes)
            .field("aecs_nodes", &self.aecs_nodes)
            .finish_non_exhaustive()
    }
}

impl Cluster {
    /// Builds nodes with secrets drawn from `seed`, launches a system
    /// enclave on every node, and bootstraps AECS replicas one per AECS node.
    pub fn build(
        config: &ClusterConfig,
        clock: SharedClock,
        seed: u64,
        validity: Validity,
    ) -> Result<Cluster, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6465);
        let registry = PlatformRegistry::new();
        let mut make = |id: &str| -> Result<Node, HarnessError> {
            let spec = NodeSpec::generate(id, &mut rng)
                .with_epc(config.epc_mib * MIB)
                .with_cores(config.cores);
            let node = Node::new(spec, clock.clone())?;
            registry.register(&node);
            node.launch_enclave(system_enclave_spec())?;
            Ok(node)
        };
        let nodes = config.nodes.iter().map(|n| make(n)).collect::<Result<Vec<_>, _>>()?;
        let aecs_nodes = config
            .aecs_nodes
            .iter()
            .map(|n| make(n))
            .collect::<Result<Vec<_>, _>>()?;

        let store: Arc<dyn UntrustedStore> = Arc::new(MemoryStore::new());
        let stats = Arc::new(AecsStats::default());
        let directory = AecsDirectory::new();
        let capture = WireCapture::new();
        let client = AecsClient::new(Arc::new(Loopback::new(directory.clone()).with_capture(capture.clone())));
        let mut cfg = AecsConfig::new(registry.clone());
        cfg.validity = validity;
        let mut replicas = Vec::new();
        for (i, node) in aecs_nodes.iter().enumerate() {
            let enclave = node.launch_enclave(EnclaveSpec::new(
                format!("aecs-{i}"),
                aecs::aecs_measurement(),
                32 * MIB,
                4 * MIB,
                0.0,
            ))?;
            let replica = Arc::new(aecs::bootstrap(
                enclave,
                store.clone(),
                &LocalDisk::memory(),
                &client,
                cfg.clone(),
                clock.clone(),
                stats.clone(),
            )?);
            directory.add(replica.clone());
            replicas.push(replica);
        }
        Ok(Cluster {
            clock,
            registry,
            nodes,
            aecs_nodes,
            aecs: replicas,
            directory,
            client,
            store,
            stats,
            capture,
        })
    }

    pub fn node(&self, id: &NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id() == id)
    }
}
