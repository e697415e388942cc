use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::Serialize;

use super::ControlError;
use crate::substrate::{parse_snapshot, Node, NodeId, SnapshotEnclave};

/// One telemetry point for a node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpcSample {
    pub node_id: NodeId,
    pub timestamp: Duration,
    pub pages_in_total: u64,
    pub pages_out_total: u64,
    pub enclaves: Vec<SnapshotEnclave>,
}

impl EpcSample {
    /// Non-system enclaves other than `own`.
    pub fn interferers<'a>(&'a self, own: &'a str) -> impl Iterator<Item = &'a SnapshotEnclave> + 'a {
        self.enclaves
            .iter()
            .filter(move |e| !e.system && e.enclave_id.as_str() != own)
    }
}

/// Reads the node's EPC snapshot text the way the collector reads the
/// driver's proc file.
pub fn collect(node: &Node) -> Result<EpcSample, ControlError> {
    if !node.is_reachable() {
        return Err(ControlError::NodeUnreachable(node.id().clone()));
    }
    let timestamp = node.clock().now();
    let text = node
        .snapshot_text()
        .map_err(|_| ControlError::NodeUnreachable(node.id().clone()))?;
    let snap = parse_snapshot(&text)?;
    Ok(EpcSample {
        node_id: node.id().clone(),
        timestamp,
        pages_in_total: snap.pages_in_total,
        pages_out_total: snap.pages_out_total,
        enclaves: snap.enclaves,
    })
}

const BUFFER: usize = 64;

/// Per-node sample history.
#[derive(Debug, Default)]
pub struct Telemetry {
    nodes: BTreeMap<NodeId, VecDeque<EpcSample>>,
    gaps: u64,
}

impl Telemetry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sample. Timestamps must strictly increase and counters must
    /// not decrease; a violating sample is treated as a gap.
    pub fn record(&mut self, sample: EpcSample) -> Result<(), ControlError> {
        let buf = self.nodes.entry(sample.node_id.clone()).or_default();
        if let Some(last) = buf.back() {
            if sample.timestamp <= last.timestamp
                || sample.pages_in_total < last.pages_in_total
                || sample.pages_out_total < last.pages_out_total
            {
                let node = sample.node_id.clone();
                self.record_gap(&node);
                return Err(ControlError::NonMonotonicSample(node));
            }
        }
        buf.push_back(sample);
        if buf.len() > BUFFER {
            buf.pop_front();
        }
        Ok(())
    }

    /// A missed sample. Rates are not computed across a gap.
    pub fn record_gap(&mut self, node: &NodeId) {
        self.gaps += 1;
        self.nodes.entry(node.clone()).or_default().clear();
    }

    pub fn gaps(&self) -> u64 {
        self.gaps
    }

    pub fn latest(&self, node: &NodeId) -> Option<&EpcSample> {
        self.nodes.get(node).and_then(|b| b.back())
    }

    /// `(Δpages_in + Δpages_out) / Δt` over the last `k` samples (or all
    /// contiguous samples if fewer are buffered).
    pub fn paging_throughput(&self, node: &NodeId, k: usize) -> Result<f64, ControlError> {
        let buf = self.nodes.get(node).ok_or(ControlError::InsufficientSamples)?;
        let k = k.min(buf.len());
        if k < 2 {
            return Err(ControlError::InsufficientSamples);
        }
        let (first, last) = (&buf[buf.len() - k], &buf[buf.len() - 1]);
        Ok(paging_between(first, last))
    }
}

pub fn paging_between(first: &EpcSample, last: &EpcSample) -> f64 {
    let pages = (last.pages_in_total - first.pages_in_total) + (last.pages_out_total - first.pages_out_total);
    pages as f64 / (last.timestamp - first.timestamp).as_secs_f64()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::clock::VirtualClock;
    use crate::substrate::{EnclaveSpec, Measurement, NodeSpec, MIB};

    fn sample(t_ms: u64, pin: u64, pout: u64) -> EpcSample {
        EpcSample {
            node_id: NodeId::new("n"),
            timestamp: Duration::from_millis(t_ms),
            pages_in_total: pin,
            pages_out_total: pout,
            enclaves: vec![],
        }
    }

    #[test]
    fn rate_arithmetic() {
        let n = NodeId::new("n");
        let mut t = Telemetry::new();
        t.record(sample(1000, 10, 10)).unwrap();
        assert_eq!(t.paging_throughput(&n, 2), Err(ControlError::InsufficientSamples));
        t.record(sample(2000, 310, 210)).unwrap();
        assert_eq!(t.paging_throughput(&n, 2).unwrap(), 500.0);
        t.record(sample(3000, 310, 210)).unwrap();
        assert_eq!(t.paging_throughput(&n, 2).unwrap(), 0.0);
        assert_eq!(t.paging_throughput(&n, 3).unwrap(), 250.0);
    }

    #[test]
    fn gaps_and_bad_samples_reset_history() {
        let n = NodeId::new("n");
        let mut t = Telemetry::new();
        t.record(sample(1000, 0, 0)).unwrap();
        t.record(sample(2000, 5, 5)).unwrap();
        t.record_gap(&n);
        assert_eq!(t.paging_throughput(&n, 2), Err(ControlError::InsufficientSamples));
        t.record(sample(4000, 5, 5)).unwrap();
        assert!(matches!(
            t.record(sample(4000, 6, 6)),
            Err(ControlError::NonMonotonicSample(_))
        ));
        t.record(sample(5000, 6, 6)).unwrap();
        t.record(sample(6000, 7, 7)).unwrap();
        assert_eq!(t.paging_throughput(&n, 2).unwrap(), 2.0);
        assert_eq!(t.gaps(), 2);
    }

    #[test]
    fn collected_deltas_match_substrate_rate() {
        let clock = VirtualClock::new();
        let node = Node::new(
            NodeSpec::generate("n0", &mut ChaCha8Rng::seed_from_u64(1)),
            Arc::new(clock.clone()),
        )
        .unwrap();
        let mut t = Telemetry::new();
        clock.set(Duration::from_secs(1));
        t.record(collect(&node).unwrap()).unwrap();
        clock.set(Duration::from_secs(2));
        t.record(collect(&node).unwrap()).unwrap();
        assert_eq!(t.paging_throughput(node.id(), 2).unwrap(), 0.0);

        node.launch_enclave(EnclaveSpec::new(
            "a",
            Measurement::of_code(b"a"),
            80 * MIB,
            80 * MIB,
            3000.0,
        ))
        .unwrap();
        node.launch_enclave(EnclaveSpec::new(
            "b",
            Measurement::of_code(b"b"),
            80 * MIB,
            80 * MIB,
            5000.0,
        ))
        .unwrap();
        let expected = node.paging_throughput();
        assert!(expected > 0.0);
        for s in 3..=6 {
            clock.set(Duration::from_secs(s));
            let smp = collect(&node).unwrap();
            assert!(smp.timestamp > t.latest(node.id()).unwrap().timestamp);
            t.record(smp).unwrap();
            let got = t.paging_throughput(node.id(), 2).unwrap();
            // Counters are integral: at most one page of quantization per direction.
            assert!((got - expected).abs() <= 2.0, "{got} vs {expected}");
        }
        let latest = t.latest(node.id()).unwrap();
        assert_eq!(latest.interferers("a").count(), 1);

        node.set_reachable(false);
        assert!(matches!(collect(&node), Err(ControlError::NodeUnreachable(_))));
    }
}
