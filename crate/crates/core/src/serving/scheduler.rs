use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::ServingError;
use crate::substrate::NodeId;

/// Per-request scheduling rule of the frontend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "rr")]
    RoundRobin,
    #[serde(rename = "lc")]
    LeastConnection,
    #[serde(rename = "sed")]
    ShortestExpectedDelay,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::RoundRobin => "rr",
            Algorithm::LeastConnection => "lc",
            Algorithm::ShortestExpectedDelay => "sed",
        }
    }
}

/// What the scheduler sees of an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndpointView {
    pub weight: u32,
    pub conns: u32,
}

/// Chooses an endpoint index. `rr_last` is the index picked by the previous
/// round-robin decision; it is advanced on success.
///
/// Weight-0 endpoints are never chosen. LC minimizes connections, SED
/// minimizes `(conns + 1) / weight`; both break ties by lowest index.
pub fn pick(
    algorithm: Algorithm,
    endpoints: &[EndpointView],
    rr_last: &mut Option<usize>,
) -> Result<usize, ServingError> {
    let n = endpoints.len();
    let eligible = |i: &usize| endpoints[*i].weight > 0;
    let chosen = match algorithm {
        Algorithm::RoundRobin => {
            let start = rr_last.map_or(0, |l| (l + 1) % n.max(1));
            (0..n).map(|k| (start + k) % n).find(eligible)
        }
        Algorithm::LeastConnection => (0..n).filter(eligible).min_by_key(|&i| (endpoints[i].conns, i)),
        Algorithm::ShortestExpectedDelay => (0..n).filter(eligible).reduce(|best, i| {
            let (b, c) = (&endpoints[best], &endpoints[i]);
            // (c.conns+1)/c.weight < (b.conns+1)/b.weight, cross-multiplied.
            let lhs = (c.conns as u64 + 1) * b.weight as u64;
            let rhs = (b.conns as u64 + 1) * c.weight as u64;
            if lhs < rhs {
                i
            } else {
                best
            }
        }),
    };
    let i = chosen.ok_or(ServingError::NoEligibleEndpoint)?;
    if algorithm == Algorithm::RoundRobin {
        *rr_last = Some(i);
    }
    Ok(i)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub replica_id: String,
    pub node_id: NodeId,
    pub weight: u32,
    pub conns: u32,
}

#[derive(Debug, Clone)]
pub struct VirtualService {
    pub service_id: String,
    pub algorithm: Algorithm,
    pub endpoints: Vec<Endpoint>,
    rr_last: Option<usize>,
}

impl VirtualService {
    pub fn new(service_id: impl Into<String>, algorithm: Algorithm) -> Self {
        VirtualService {
            service_id: service_id.into(),
            algorithm,
            endpoints: Vec::new(),
            rr_last: None,
        }
    }

    fn index_of(&self, replica_id: &str) -> Result<usize, ServingError> {
        self.endpoints
            .iter()
            .position(|e| e.replica_id == replica_id)
            .ok_or_else(|| ServingError::UnknownEndpoint(replica_id.to_owned()))
    }

    pub fn views(&self) -> Vec<EndpointView> {
        self.endpoints
            .iter()
            .map(|e| EndpointView {
                weight: e.weight,
                conns: e.conns,
            })
            .collect()
    }
}

/// A dispatch decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub index: usize,
    pub replica_id: String,
}

/// Thread-safe frontend. Every pick sees a single consistent view of weights
/// and connection counts.
#[derive(Debug, Clone)]
pub struct Frontend {
    inner: Arc<Mutex<VirtualService>>,
}

impl Frontend {
    pub fn new(service_id: impl Into<String>, algorithm: Algorithm) -> Self {
        Frontend {
            inner: Arc::new(Mutex::new(VirtualService::new(service_id, algorithm))),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, VirtualService> {
        self.inner.lock().expect("frontend poisoned")
    }

    pub fn service_id(&self) -> String {
        self.lock().service_id.clone()
    }

    pub fn algorithm(&self) -> Algorithm {
        self.lock().algorithm
    }

    /// Appends an endpoint with weight 1.
    pub fn add_endpoint(&self, replica_id: impl Into<String>, node_id: NodeId) {
        self.lock().endpoints.push(Endpoint {
            replica_id: replica_id.into(),
            node_id,
            weight: 1,
            conns: 0,
        });
    }

    pub fn remove_endpoint(&self, replica_id: &str) -> Result<Endpoint, ServingError> {
        let mut vs = self.lock();
        let i = vs.index_of(replica_id)?;
        let removed = vs.endpoints.remove(i);
        // Keep the rotation position relative to the remaining endpoints.
        vs.rr_last = match vs.rr_last {
            Some(l) if l > i => Some(l - 1),
            Some(l) if l == i => l.checked_sub(1).or(vs.endpoints.len().checked_sub(1)),
            other => other,
        };
        Ok(removed)
    }

    /// Picks an endpoint and opens a connection on it.
    pub fn dispatch(&self) -> Result<Dispatch, ServingError> {
        let mut vs = self.lock();
        let views = vs.views();
        let algorithm = vs.algorithm;
        let i = pick(algorithm, &views, &mut vs.rr_last)?;
        vs.endpoints[i].conns += 1;
        Ok(Dispatch {
            index: i,
            replica_id: vs.endpoints[i].replica_id.clone(),
        })
    }

    /// Closes a connection opened by [`Frontend::dispatch`].
    pub fn complete(&self, replica_id: &str) -> Result<(), ServingError> {
        let mut vs = self.lock();
        let i = vs.index_of(replica_id)?;
        let e = &mut vs.endpoints[i];
        e.conns = e.conns.checked_sub(1).ok_or(ServingError::ConnectionUnderflow)?;
        Ok(())
    }

    /// Returns the previous weight.
    pub fn set_weight(&self, replica_id: &str, weight: u32) -> Result<u32, ServingError> {
        if weight > 1 {
            return Err(ServingError::InvalidWeight(weight));
        }
        let mut vs = self.lock();
        let i = vs.index_of(replica_id)?;
        Ok(std::mem::replace(&mut vs.endpoints[i].weight, weight))
    }

    pub fn list_endpoints(&self) -> Vec<Endpoint> {
        self.lock().endpoints.clone()
    }

    pub fn endpoint(&self, replica_id: &str) -> Result<Endpoint, ServingError> {
        let vs = self.lock();
        Ok(vs.endpoints[vs.index_of(replica_id)?].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn views(w: &[u32], c: &[u32]) -> Vec<EndpointView> {
        w.iter()
            .zip(c)
            .map(|(&weight, &conns)| EndpointView { weight, conns })
            .collect()
    }

    #[test]
    fn sed_prefers_fewest_connections() {
        let v = views(&[1, 1, 1], &[3, 0, 5]);
        assert_eq!(pick(Algorithm::ShortestExpectedDelay, &v, &mut None).unwrap(), 1);
    }

    #[test]
    fn lc_ties_go_to_lowest_index() {
        let v = views(&[1, 1], &[1, 1]);
        assert_eq!(pick(Algorithm::LeastConnection, &v, &mut None).unwrap(), 0);
    }

    #[test]
    fn rr_skips_zero_weight() {
        let v = views(&[1, 0, 1], &[0, 0, 0]);
        let mut last = None;
        let seq: Vec<_> = (0..5)
            .map(|_| pick(Algorithm::RoundRobin, &v, &mut last).unwrap())
            .collect();
        assert_eq!(seq, vec![0, 2, 0, 2, 0]);
    }

    #[test]
    fn all_zero_is_an_error() {
        let v = views(&[0, 0], &[0, 0]);
        for a in [
            Algorithm::RoundRobin,
            Algorithm::LeastConnection,
            Algorithm::ShortestExpectedDelay,
        ] {
            assert_eq!(pick(a, &v, &mut None), Err(ServingError::NoEligibleEndpoint));
        }
    }

    #[test]
    fn restored_endpoint_rejoins_rotation_in_place() {
        let fe = Frontend::new("svc", Algorithm::RoundRobin);
        for id in ["a", "b", "c"] {
            fe.add_endpoint(id, NodeId::new("n"));
        }
        let mut trace = Vec::new();
        let mut go = |fe: &Frontend, k: usize| {
            for _ in 0..k {
                let d = fe.dispatch().unwrap();
                fe.complete(&d.replica_id).unwrap();
                trace.push(d.replica_id);
            }
        };
        go(&fe, 1);
        fe.set_weight("b", 0).unwrap();
        go(&fe, 3);
        fe.set_weight("b", 1).unwrap();
        go(&fe, 4);
        assert_eq!(trace, ["a", "c", "a", "c", "a", "b", "c", "a"]);
    }

    #[test]
    fn zero_weight_gets_no_new_requests() {
        let fe = Frontend::new("svc", Algorithm::ShortestExpectedDelay);
        fe.add_endpoint("a", NodeId::new("n0"));
        fe.add_endpoint("b", NodeId::new("n1"));
        fe.set_weight("a", 0).unwrap();
        for _ in 0..1000 {
            assert_eq!(fe.dispatch().unwrap().replica_id, "b");
        }
        assert_eq!(fe.endpoint("a").unwrap().conns, 0);
        assert_eq!(fe.endpoint("b").unwrap().conns, 1000);
        assert_eq!(fe.set_weight("a", 2), Err(ServingError::InvalidWeight(2)));
        assert!(matches!(fe.set_weight("z", 1), Err(ServingError::UnknownEndpoint(_))));
    }

    #[test]
    fn concurrent_dispatch_balances_counters() {
        let fe = Frontend::new("svc", Algorithm::LeastConnection);
        for i in 0..4 {
            fe.add_endpoint(format!("r{i}"), NodeId::new(format!("n{i}")));
        }
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let fe = fe.clone();
                std::thread::spawn(move || {
                    for k in 0..500 {
                        let d = fe.dispatch().unwrap();
                        if (k + t) % 7 == 0 {
                            fe.set_weight(&d.replica_id, 1).unwrap();
                        }
                        fe.complete(&d.replica_id).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(fe.list_endpoints().iter().all(|e| e.conns == 0));
    }
}
