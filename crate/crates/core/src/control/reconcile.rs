use std::time::Duration;

use serde::Serialize;

use crate::substrate::NodeId;

/// Default time a draining replica may keep connections before it is stopped.
pub const DEFAULT_DRAIN_TIMEOUT: Duration = Duration::from_secs(10);

/// Reconciler's view of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaStatus {
    pub replica_id: String,
    pub node_id: NodeId,
    pub running: bool,
    pub weight: u32,
    pub conns: u32,
    /// Set once a drain has been issued.
    pub draining_since: Option<Duration>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Start {
        replica_id: String,
        node_id: NodeId,
    },
    Restart {
        replica_id: String,
        node_id: NodeId,
    },
    /// Set weight 0 and stop once connections reach zero.
    Drain {
        replica_id: String,
    },
    Stop {
        replica_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Plan {
    pub actions: Vec<Action>,
    /// Replicas that could not be placed for lack of a free node.
    pub unplaced: usize,
}

/// Computes the actions that move `replicas` toward `desired` non-draining
/// replicas. `free_nodes` are candidate nodes in preference order and
/// `fresh_id` names the k-th new replica.
pub fn plan(
    desired: usize,
    replicas: &[ReplicaStatus],
    free_nodes: &[NodeId],
    now: Duration,
    drain_timeout: Duration,
    fresh_id: &mut dyn FnMut() -> String,
) -> Plan {
    let mut out = Plan::default();
    for r in replicas {
        match r.draining_since {
            Some(since) if r.conns == 0 || now.saturating_sub(since) >= drain_timeout || !r.running => {
                out.actions.push(Action::Stop {
                    replica_id: r.replica_id.clone(),
                });
            }
            Some(_) => {}
            None if !r.running => out.actions.push(Action::Restart {
                replica_id: r.replica_id.clone(),
                node_id: r.node_id.clone(),
            }),
            None => {}
        }
    }

    let active: Vec<&ReplicaStatus> = replicas.iter().filter(|r| r.draining_since.is_none()).collect();
    if active.len() < desired {
        let need = desired - active.len();
        for node in free_nodes.iter().take(need) {
            out.actions.push(Action::Start {
                replica_id: fresh_id(),
                node_id: node.clone(),
            });
        }
        out.unplaced = need.saturating_sub(free_nodes.len());
    } else if active.len() > desired {
        // Out-of-service replicas go first, then the most recently listed.
        let mut victims: Vec<&ReplicaStatus> = active.clone();
        victims.sort_by_key(|r| (r.running && r.weight > 0, std::cmp::Reverse(position(replicas, r))));
        for r in victims.into_iter().take(active.len() - desired) {
            out.actions
                .retain(|a| !matches!(a, Action::Restart { replica_id, .. } if *replica_id == r.replica_id));
            out.actions.push(Action::Drain {
                replica_id: r.replica_id.clone(),
            });
        }
    }
    out
}

fn position(all: &[ReplicaStatus], r: &ReplicaStatus) -> usize {
    all.iter().position(|x| x.replica_id == r.replica_id).unwrap_or(0)
}
