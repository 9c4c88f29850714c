//! The hypervariate graph over (person, frame) nodes: three hyperedge
//! families, their incidence structure, mean-aggregation initialization,
//! and message/complexity accounting.
//!
//! Node `(n, t)` has flat id `n*T + t`. Short-term edge `(n, t)` joins frames
//! `t` and `t+1` of person `n`; the long-term edge of person `n` joins all of
//! their `T` nodes; the spatial edge of frame `t` joins all `N` persons at
//! that frame.

use std::rc::Rc;

use ndarray::Array2;
use serde_json::{Value, json};

use crate::error::{CoreError, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Short,
    Long,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRef {
    pub family: Family,
    pub index: usize,
}

/// Static incidence of the hypergraph for a given (N, T).
#[derive(Debug, Clone)]
pub struct Incidence {
    pub persons: usize,
    pub frames: usize,
    /// Per node (flat id), its incident edges ordered short(asc), long, spatial.
    pub node_incident: Vec<Vec<EdgeRef>>,
}

impl Incidence {
    pub fn new(persons: usize, frames: usize) -> Result<Self> {
        if frames < 2 {
            return Err(CoreError::TooFewFrames(frames));
        }
        if persons < 1 {
            return Err(CoreError::ConfigInvalid("need at least one person".into()));
        }
        let (n, t) = (persons, frames);
        let mut node_incident = Vec::with_capacity(n * t);
        for pi in 0..n {
            for ti in 0..t {
                let mut inc = Vec::with_capacity(4);
                if ti > 0 {
                    inc.push(EdgeRef { family: Family::Short, index: pi * (t - 1) + ti - 1 });
                }
                if ti + 1 < t {
                    inc.push(EdgeRef { family: Family::Short, index: pi * (t - 1) + ti });
                }
                inc.push(EdgeRef { family: Family::Long, index: pi });
                inc.push(EdgeRef { family: Family::Spatial, index: ti });
                node_incident.push(inc);
            }
        }
        Ok(Incidence { persons, frames, node_incident })
    }

    pub fn node_id(&self, person: usize, frame: usize) -> usize {
        person * self.frames + frame
    }

    pub fn short_edge_count(&self) -> usize {
        self.persons * (self.frames - 1)
    }

    pub fn long_edge_count(&self) -> usize {
        self.persons
    }

    pub fn spatial_edge_count(&self) -> usize {
        self.frames
    }

    /// Member node ids of an edge, in ascending order.
    pub fn edge_members(&self, edge: EdgeRef) -> Vec<usize> {
        let t = self.frames;
        match edge.family {
            Family::Short => {
                let person = edge.index / (t - 1);
                let ti = edge.index % (t - 1);
                vec![person * t + ti, person * t + ti + 1]
            }
            Family::Long => (0..t).map(|ti| edge.index * t + ti).collect(),
            Family::Spatial => (0..self.persons).map(|pi| pi * t + edge.index).collect(),
        }
    }

    /// JSON debug dump of the incidence map and per-edge member lists.
    pub fn debug_json(&self) -> Value {
        let nodes: Vec<Value> = (0..self.persons * self.frames)
            .map(|id| {
                let (pi, ti) = (id / self.frames, id % self.frames);
                json!({
                    "person": pi,
                    "frame": ti,
                    "incident": self.node_incident[id]
                        .iter()
                        .map(|e| json!({"family": e.family, "index": e.index}))
                        .collect::<Vec<_>>(),
                })
            })
            .collect();
        let edges = |family: Family, count: usize| -> Vec<Value> {
            (0..count)
                .map(|i| {
                    json!({
                        "family": family,
                        "index": i,
                        "members": self.edge_members(EdgeRef { family, index: i }),
                    })
                })
                .collect::<Vec<_>>()
        };
        json!({
            "persons": self.persons,
            "frames": self.frames,
            "nodes": nodes,
            "edges": {
                "short": edges(Family::Short, self.short_edge_count()),
                "long": edges(Family::Long, self.long_edge_count()),
                "spatial": edges(Family::Spatial, self.spatial_edge_count()),
            },
        })
    }
}

/// Tape handles for one layer of the graph state.
#[derive(Debug, Clone, Copy)]
pub struct GraphVars {
    /// `[N*T, D]`
    pub nodes: Var,
    /// `[N*(T-1), D]`
    pub e1: Var,
    /// `[N, D]`
    pub e2: Var,
    /// `[T, D]`
    pub e3: Var,
    pub layer: usize,
}

/// Materialized node and hyperedge values of one layer.
#[derive(Debug, Clone)]
pub struct HypergraphState<F: Real> {
    pub nodes: Array2<F>,
    pub e1: Array2<F>,
    pub e2: Array2<F>,
    pub e3: Array2<F>,
    pub layer: usize,
}

impl<F: Real> HypergraphState<F> {
    pub fn from_vars(tape: &Tape<F>, vars: &GraphVars) -> Self {
        let to2 = |v: Var| {
            tape.value(v)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("graph tensors are 2-d")
                .to_owned()
        };
        HypergraphState {
            nodes: to2(vars.nodes),
            e1: to2(vars.e1),
            e2: to2(vars.e2),
            e3: to2(vars.e3),
            layer: vars.layer,
        }
    }
}

/// Mean-aggregation hyperedge initialization from layer-0 nodes.
///
/// Hyperedges are initialized once from the initial nodes; later layers only
/// apply residual updates and never re-aggregate.
pub fn init_hyperedges<F: Real>(tape: &mut Tape<F>, nodes: Var, inc: &Incidence) -> Result<GraphVars> {
    if inc.frames < 2 {
        return Err(CoreError::TooFewFrames(inc.frames));
    }
    let (n, t) = (inc.persons, inc.frames);
    debug_assert_eq!(tape.value(nodes).shape()[0], n * t);

    // short: consecutive-frame pairs, person-major
    let mut pair_idx = Vec::with_capacity(2 * n * (t - 1));
    for pi in 0..n {
        for ti in 0..t - 1 {
            pair_idx.push(pi * t + ti);
            pair_idx.push(pi * t + ti + 1);
        }
    }
    let pairs = tape.gather_rows(nodes, Rc::new(pair_idx));
    let e1 = tape.mean_pool_blocks(pairs, 2);

    // long: nodes are already person-major, so pooling over T rows works directly
    let e2 = tape.mean_pool_blocks(nodes, t);

    // spatial: regroup frame-major, then pool over N rows
    let mut frame_idx = Vec::with_capacity(n * t);
    for ti in 0..t {
        for pi in 0..n {
            frame_idx.push(pi * t + ti);
        }
    }
    let by_frame = tape.gather_rows(nodes, Rc::new(frame_idx));
    let e3 = tape.mean_pool_blocks(by_frame, n);

    Ok(GraphVars { nodes, e1, e2, e3, layer: 0 })
}

/// Analytic message/complexity accounting for one message-passing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct MessageCounts {
    /// `N*T*d*4 + (2*N*T + N*(T-1))*d` — node updates with k = 4 plus the
    /// three hyperedge-update families, in the paper-style accounting.
    pub unitygraph_cost: u64,
    /// `(N*T)^2 * d` for the fully-connected baseline graph.
    pub fully_connected_cost: u64,
    /// Exact aggregation terms of the hyperedge-update phase:
    /// `2*N*(T-1) + N*T + N*T`.
    pub hyperedge_phase_messages: u64,
    /// Exact aggregation terms of the node-update phase: interior nodes have
    /// 4 incident hyperedges, boundary frames 3, so `N*(4*T - 2)`.
    pub node_phase_messages: u64,
}

pub fn count_messages(n: usize, t: usize, d: usize) -> MessageCounts {
    let (n, t, d) = (n as u64, t as u64, d as u64);
    MessageCounts {
        unitygraph_cost: n * t * d * 4 + (2 * n * t + n * (t - 1)) * d,
        fully_connected_cost: (n * t) * (n * t) * d,
        hyperedge_phase_messages: 2 * n * (t - 1) + 2 * n * t,
        node_phase_messages: n * (4 * t - 2),
    }
}
