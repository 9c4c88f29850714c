//! Dynamic message passing: L rounds of node-to-hyperedge then
//! hyperedge-to-node attention updates with residual connections.
//!
//! Node-to-hyperedge: each hyperedge attends over its member nodes with
//! scaled dot-product scores between the projected edge (`W_e`) and the
//! projected members (`W_g`), softmax-normalized over the member set, and
//! adds the ReLU of the attention-weighted sum of projected members to its
//! previous state. Aggregating the `W_g`-projected members (rather than raw
//! node features) keeps the whole update a strict residual: with `W_g = 0`
//! the message vanishes exactly.
//!
//! Hyperedge-to-node: each node scores its (at most 4) incident hyperedges
//! the same way, softmax-normalized over the incident set; every incident
//! edge's weighted state goes through its family's two-layer MLP and the sum
//! lands on the node as a residual. Boundary frames simply have one
//! short-term edge instead of two.

use std::rc::Rc;

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::hypergraph::{Family, GraphVars, Incidence};
use crate::params::{ParamId, ParamStore, ParamVars, glorot, zeros1};
use crate::pose_encoder::LOGIT_CLAMP;
use crate::real::Real;
use crate::tape::{Segments, Tape, Var};

/// Which hyperedge families participate. Disabled families contribute no
/// messages and are excluded from the node-side softmax; tensor shapes are
/// unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HyperedgeFlags {
    pub short_term: bool,
    pub long_term: bool,
    pub spatial: bool,
}

impl Default for HyperedgeFlags {
    fn default() -> Self {
        HyperedgeFlags { short_term: true, long_term: true, spatial: true }
    }
}

impl HyperedgeFlags {
    pub fn validate(&self) -> Result<()> {
        if !(self.short_term || self.long_term || self.spatial) {
            return Err(CoreError::ConfigInvalid("at least one hyperedge family must be enabled".into()));
        }
        Ok(())
    }

    pub fn enabled(&self, family: Family) -> bool {
        match family {
            Family::Short => self.short_term,
            Family::Long => self.long_term,
            Family::Spatial => self.spatial,
        }
    }
}

/// Two-layer ReLU MLP, D -> D.
#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl MlpParams {
    fn init<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, d: usize, name: &str) -> Self {
        MlpParams {
            w1: store.add(format!("{name}.w1"), glorot(rng, d, d)),
            b1: store.add(format!("{name}.b1"), zeros1(d)),
            w2: store.add(format!("{name}.w2"), glorot(rng, d, d)),
            b2: store.add(format!("{name}.b2"), zeros1(d)),
        }
    }

    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, vars: &ParamVars, x: Var) -> Var {
        let h = tape.matmul(x, vars.get(self.w1));
        let h = tape.add_row_bias(h, vars.get(self.b1));
        let h = tape.relu(h);
        let y = tape.matmul(h, vars.get(self.w2));
        tape.add_row_bias(y, vars.get(self.b2))
    }
}

#[derive(Debug, Clone)]
pub struct MpLayerParams {
    pub w_e: ParamId,
    pub w_g: ParamId,
    pub mlp_short: MlpParams,
    pub mlp_long: MlpParams,
    pub mlp_spatial: MlpParams,
}

/// Per-layer projections and MLPs; layers do not share weights.
#[derive(Debug, Clone)]
pub struct MessagePassingParams {
    pub dim: usize,
    pub layers: Vec<MpLayerParams>,
}

impl MessagePassingParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        layer_count: usize,
    ) -> Result<Self> {
        if layer_count < 1 {
            return Err(CoreError::ConfigInvalid("layer count L must be >= 1".into()));
        }
        let layers = (0..layer_count)
            .map(|l| MpLayerParams {
                w_e: store.add(format!("mp.{l}.w_e"), glorot(rng, d, d)),
                w_g: store.add(format!("mp.{l}.w_g"), glorot(rng, d, d)),
                mlp_short: MlpParams::init(store, rng, d, &format!("mp.{l}.mlp_short")),
                mlp_long: MlpParams::init(store, rng, d, &format!("mp.{l}.mlp_long")),
                mlp_spatial: MlpParams::init(store, rng, d, &format!("mp.{l}.mlp_spatial")),
            })
            .collect();
        Ok(MessagePassingParams { dim: d, layers })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// Softmax weights of one layer, for export and the normalization checks.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer: usize,
    /// `[N, T-1, 2]` node->edge weights of short-term edges.
    pub alpha_short: Option<Array3<f64>>,
    /// `[N, T]` node->edge weights of long-term edges.
    pub alpha_long: Option<Array2<f64>>,
    /// `[T, N]` node->edge weights of spatial edges.
    pub alpha_spatial: Option<Array2<f64>>,
    /// Per node (flat id): incident (family, edge index, weight).
    pub beta: Vec<Vec<(Family, usize, f64)>>,
}

/// Aggregation terms actually computed in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasuredMessages {
    pub hyperedge_phase: u64,
    pub node_phase: u64,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub attention: AttentionRecord,
    pub messages: MeasuredMessages,
}

struct FamilyWiring {
    /// Flattened (edge, member) entries: member node id per entry.
    member_nodes: Rc<Vec<usize>>,
    /// Edge index per entry (parallel to `member_nodes`).
    edge_of_entry: Rc<Vec<usize>>,
    /// Per-edge contiguous spans over the entries.
    spans: Segments,
}

fn family_wiring(inc: &Incidence, family: Family) -> FamilyWiring {
    let count = match family {
        Family::Short => inc.short_edge_count(),
        Family::Long => inc.long_edge_count(),
        Family::Spatial => inc.spatial_edge_count(),
    };
    let mut member_nodes = Vec::new();
    let mut edge_of_entry = Vec::new();
    let mut spans = Vec::with_capacity(count);
    for e in 0..count {
        let members = inc.edge_members(crate::hypergraph::EdgeRef { family, index: e });
        let lo = member_nodes.len();
        for m in members {
            member_nodes.push(m);
            edge_of_entry.push(e);
        }
        spans.push((lo, member_nodes.len()));
    }
    FamilyWiring {
        member_nodes: Rc::new(member_nodes),
        edge_of_entry: Rc::new(edge_of_entry),
        spans: Rc::new(spans),
    }
}

/// One node-to-hyperedge family update. Returns the updated edge tensor and
/// the per-entry attention weights.
fn update_family<F: Real>(
    tape: &mut Tape<F>,
    edges: Var,
    gw: Var,
    w_e: Var,
    wiring: &FamilyWiring,
    scale: F,
) -> (Var, Vec<f64>) {
    let clamp = F::from_f64v(LOGIT_CLAMP);
    let ew = tape.matmul(edges, w_e);
    let q = tape.gather_rows(ew, wiring.edge_of_entry.clone());
    let k = tape.gather_rows(gw, wiring.member_nodes.clone());
    let scores = tape.row_dot(q, k);
    let scores = tape.scale(scores, scale);
    let alpha = tape.segment_softmax(scores, wiring.spans.clone(), clamp);
    let weighted = tape.scale_rows(k, alpha);
    let msg = tape.segment_sum_rows(weighted, wiring.spans.clone());
    let act = tape.relu(msg);
    let updated = tape.add(act, edges);
    let alpha_values = tape.value(alpha).iter().map(|v| v.to_f64v()).collect();
    (updated, alpha_values)
}

/// Node-to-hyperedge phase (Eqs. 8-13 shape): update every enabled family.
pub fn update_hyperedges<F: Real>(
    tape: &mut Tape<F>,
    state: &GraphVars,
    layer: &MpLayerParams,
    vars: &ParamVars,
    inc: &Incidence,
    flags: HyperedgeFlags,
) -> (GraphVars, AttentionRecord, u64) {
    let d = tape.value(state.nodes).shape()[1];
    let scale = F::from_f64v(1.0 / (d as f64).sqrt());
    let gw = tape.matmul(state.nodes, vars.get(layer.w_g));
    let (n, t) = (inc.persons, inc.frames);
    let mut messages = 0u64;

    let mut record = AttentionRecord {
        layer: state.layer,
        alpha_short: None,
        alpha_long: None,
        alpha_spatial: None,
        beta: Vec::new(),
    };

    let e1 = if flags.short_term {
        let wiring = family_wiring(inc, Family::Short);
        messages += wiring.member_nodes.len() as u64;
        let (updated, alpha) = update_family(tape, state.e1, gw, vars.get(layer.w_e), &wiring, scale);
        record.alpha_short = Some(Array3::from_shape_fn((n, t - 1, 2), |(pi, ti, m)| {
            alpha[(pi * (t - 1) + ti) * 2 + m]
        }));
        updated
    } else {
        state.e1
    };

    let e2 = if flags.long_term {
        let wiring = family_wiring(inc, Family::Long);
        messages += wiring.member_nodes.len() as u64;
        let (updated, alpha) = update_family(tape, state.e2, gw, vars.get(layer.w_e), &wiring, scale);
        record.alpha_long = Some(Array2::from_shape_fn((n, t), |(pi, ti)| alpha[pi * t + ti]));
        updated
    } else {
        state.e2
    };

    let e3 = if flags.spatial {
        let wiring = family_wiring(inc, Family::Spatial);
        messages += wiring.member_nodes.len() as u64;
        let (updated, alpha) = update_family(tape, state.e3, gw, vars.get(layer.w_e), &wiring, scale);
        record.alpha_spatial = Some(Array2::from_shape_fn((t, n), |(ti, pi)| alpha[ti * n + pi]));
        updated
    } else {
        state.e3
    };

    (GraphVars { nodes: state.nodes, e1, e2, e3, layer: state.layer }, record, messages)
}

/// Hyperedge-to-node phase (Eq. 17 shape): every node aggregates its
/// incident, already-updated hyperedges through family MLPs.
/// `record` receives the per-node softmax weights.
pub fn update_nodes<F: Real>(
    tape: &mut Tape<F>,
    state: &GraphVars,
    layer: &MpLayerParams,
    vars: &ParamVars,
    inc: &Incidence,
    flags: HyperedgeFlags,
    record: &mut AttentionRecord,
) -> (GraphVars, u64) {
    let d = tape.value(state.nodes).shape()[1];
    let scale = F::from_f64v(1.0 / (d as f64).sqrt());
    let clamp = F::from_f64v(LOGIT_CLAMP);
    let gw = tape.matmul(state.nodes, vars.get(layer.w_g));

    // enabled families in fixed order with row offsets into the concatenated
    // edge tensors
    let mut fam_order: Vec<(Family, Var, usize)> = Vec::new();
    let mut offset = 0usize;
    for (family, var, count) in [
        (Family::Short, state.e1, inc.short_edge_count()),
        (Family::Long, state.e2, inc.long_edge_count()),
        (Family::Spatial, state.e3, inc.spatial_edge_count()),
    ] {
        if flags.enabled(family) {
            fam_order.push((family, var, offset));
            offset += count;
        }
    }
    let raw_edge_vars: Vec<Var> = fam_order.iter().map(|&(_, v, _)| v).collect();
    let raw_all = if raw_edge_vars.len() == 1 {
        raw_edge_vars[0]
    } else {
        tape.concat_rows(&raw_edge_vars)
    };
    let proj_all = tape.matmul(raw_all, vars.get(layer.w_e));
    let gid_of = |family: Family, index: usize| -> usize {
        let &(_, _, off) = fam_order.iter().find(|&&(f, _, _)| f == family).expect("family enabled");
        off + index
    };

    // per-node incident entries, node-major
    let node_count = inc.persons * inc.frames;
    let mut entry_node = Vec::new();
    let mut entry_gid = Vec::new();
    let mut entry_family = Vec::new();
    let mut entry_edge_index = Vec::new();
    let mut node_spans = Vec::with_capacity(node_count);
    for node in 0..node_count {
        let lo = entry_node.len();
        for e in &inc.node_incident[node] {
            if flags.enabled(e.family) {
                entry_node.push(node);
                entry_gid.push(gid_of(e.family, e.index));
                entry_family.push(e.family);
                entry_edge_index.push(e.index);
            }
        }
        node_spans.push((lo, entry_node.len()));
    }
    let total_entries = entry_node.len() as u64;
    let entry_node = Rc::new(entry_node);
    let entry_gid = Rc::new(entry_gid);
    let node_spans: Segments = Rc::new(node_spans);

    let q = tape.gather_rows(gw, entry_node.clone());
    let k = tape.gather_rows(proj_all, entry_gid.clone());
    let scores = tape.row_dot(k, q);
    let scores = tape.scale(scores, scale);
    let beta = tape.segment_softmax(scores, node_spans.clone(), clamp);
    let raw_rows = tape.gather_rows(raw_all, entry_gid.clone());
    let scaled = tape.scale_rows(raw_rows, beta);

    // per family: route through that family's MLP, then scatter onto nodes
    let mut contributions = vec![state.nodes];
    for &(family, _, _) in &fam_order {
        let positions: Vec<usize> =
            (0..entry_family.len()).filter(|&i| entry_family[i] == family).collect();
        // contiguous per-node spans within the filtered list
        let mut spans_f = Vec::with_capacity(node_count);
        let mut cursor = 0usize;
        for node in 0..node_count {
            let lo = cursor;
            while cursor < positions.len() && entry_node[positions[cursor]] == node {
                cursor += 1;
            }
            spans_f.push((lo, cursor));
        }
        let sub = tape.gather_rows(scaled, Rc::new(positions));
        let mlp = match family {
            Family::Short => &layer.mlp_short,
            Family::Long => &layer.mlp_long,
            Family::Spatial => &layer.mlp_spatial,
        };
        let transformed = mlp.apply(tape, vars, sub);
        contributions.push(tape.segment_sum_rows(transformed, Rc::new(spans_f)));
    }
    let nodes_new = tape.add_n(&contributions);

    // record the per-node weights
    let beta_vals = tape.value(beta);
    let mut beta_record = Vec::with_capacity(node_count);
    for node in 0..node_count {
        let (lo, hi) = node_spans[node];
        let mut entries = Vec::with_capacity(hi - lo);
        for i in lo..hi {
            entries.push((entry_family[i], entry_edge_index[i], beta_vals[[i]].to_f64v()));
        }
        beta_record.push(entries);
    }
    record.beta = beta_record;

    (
        GraphVars { nodes: nodes_new, e1: state.e1, e2: state.e2, e3: state.e3, layer: state.layer + 1 },
        total_entries,
    )
}

/// L rounds of both phases. The final node grid `[N*T, D]` is the per-person
/// representation sequence Z (person-major rows).
pub fn run<F: Real>(
    tape: &mut Tape<F>,
    state0: GraphVars,
    params: &MessagePassingParams,
    vars: &ParamVars,
    inc: &Incidence,
    flags: HyperedgeFlags,
) -> Result<(GraphVars, Vec<LayerTrace>)> {
    flags.validate()?;
    if state0.layer != 0 {
        return Err(CoreError::ConfigInvalid("message passing must start at layer 0".into()));
    }
    let mut state = state0;
    let mut traces = Vec::with_capacity(params.layer_count());
    for layer in &params.layers {
        let (with_edges, mut record, edge_msgs) =
            update_hyperedges(tape, &state, layer, vars, inc, flags);
        let (next, node_msgs) =
            update_nodes(tape, &with_edges, layer, vars, inc, flags, &mut record);
        if tape.value(next.nodes).iter().any(|v| !v.to_f64v().is_finite()) {
            return Err(CoreError::NumericFailure(format!(
                "non-finite node activations after layer {}",
                state.layer
            )));
        }
        traces.push(LayerTrace {
            attention: record,
            messages: MeasuredMessages { hyperedge_phase: edge_msgs, node_phase: node_msgs },
        });
        state = next;
    }
    Ok((state, traces))
}

#[cfg(test)]
pub(crate) fn test_mp_setup<F: Real>(
    seed: u64,
    n: usize,
    t: usize,
    d: usize,
    layers: usize,
) -> (ParamStore<F>, MessagePassingParams, Incidence, Array2<F>) {
    use rand::Rng as _;
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MessagePassingParams::init(&mut store, &mut rng, d, layers).unwrap();
    let inc = Incidence::new(n, t).unwrap();
    let nodes = Array2::from_shape_fn((n * t, d), |_| F::from_f64v(rng.random_range(-1.0..1.0)));
    (store, params, inc, nodes)
}
