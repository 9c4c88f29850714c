//! Autoregressive interactive decoding with per-step relation reasoning.
//!
//! A GRU consumes the projected representation sequence of each person plus
//! the projected last observed pose, then rolls forward one predicted frame
//! at a time. After every frame the relation-reasoning module recomputes the
//! pairwise interaction terms — from the final graph nodes on the first step
//! and from the previous reasoning representations afterwards — and folds
//! them into each person's reasoning state:
//!
//!   r[n] = sum_m I[n,m] + y[n]
//!
//! Poses are predicted as residuals on the previous pose, which keeps the
//! rollout anchored to the last observation.
//!
//! All per-step tensors are `[N, rows]` with persons as rows, so the whole
//! scene decodes in lockstep.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore, ParamVars, glorot, zeros1};
use crate::pose_encoder::LOGIT_CLAMP;
use crate::real::Real;
use crate::tape::{Segments, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub wxz: ParamId,
    pub whz: ParamId,
    pub bz: ParamId,
    pub wxr: ParamId,
    pub whr: ParamId,
    pub br: ParamId,
    pub wxh: ParamId,
    pub whh: ParamId,
    pub bh: ParamId,
}

impl GruParams {
    fn init<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, h: usize, name: &str) -> Self {
        GruParams {
            wxz: store.add(format!("{name}.wxz"), glorot(rng, h, h)),
            whz: store.add(format!("{name}.whz"), glorot(rng, h, h)),
            bz: store.add(format!("{name}.bz"), zeros1(h)),
            wxr: store.add(format!("{name}.wxr"), glorot(rng, h, h)),
            whr: store.add(format!("{name}.whr"), glorot(rng, h, h)),
            br: store.add(format!("{name}.br"), zeros1(h)),
            wxh: store.add(format!("{name}.wxh"), glorot(rng, h, h)),
            whh: store.add(format!("{name}.whh"), glorot(rng, h, h)),
            bh: store.add(format!("{name}.bh"), zeros1(h)),
        }
    }
}

/// Recurrent predictor: input projections, the GRU cell, and the pose readout.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub hidden: usize,
    pub pose_dim: usize,
    pub proj_rep: ParamId,
    pub b_rep: ParamId,
    pub proj_pose: ParamId,
    pub b_pose: ParamId,
    pub gru: GruParams,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

impl DecoderParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        hidden: usize,
        pose_dim: usize,
    ) -> Result<Self> {
        if hidden < 1 {
            return Err(CoreError::ConfigInvalid("decoder hidden size must be >= 1".into()));
        }
        Ok(DecoderParams {
            hidden,
            pose_dim,
            proj_rep: store.add("decoder.proj_rep", glorot(rng, d, hidden)),
            b_rep: store.add("decoder.b_rep", zeros1(hidden)),
            proj_pose: store.add("decoder.proj_pose", glorot(rng, pose_dim, hidden)),
            b_pose: store.add("decoder.b_pose", zeros1(hidden)),
            gru: GruParams::init(store, rng, hidden, "decoder.gru"),
            w_out: store.add("decoder.w_out", glorot(rng, hidden, pose_dim)),
            b_out: store.add("decoder.b_out", zeros1(pose_dim)),
        })
    }
}

/// Relation reasoning: scaled dot-product attention between persons with a
/// value projection back to pose shape. Keys/queries/values come from the
/// final graph nodes on the first step (`*_g`, D-dimensional inputs) and
/// from the pose-shaped reasoning vectors afterwards (`*_r`).
#[derive(Debug, Clone)]
pub struct R2mParams {
    pub att_dim: usize,
    pub pose_dim: usize,
    pub wq_g: ParamId,
    pub wk_g: ParamId,
    pub wv_g: ParamId,
    pub wq_r: ParamId,
    pub wk_r: ParamId,
    pub wv_r: ParamId,
}

impl R2mParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        att_dim: usize,
        pose_dim: usize,
    ) -> Self {
        R2mParams {
            att_dim,
            pose_dim,
            wq_g: store.add("r2m.wq_g", glorot(rng, d, att_dim)),
            wk_g: store.add("r2m.wk_g", glorot(rng, d, att_dim)),
            wv_g: store.add("r2m.wv_g", glorot(rng, d, pose_dim)),
            wq_r: store.add("r2m.wq_r", glorot(rng, pose_dim, att_dim)),
            wk_r: store.add("r2m.wk_r", glorot(rng, pose_dim, att_dim)),
            wv_r: store.add("r2m.wv_r", glorot(rng, pose_dim, pose_dim)),
        }
    }
}

/// Ordered pairs (n, m), m != n, grouped by n with m ascending.
fn pair_wiring(n: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>, Segments, Vec<(usize, usize)>) {
    let mut src_n = Vec::new();
    let mut src_m = Vec::new();
    let mut spans = Vec::with_capacity(n);
    let mut pairs = Vec::new();
    for a in 0..n {
        let lo = src_n.len();
        for b in 0..n {
            if b != a {
                src_n.push(a);
                src_m.push(b);
                pairs.push((a, b));
            }
        }
        spans.push((lo, src_n.len()));
    }
    (Rc::new(src_n), Rc::new(src_m), Rc::new(spans), pairs)
}

/// Pairwise interaction terms from a `[N, src_dim]` source tensor.
/// Returns per-person interaction sums `[N, pose_dim]` and the individual
/// `I[n,m]` rows (grouped by n, m ascending) for the trace.
fn interaction_terms<F: Real>(
    tape: &mut Tape<F>,
    src: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    att_dim: usize,
    persons: usize,
) -> (Var, Var, Vec<(usize, usize)>) {
    let clamp = F::from_f64v(LOGIT_CLAMP);
    let scale = F::from_f64v(1.0 / (att_dim as f64).sqrt());
    let (src_n, src_m, spans, pairs) = pair_wiring(persons);

    let q = tape.matmul(src, wq);
    let k = tape.matmul(src, wk);
    let v = tape.matmul(src, wv);
    let qn = tape.gather_rows(q, src_n);
    let km = tape.gather_rows(k, src_m.clone());
    let scores = tape.row_dot(qn, km);
    let scores = tape.scale(scores, scale);
    let alpha = tape.segment_softmax(scores, spans.clone(), clamp);
    let vm = tape.gather_rows(v, src_m);
    let i_rows = tape.scale_rows(vm, alpha);
    let sums = tape.segment_sum_rows(i_rows, spans);
    (sums, i_rows, pairs)
}

/// Decoder state after predicting the frame at offset `step` (1-based within
/// the prediction window).
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub hidden: Var,
    pub y_prev: Var,
    pub r_prev: Var,
    pub step: usize,
    pub p_total: usize,
    pub persons: usize,
}

/// Outputs of one decoded frame.
#[derive(Debug, Clone)]
pub struct StepVars {
    pub y: Var,
    pub r: Var,
    /// Individual interaction rows, aligned with `pairs`.
    pub i_rows: Var,
    pub pairs: Vec<(usize, usize)>,
}

fn gru_step<F: Real>(tape: &mut Tape<F>, gru: &GruParams, vars: &ParamVars, h: Var, u: Var) -> Var {
    let uz = tape.matmul(u, vars.get(gru.wxz));
    let hz = tape.matmul(h, vars.get(gru.whz));
    let z = tape.add(uz, hz);
    let z = tape.add_row_bias(z, vars.get(gru.bz));
    let z = tape.sigmoid(z);

    let ur = tape.matmul(u, vars.get(gru.wxr));
    let hr = tape.matmul(h, vars.get(gru.whr));
    let r = tape.add(ur, hr);
    let r = tape.add_row_bias(r, vars.get(gru.br));
    let r = tape.sigmoid(r);

    let rh = tape.mul(r, h);
    let uh = tape.matmul(u, vars.get(gru.wxh));
    let hh = tape.matmul(rh, vars.get(gru.whh));
    let cand = tape.add(uh, hh);
    let cand = tape.add_row_bias(cand, vars.get(gru.bh));
    let cand = tape.tanh(cand);

    // h' = h + z * (cand - h)
    let delta = tape.sub(cand, h);
    let zd = tape.mul(z, delta);
    tape.add(h, zd)
}

fn readout<F: Real>(tape: &mut Tape<F>, dec: &DecoderParams, vars: &ParamVars, h: Var, base: Var) -> Var {
    let y = tape.matmul(h, vars.get(dec.w_out));
    let y = tape.add_row_bias(y, vars.get(dec.b_out));
    tape.add(y, base)
}

/// Consume the representation sequence and the last observed pose, predict
/// the first future frame, and build the initial reasoning state from the
/// final graph nodes.
///
/// `z_nodes` is the `[N*T, D]` output of message passing (person-major) and
/// `x_last` the normalized last observed pose rows `[N, pose_dim]`.
pub fn first_step<F: Real>(
    tape: &mut Tape<F>,
    z_nodes: Var,
    persons: usize,
    t_observed: usize,
    x_last: Var,
    p_total: usize,
    dec: &DecoderParams,
    r2m: &R2mParams,
    vars: &ParamVars,
) -> Result<(DecoderState, StepVars)> {
    if p_total < 1 {
        return Err(CoreError::ConfigInvalid("prediction window P must be >= 1".into()));
    }
    let shape = tape.value(z_nodes).shape().to_vec();
    if shape[0] != persons * t_observed {
        return Err(CoreError::ShapeMismatch(format!(
            "z has {} rows, expected N*T = {}",
            shape[0],
            persons * t_observed
        )));
    }
    if tape.value(x_last).shape() != [persons, dec.pose_dim] {
        return Err(CoreError::ShapeMismatch("x_last shape".into()));
    }

    let h0 = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[persons, dec.hidden])));
    let mut h = h0;
    for ti in 0..t_observed {
        let idx: Vec<usize> = (0..persons).map(|pi| pi * t_observed + ti).collect();
        let token = tape.gather_rows(z_nodes, Rc::new(idx));
        let token = tape.matmul(token, vars.get(dec.proj_rep));
        let token = tape.add_row_bias(token, vars.get(dec.b_rep));
        h = gru_step(tape, &dec.gru, vars, h, token);
    }
    let pose_token = tape.matmul(x_last, vars.get(dec.proj_pose));
    let pose_token = tape.add_row_bias(pose_token, vars.get(dec.b_pose));
    h = gru_step(tape, &dec.gru, vars, h, pose_token);

    let y = readout(tape, dec, vars, h, x_last);

    // reasoning from the final-frame graph nodes
    let last_idx: Vec<usize> = (0..persons).map(|pi| pi * t_observed + t_observed - 1).collect();
    let g_last = tape.gather_rows(z_nodes, Rc::new(last_idx));
    let (sums, i_rows, pairs) = interaction_terms(
        tape,
        g_last,
        vars.get(r2m.wq_g),
        vars.get(r2m.wk_g),
        vars.get(r2m.wv_g),
        r2m.att_dim,
        persons,
    );
    let r = tape.add(sums, y);

    let state = DecoderState { hidden: h, y_prev: y, r_prev: r, step: 1, p_total, persons };
    Ok((state, StepVars { y, r, i_rows, pairs }))
}

/// Predict the next frame from the previous reasoning state.
pub fn step<F: Real>(
    tape: &mut Tape<F>,
    state: &DecoderState,
    dec: &DecoderParams,
    r2m: &R2mParams,
    vars: &ParamVars,
) -> Result<(DecoderState, StepVars)> {
    if state.step >= state.p_total {
        return Err(CoreError::StepOverflow { step: state.step + 1, last: state.p_total });
    }
    let token = tape.matmul(state.r_prev, vars.get(dec.proj_pose));
    let token = tape.add_row_bias(token, vars.get(dec.b_pose));
    let h = gru_step(tape, &dec.gru, vars, state.hidden, token);
    let y = readout(tape, dec, vars, h, state.y_prev);

    let (sums, i_rows, pairs) = interaction_terms(
        tape,
        state.r_prev,
        vars.get(r2m.wq_r),
        vars.get(r2m.wk_r),
        vars.get(r2m.wv_r),
        r2m.att_dim,
        state.persons,
    );
    let r = tape.add(sums, y);

    let next = DecoderState {
        hidden: h,
        y_prev: y,
        r_prev: r,
        step: state.step + 1,
        p_total: state.p_total,
        persons: state.persons,
    };
    Ok((next, StepVars { y, r, i_rows, pairs }))
}

/// Full rollout: first_step followed by P-1 steps.
pub fn decode<F: Real>(
    tape: &mut Tape<F>,
    z_nodes: Var,
    persons: usize,
    t_observed: usize,
    x_last: Var,
    p_total: usize,
    dec: &DecoderParams,
    r2m: &R2mParams,
    vars: &ParamVars,
) -> Result<Vec<StepVars>> {
    let (mut state, first) = first_step(tape, z_nodes, persons, t_observed, x_last, p_total, dec, r2m, vars)?;
    let mut steps = Vec::with_capacity(p_total);
    steps.push(first);
    for _ in 1..p_total {
        let (next, sv) = step(tape, &state, dec, r2m, vars)?;
        state = next;
        steps.push(sv);
    }
    Ok(steps)
}

/// Ground-truth reasoning trace: the same relation-reasoning recursion with
/// the true future poses substituted for the predictions. This produces the
/// supervision targets for the inference loss.
///
/// `y_future` holds the normalized future pose rows, one `[N, pose_dim]`
/// var per step.
pub fn teacher_forced_reasoning<F: Real>(
    tape: &mut Tape<F>,
    z_nodes: Var,
    persons: usize,
    t_observed: usize,
    y_future: &[Var],
    r2m: &R2mParams,
    vars: &ParamVars,
) -> Result<Vec<Var>> {
    if y_future.is_empty() {
        return Err(CoreError::ShapeMismatch("teacher forcing needs at least one future frame".into()));
    }
    let last_idx: Vec<usize> = (0..persons).map(|pi| pi * t_observed + t_observed - 1).collect();
    let g_last = tape.gather_rows(z_nodes, Rc::new(last_idx));
    let (sums, _, _) = interaction_terms(
        tape,
        g_last,
        vars.get(r2m.wq_g),
        vars.get(r2m.wk_g),
        vars.get(r2m.wv_g),
        r2m.att_dim,
        persons,
    );
    let mut r = tape.add(sums, y_future[0]);
    let mut out = vec![r];
    for &y in &y_future[1..] {
        let (sums, _, _) = interaction_terms(
            tape,
            r,
            vars.get(r2m.wq_r),
            vars.get(r2m.wk_r),
            vars.get(r2m.wv_r),
            r2m.att_dim,
            persons,
        );
        r = tape.add(sums, y);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) fn test_decoder_setup<F: Real>(
    seed: u64,
    d: usize,
    hidden: usize,
    pose_dim: usize,
) -> (ParamStore<F>, DecoderParams, R2mParams) {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dec = DecoderParams::init(&mut store, &mut rng, d, hidden, pose_dim).unwrap();
    let r2m = R2mParams::init(&mut store, &mut rng, d, d, pose_dim);
    (store, dec, r2m)
}
