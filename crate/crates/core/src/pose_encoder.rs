//! Per-pose node embeddings: multi-head attention over the skeleton graph,
//! mean-pooled over joints, then a two-layer feed-forward map to D.
//!
//! Attention is masked to bone adjacency plus self-loops, so a joint only
//! attends to its skeletal neighbours. Each (person, frame) pose is encoded
//! independently; the whole N*T grid goes through in one batched pass.

use std::rc::Rc;

use ndarray::{Array2, ArrayD};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::motion::{MotionSequence, Skeleton};
use crate::params::{ParamId, ParamStore, ParamVars, glorot, zeros1};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Logit clamp shared by every softmax in the model.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub hidden_dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

impl EncoderParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        hidden_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if hidden_dim % heads != 0 {
            return Err(CoreError::ConfigInvalid(format!(
                "hidden_dim {hidden_dim} not divisible by attention_heads {heads}"
            )));
        }
        Ok(EncoderParams {
            hidden_dim,
            heads,
            wq: store.add("encoder.wq", glorot(rng, 3, hidden_dim)),
            wk: store.add("encoder.wk", glorot(rng, 3, hidden_dim)),
            wv: store.add("encoder.wv", glorot(rng, 3, hidden_dim)),
            wo: store.add("encoder.wo", glorot(rng, hidden_dim, hidden_dim)),
            bo: store.add("encoder.bo", zeros1(hidden_dim)),
            ff1_w: store.add("encoder.ff1_w", glorot(rng, hidden_dim, hidden_dim)),
            ff1_b: store.add("encoder.ff1_b", zeros1(hidden_dim)),
            ff2_w: store.add("encoder.ff2_w", glorot(rng, hidden_dim, hidden_dim)),
            ff2_b: store.add("encoder.ff2_b", zeros1(hidden_dim)),
        })
    }
}

/// Root offsets used to translation-normalize a scene before encoding:
/// person n's frame-0 root joint. The decoder adds them back before metrics.
pub fn root_offsets(observed: &MotionSequence) -> Array2<f64> {
    let n = observed.persons();
    Array2::from_shape_fn((n, 3), |(pi, c)| observed.positions[(pi, 0, 0, c)])
}

/// Flatten a scene into normalized per-joint rows `[N*T*J, 3]`, person-major.
pub fn normalized_joint_rows<F: Real>(observed: &MotionSequence, offsets: &Array2<f64>) -> Array2<F> {
    let (n, t, j, _) = observed.positions.dim();
    let mut rows = Array2::<F>::zeros((n * t * j, 3));
    for pi in 0..n {
        for ti in 0..t {
            for ji in 0..j {
                for c in 0..3 {
                    let v = observed.positions[(pi, ti, ji, c)] - offsets[(pi, c)];
                    rows[((pi * t + ti) * j + ji, c)] = F::from_f64v(v);
                }
            }
        }
    }
    rows
}

/// Encode a batch of poses given as joint rows `[B*J, 3]` into node
/// embeddings `[B, D]`. `B` is any number of poses sharing one skeleton.
pub fn encode_joint_rows<F: Real>(
    tape: &mut Tape<F>,
    joint_rows: Var,
    skeleton: &Skeleton,
    params: &EncoderParams,
    vars: &ParamVars,
) -> Result<Var> {
    let j = skeleton.joint_count();
    let rows = tape.value(joint_rows).shape()[0];
    if rows % j != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "joint rows {rows} not a multiple of J = {j}"
        )));
    }
    let d = params.hidden_dim;
    let dh = d / params.heads;
    let mask = Rc::new(skeleton.attention_mask());
    let clamp = F::from_f64v(LOGIT_CLAMP);
    let scale = F::from_f64v(1.0 / (dh as f64).sqrt());

    let q = tape.matmul(joint_rows, vars.get(params.wq));
    let k = tape.matmul(joint_rows, vars.get(params.wk));
    let v = tape.matmul(joint_rows, vars.get(params.wv));

    let mut head_outs = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let scores = tape.block_matmul_nt(qh, kh, j);
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax_rows(scores, mask.clone(), clamp);
        head_outs.push(tape.block_matmul_nn(probs, vh, j));
    }
    let concat = if head_outs.len() == 1 { head_outs[0] } else { tape.concat_cols(&head_outs) };

    let proj = tape.matmul(concat, vars.get(params.wo));
    let proj = tape.add_row_bias(proj, vars.get(params.bo));
    let pooled = tape.mean_pool_blocks(proj, j);

    let h1 = tape.matmul(pooled, vars.get(params.ff1_w));
    let h1 = tape.add_row_bias(h1, vars.get(params.ff1_b));
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, vars.get(params.ff2_w));
    let out = tape.add_row_bias(h2, vars.get(params.ff2_b));
    Ok(out)
}

/// Encode one observed scene into the layer-0 node grid `[N*T, D]`,
/// person-major. Entry (n, t) depends only on pose (n, t).
pub fn encode_scene<F: Real>(
    tape: &mut Tape<F>,
    observed: &MotionSequence,
    offsets: &Array2<f64>,
    params: &EncoderParams,
    vars: &ParamVars,
) -> Result<Var> {
    let rows: Array2<F> = normalized_joint_rows(observed, offsets);
    let input = tape.leaf(rows.into_dyn());
    encode_joint_rows(tape, input, &observed.skeleton, params, vars)
}

/// Encode a single pose `[J, 3]` (already normalized) into a `[1, D]` embedding.
pub fn encode_pose<F: Real>(
    tape: &mut Tape<F>,
    pose: &Array2<F>,
    skeleton: &Skeleton,
    params: &EncoderParams,
    vars: &ParamVars,
) -> Result<(Var, Var)> {
    if pose.nrows() != skeleton.joint_count() || pose.ncols() != 3 {
        return Err(CoreError::ShapeMismatch(format!(
            "pose shape {:?} does not match skeleton J = {}",
            pose.dim(),
            skeleton.joint_count()
        )));
    }
    if pose.iter().any(|v| !v.to_f64v().is_finite()) {
        return Err(CoreError::NonFinite("pose".into()));
    }
    let input = tape.leaf(pose.clone().into_dyn());
    let out = encode_joint_rows(tape, input, skeleton, params, vars)?;
    Ok((input, out))
}

/// Convenience: fresh store + encoder for tests and oracles.
pub fn test_encoder<F: Real>(
    seed: u64,
    d: usize,
    heads: usize,
) -> (ParamStore<F>, EncoderParams) {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderParams::init(&mut store, &mut rng, d, heads).unwrap();
    (store, enc)
}

#[allow(dead_code)]
fn zero_param<F: Real>(store: &mut ParamStore<F>, id: ParamId) {
    store.value_mut(id).fill(F::zero());
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, arr2};
    use rand::Rng as _;
    use rand::SeedableRng;

    fn sample_scene(n: usize, t: usize, j: usize, seed: u64) -> MotionSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positions = Array4::from_shape_fn((n, t, j, 3), |_| rng.random_range(-1.0..1.0));
        MotionSequence::new(Skeleton::chain(j), positions, 15.0).unwrap()
    }

    fn encode_grid(seq: &MotionSequence, seed: u64, d: usize) -> Array2<f64> {
        let (store, enc) = test_encoder::<f64>(seed, d, 2);
        let mut tape = Tape::new();
        let vars = store.to_vars(&mut tape);
        let offsets = root_offsets(seq);
        let out = encode_scene(&mut tape, seq, &offsets, &enc, &vars).unwrap();
        tape.value(out).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned()
    }

    #[test]
    fn grid_shape_and_duplicate_person() {
        let mut seq = sample_scene(2, 3, 4, 1);
        let d = 8;
        // duplicate person 0 into person 1
        let p0 = seq.positions.index_axis(ndarray::Axis(0), 0).to_owned();
        seq.positions.index_axis_mut(ndarray::Axis(0), 1).assign(&p0);
        let grid = encode_grid(&seq, 2, d);
        assert_eq!(grid.dim(), (6, d));
        for t in 0..3 {
            assert_eq!(grid.row(t), grid.row(3 + t), "persons with equal data encode equally");
        }
    }

    #[test]
    fn locality_perturbation() {
        let seq = sample_scene(2, 3, 4, 3);
        let base = encode_grid(&seq, 7, 8);
        let mut bumped = seq.clone();
        bumped.positions[(1, 2, 1, 0)] += 0.25;
        let out = encode_grid(&bumped, 7, 8);
        for row in 0..6 {
            let differs = base.row(row) != out.row(row);
            // person-major: (n=1, t=2) is row 1*3 + 2 = 5
            assert_eq!(differs, row == 5, "row {row}");
        }
    }

    #[test]
    fn zeroed_output_layer_gives_zero_embedding() {
        let (mut store, enc) = test_encoder::<f64>(5, 8, 2);
        store.value_mut(enc.ff2_w).fill(0.0);
        store.value_mut(enc.ff2_b).fill(0.0);
        let seq = sample_scene(1, 2, 3, 9);
        let mut tape = Tape::new();
        let vars = store.to_vars(&mut tape);
        let offsets = root_offsets(&seq);
        let out = encode_scene(&mut tape, &seq, &offsets, &enc, &vars).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn joint_relabeling_invariance() {
        // permute joints and relabel bones consistently: pooled embedding unchanged
        let j = 5;
        let seq = sample_scene(1, 2, j, 11);
        let base = encode_grid(&seq, 13, 8);

        let perm = [3usize, 0, 4, 1, 2]; // new index -> old index
        let mut inv = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut positions = Array4::zeros((1, 2, j, 3));
        for t in 0..2 {
            for nj in 0..j {
                for c in 0..3 {
                    positions[(0, t, nj, c)] = seq.positions[(0, t, perm[nj], c)];
                }
            }
        }
        let edges = seq.skeleton.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        let sk = Skeleton::new(seq.skeleton.joint_names.clone(), edges).unwrap();
        let permuted = MotionSequence::new(sk, positions, 15.0).unwrap();

        // encode with the raw poses (no normalization) to avoid moving the root joint
        let (store, enc) = test_encoder::<f64>(13, 8, 2);
        let encode_raw = |seq: &MotionSequence| {
            let mut tape = Tape::new();
            let vars = store.to_vars(&mut tape);
            let offsets = Array2::zeros((1, 3));
            let out = encode_scene(&mut tape, seq, &offsets, &enc, &vars).unwrap();
            tape.value(out).clone()
        };
        let a = encode_raw(&seq);
        let b = encode_raw(&permuted);
        let _ = base;
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn single_joint_matches_hand_oracle() {
        // J = 1: the only attention weight is exactly 1, so the embedding is
        // the feed-forward transform of the value projection of the joint.
        let (store, enc) = test_encoder::<f64>(17, 2, 1);
        let pose = arr2(&[[0.3, -0.7, 0.2]]);
        let sk = Skeleton::chain(1);
        let mut tape = Tape::new();
        let vars = store.to_vars(&mut tape);
        let (_, out) = encode_pose(&mut tape, &pose, &sk, &enc, &vars).unwrap();
        let got = tape.value(out);

        let d = 2;
        let at = |id: ParamId, r: usize, c: usize| store.value(id)[[r, c]];
        let b1 = |id: ParamId, c: usize| store.value(id)[[c]];
        // v = pose . wv ; o = v . wo + bo ; ff2(relu(ff1(o)))
        let mut v = [0.0f64; 2];
        for c in 0..d {
            for i in 0..3 {
                v[c] += pose[[0, i]] * at(enc.wv, i, c);
            }
        }
        let mut o = [0.0f64; 2];
        for c in 0..d {
            for i in 0..d {
                o[c] += v[i] * at(enc.wo, i, c);
            }
            o[c] += b1(enc.bo, c);
        }
        let mut h = [0.0f64; 2];
        for c in 0..d {
            for i in 0..d {
                h[c] += o[i] * at(enc.ff1_w, i, c);
            }
            h[c] += b1(enc.ff1_b, c);
            h[c] = h[c].max(0.0);
        }
        let mut y = [0.0f64; 2];
        for c in 0..d {
            for i in 0..d {
                y[c] += h[i] * at(enc.ff2_w, i, c);
            }
            y[c] += b1(enc.ff2_b, c);
        }
        for c in 0..d {
            assert!((got[[0, c]] - y[c]).abs() < 1e-12, "dim {c}: {} vs {}", got[[0, c]], y[c]);
        }
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let (store, enc) = test_encoder::<f64>(23, 4, 2);
        let sk = Skeleton::chain(3);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let pose = Array2::from_shape_fn((3, 3), |_| rng.random_range(-0.8..0.8));

        let readout = |p: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let vars = store.to_vars(&mut tape);
            let (_, out) = encode_pose(&mut tape, p, &sk, &enc, &vars).unwrap();
            // deterministic scalar readout: weighted sum over dims
            let v = tape.value(out);
            v.iter().enumerate().map(|(i, &x)| (i as f64 + 1.0) * x).sum()
        };

        // analytic gradient
        let mut tape = Tape::new();
        let vars = store.to_vars(&mut tape);
        let (input, out) = encode_pose(&mut tape, &pose, &sk, &enc, &vars).unwrap();
        let d = tape.value(out).len();
        let weights = ndarray::Array2::from_shape_fn((d, 1), |(i, _)| i as f64 + 1.0);
        let w = tape.leaf(weights.into_dyn());
        let scalar = tape.matmul(out, w);
        let loss = tape.sum_all(scalar);
        let grads = tape.backward(loss);
        let g = grads.get(input).unwrap();

        let step = 1e-5;
        for r in 0..3 {
            for c in 0..3 {
                let mut plus = pose.clone();
                plus[(r, c)] += step;
                let mut minus = pose.clone();
                minus[(r, c)] -= step;
                let fd = (readout(&plus) - readout(&minus)) / (2.0 * step);
                let an = g[[r, c]];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel <= 1e-4, "({r},{c}): fd {fd} analytic {an}");
            }
        }
    }
}
