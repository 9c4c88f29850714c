//! The three-term training objective: prediction, reconstruction, and
//! inference losses, each an l2 norm, combined by fixed weights.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{ParamId, ParamStore, ParamVars, glorot, zeros1};
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Term weights; defaults follow the reference configuration 0.7/0.2/0.1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub pre: f64,
    pub rec: f64,
    pub inf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pre: 0.7, rec: 0.2, inf: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.pre < 0.0 || self.rec < 0.0 || self.inf < 0.0 {
            return Err(CoreError::ConfigInvalid("loss weights must be non-negative".into()));
        }
        if self.pre <= 0.0 {
            return Err(CoreError::ConfigInvalid("lambda_pre must be positive".into()));
        }
        Ok(())
    }
}

/// Per-term loss values; `total` is exactly the weighted sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub pre: f64,
    pub rec: f64,
    pub inf: f64,
    pub total: f64,
    pub per_person: Vec<PersonLoss>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonLoss {
    pub person: usize,
    pub pre: f64,
    pub rec: f64,
    pub inf: f64,
}

impl LossReport {
    pub fn from_terms(pre: f64, rec: f64, inf: f64, w: LossWeights, per_person: Vec<PersonLoss>) -> Self {
        LossReport { pre, rec, inf, total: w.pre * pre + w.rec * rec + w.inf * inf, per_person }
    }
}

/// Linear readout from final node embeddings back to pose space, used by the
/// reconstruction loss.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ReconstructionParams {
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        d: usize,
        pose_dim: usize,
    ) -> Self {
        ReconstructionParams {
            w: store.add("reconstruct.w", glorot(rng, d, pose_dim)),
            b: store.add("reconstruct.b", zeros1(pose_dim)),
        }
    }

    /// `[N*T, D] -> [N*T, pose_dim]`.
    pub fn apply<F: Real>(&self, tape: &mut Tape<F>, vars: &ParamVars, nodes: Var) -> Var {
        let y = tape.matmul(nodes, vars.get(self.w));
        tape.add_row_bias(y, vars.get(self.b))
    }
}

/// Everything the loss assembly needs from one forward pass. All tensors are
/// person-row matrices in the normalized frame.
pub struct LossInputs<'a> {
    /// Predicted future frames, one `[N, pose_dim]` var per step.
    pub y_hat_steps: &'a [Var],
    /// Ground-truth future frames, matching `y_hat_steps`.
    pub y_true_steps: &'a [Var],
    /// Reconstructed observed poses `[N*T, pose_dim]` (None disables the term).
    pub x_hat: Option<Var>,
    /// Observed poses `[N*T, pose_dim]`.
    pub x_true: Option<Var>,
    /// Predicted reasoning trace (None disables the inference term).
    pub r_hat_steps: Option<&'a [Var]>,
    /// Teacher-forced reasoning trace.
    pub r_true_steps: Option<&'a [Var]>,
}

/// Build the weighted total loss on the tape and report the term values.
///
/// `pre` and `rec` are Frobenius norms over their whole tensors; `inf` sums
/// the per-(person, step) norms of the reasoning differences.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    inputs: &LossInputs<'_>,
    weights: LossWeights,
) -> Result<(Var, LossTerms)> {
    weights.validate()?;
    if inputs.y_hat_steps.len() != inputs.y_true_steps.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "prediction trace has {} steps, ground truth {}",
            inputs.y_hat_steps.len(),
            inputs.y_true_steps.len()
        )));
    }
    if inputs.y_hat_steps.is_empty() {
        return Err(CoreError::ShapeMismatch("empty prediction trace".into()));
    }

    let y_hat = tape.concat_rows(inputs.y_hat_steps);
    let y_true = tape.concat_rows(inputs.y_true_steps);
    for v in [y_hat, y_true] {
        if tape.value(v).iter().any(|x| !x.to_f64v().is_finite()) {
            return Err(CoreError::NonFinite("loss input".into()));
        }
    }
    let diff = tape.sub(y_hat, y_true);
    let pre = tape.frobenius_norm(diff);

    let mut terms = vec![tape.scale(pre, F::from_f64v(weights.pre))];
    let mut rec = None;
    if let (Some(x_hat), Some(x_true)) = (inputs.x_hat, inputs.x_true) {
        if tape.value(x_hat).shape() != tape.value(x_true).shape() {
            return Err(CoreError::ShapeMismatch("reconstruction shapes differ".into()));
        }
        let d = tape.sub(x_hat, x_true);
        let r = tape.frobenius_norm(d);
        rec = Some(r);
        terms.push(tape.scale(r, F::from_f64v(weights.rec)));
    }
    let mut inf = None;
    if let (Some(rh), Some(rt)) = (inputs.r_hat_steps, inputs.r_true_steps) {
        if rh.len() != rt.len() {
            return Err(CoreError::ShapeMismatch("reasoning traces differ in length".into()));
        }
        let mut step_sums = Vec::with_capacity(rh.len());
        for (&a, &b) in rh.iter().zip(rt.iter()) {
            let d = tape.sub(a, b);
            let sq = tape.row_dot(d, d); // [N] squared norms
            let norms = tape.sqrt(sq);
            step_sums.push(tape.sum_all(norms));
        }
        let total = if step_sums.len() == 1 { step_sums[0] } else { tape.add_n(&step_sums) };
        inf = Some(total);
        terms.push(tape.scale(total, F::from_f64v(weights.inf)));
    }

    let total = if terms.len() == 1 { terms[0] } else { tape.add_n(&terms) };
    let val = |v: Option<Var>| v.map(|v| tape.value(v)[[0]].to_f64v()).unwrap_or(0.0);
    let report = LossTerms {
        pre: tape.value(pre)[[0]].to_f64v(),
        rec: val(rec),
        inf: val(inf),
    };
    if !tape.value(total)[[0]].to_f64v().is_finite() {
        return Err(CoreError::NumericFailure("non-finite loss".into()));
    }
    Ok((total, report))
}

/// Raw term values of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub pre: f64,
    pub rec: f64,
    pub inf: f64,
}

impl LossTerms {
    pub fn report(&self, w: LossWeights, per_person: Vec<PersonLoss>) -> LossReport {
        LossReport::from_terms(self.pre, self.rec, self.inf, w, per_person)
    }
}

/// Per-person term breakdown computed off-tape from materialized values.
pub fn per_person_terms(
    y_hat: &[ndarray::Array2<f64>],
    y_true: &[ndarray::Array2<f64>],
    x_hat: Option<(&ndarray::Array2<f64>, usize)>,
    x_true: Option<&ndarray::Array2<f64>>,
    r_hat: Option<&[ndarray::Array2<f64>]>,
    r_true: Option<&[ndarray::Array2<f64>]>,
) -> Vec<PersonLoss> {
    let n = y_hat.first().map(|m| m.nrows()).unwrap_or(0);
    let mut out = Vec::with_capacity(n);
    for person in 0..n {
        let mut pre_sq = 0.0;
        for (a, b) in y_hat.iter().zip(y_true) {
            for c in 0..a.ncols() {
                let d = a[(person, c)] - b[(person, c)];
                pre_sq += d * d;
            }
        }
        let mut rec_sq = 0.0;
        if let (Some((xh, t_frames)), Some(xt)) = (x_hat, x_true) {
            for ti in 0..t_frames {
                let row = person * t_frames + ti;
                for c in 0..xh.ncols() {
                    let d = xh[(row, c)] - xt[(row, c)];
                    rec_sq += d * d;
                }
            }
        }
        let mut inf = 0.0;
        if let (Some(rh), Some(rt)) = (r_hat, r_true) {
            for (a, b) in rh.iter().zip(rt) {
                let mut sq = 0.0;
                for c in 0..a.ncols() {
                    let d = a[(person, c)] - b[(person, c)];
                    sq += d * d;
                }
                inf += sq.sqrt();
            }
        }
        out.push(PersonLoss { person, pre: pre_sq.sqrt(), rec: rec_sq.sqrt(), inf });
    }
    out
}
