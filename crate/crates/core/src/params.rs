//! Central registry of learnable tensors.
//!
//! Modules hold [`ParamId`] handles into one flat [`ParamStore`]; the
//! optimizer, checkpointing, and gradient collection all iterate the store
//! by index, so adding a parameter anywhere automatically wires it into
//! training and serialization.

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter_mut())
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut ArrayD<F> {
        &mut self.values[i]
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> u64 {
        self.values.iter().map(|v| v.len() as u64).sum()
    }

    /// Push every parameter onto a tape; the result is indexed by `ParamId`.
    pub fn to_vars(&self, tape: &mut Tape<F>) -> ParamVars {
        ParamVars { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// Tape handles for one forward pass, aligned with the store.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Glorot-scaled normal init for a weight matrix.
pub fn glorot<F: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> ArrayD<F> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::from_f64v(normal_sample(rng) * std)).into_dyn()
}

pub fn zeros1<F: Real>(len: usize) -> ArrayD<F> {
    Array1::<F>::zeros(len).into_dyn()
}

/// Box-Muller standard normal from a uniform stream; keeps rand's
/// distribution machinery out of the reproducibility contract.
fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if v.is_finite() {
            return v;
        }
    }
}
