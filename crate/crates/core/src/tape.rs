//! Reverse-mode autodiff on a flat tape of ndarray tensors.
//!
//! Every forward pass builds a fresh [`Tape`]; [`Tape::backward`] walks it in
//! reverse and accumulates gradients for every node. The op set is small and
//! deliberately batched: gather/segment ops express attention over hyperedge
//! member lists without per-element graph nodes, and the block matmuls give
//! per-pose joint attention without one tape node per pose.
//!
//! Scalars live on the tape as length-1 vectors.

use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};

use crate::real::Real;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Contiguous row spans; a span may be empty.
pub type Segments = Rc<Vec<(usize, usize)>>;

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, F),
    AddRowBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    Square(Var),
    SumAll(Var),
    MeanPoolBlocks(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentSumRows(Var, Segments),
    RowDot(Var, Var),
    ScaleRows(Var, Var),
    SegmentSoftmax(Var, Segments, F),
    MaskedSoftmaxRows(Var, Rc<Array2<bool>>, F),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BlockMatMulNT(Var, Var, usize),
    BlockMatMulNN(Var, Var, usize),
    Reshape(Var),
}

struct Node<F: Real> {
    value: ArrayD<F>,
    op: Op<F>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `v`; zero-shaped `None` means the node does not affect the loss.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

fn as1<F: Real>(a: &ArrayD<F>) -> ndarray::ArrayView1<'_, F> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d tensor")
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf2(&mut self, value: Array2<F>) -> Var {
        self.leaf(value.into_dyn())
    }

    pub fn leaf1(&mut self, value: Array1<F>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = as2(self.value(a)).dot(&as2(self.value(b)));
        self.push(v.into_dyn(), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise sum of same-shape tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut v = self.value(vars[0]).clone();
        for &x in &vars[1..] {
            v = v + self.value(x);
        }
        self.push(v, Op::AddN(vars.to_vec()))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `[r,c] + [c]`, bias broadcast over rows.
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Var {
        let v = &as2(self.value(m)) + &as1(self.value(bias));
        self.push(v.into_dyn(), Op::AddRowBias(m, bias))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = F::one();
        let v = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    /// Elementwise sqrt; inputs must be non-negative. d/dx at 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Sum of all entries -> `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a))
    }

    /// `[b*block, c] -> [b, c]`, mean over each run of `block` consecutive rows.
    pub fn mean_pool_blocks(&mut self, a: Var, block: usize) -> Var {
        let m = as2(self.value(a));
        assert_eq!(m.nrows() % block, 0);
        let b = m.nrows() / block;
        let mut out = Array2::<F>::zeros((b, m.ncols()));
        let inv = F::one() / F::from_usize(block).unwrap();
        for i in 0..b {
            for r in 0..block {
                let row = m.row(i * block + r);
                out.row_mut(i).zip_mut_with(&row, |o, &x| *o = *o + x * inv);
            }
        }
        self.push(out.into_dyn(), Op::MeanPoolBlocks(a, block))
    }

    /// Select rows (repeats allowed): `[m,c] -> [idx.len(), c]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let m = as2(self.value(a));
        let mut out = Array2::<F>::zeros((idx.len(), m.ncols()));
        for (k, &i) in idx.iter().enumerate() {
            out.row_mut(k).assign(&m.row(i));
        }
        self.push(out.into_dyn(), Op::GatherRows(a, idx))
    }

    /// Sum rows within each contiguous span: `[m,c] -> [spans.len(), c]`.
    /// Empty spans produce zero rows. Spans must be disjoint and cover rows in order.
    pub fn segment_sum_rows(&mut self, a: Var, segments: Segments) -> Var {
        let m = as2(self.value(a));
        let mut out = Array2::<F>::zeros((segments.len(), m.ncols()));
        for (s, &(lo, hi)) in segments.iter().enumerate() {
            for r in lo..hi {
                let row = m.row(r);
                out.row_mut(s).zip_mut_with(&row, |o, &x| *o = *o + x);
            }
        }
        self.push(out.into_dyn(), Op::SegmentSumRows(a, segments))
    }

    /// Per-row dot product: `[m,c],[m,c] -> [m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (as2(self.value(a)), as2(self.value(b)));
        assert_eq!(ma.dim(), mb.dim());
        let mut out = Array1::<F>::zeros(ma.nrows());
        for i in 0..ma.nrows() {
            out[i] = ma.row(i).dot(&mb.row(i));
        }
        self.push(out.into_dyn(), Op::RowDot(a, b))
    }

    /// Scale row i of `[m,c]` by `s[i]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let m = as2(self.value(a));
        let sv = as1(self.value(s));
        assert_eq!(m.nrows(), sv.len());
        let mut out = m.to_owned();
        for i in 0..m.nrows() {
            let c = sv[i];
            out.row_mut(i).mapv_inplace(|x| x * c);
        }
        self.push(out.into_dyn(), Op::ScaleRows(a, s))
    }

    /// Softmax within each contiguous span of a 1-d logit vector. Logits are
    /// clamped to `[-clamp, clamp]` first; the result is numerically stable.
    pub fn segment_softmax(&mut self, x: Var, segments: Segments, clamp: F) -> Var {
        let xv = as1(self.value(x));
        let mut out = Array1::<F>::zeros(xv.len());
        for &(lo, hi) in segments.iter() {
            if lo == hi {
                continue;
            }
            let mut mx = F::neg_infinity();
            for i in lo..hi {
                let c = clamp_val(xv[i], clamp);
                if c > mx {
                    mx = c;
                }
            }
            let mut denom = F::zero();
            for i in lo..hi {
                let e = (clamp_val(xv[i], clamp) - mx).exp();
                out[i] = e;
                denom = denom + e;
            }
            for i in lo..hi {
                out[i] = out[i] / denom;
            }
        }
        self.push(out.into_dyn(), Op::SegmentSoftmax(x, segments, clamp))
    }

    /// Row-wise masked softmax of `[r,c]`. Mask rows are tiled modulo
    /// `mask.nrows()`, so a `[J,J]` mask serves a `[B*J, J]` score matrix.
    /// Disallowed entries become exactly 0; a row with no allowed entries
    /// becomes all zeros.
    pub fn masked_softmax_rows(&mut self, x: Var, mask: Rc<Array2<bool>>, clamp: F) -> Var {
        let m = as2(self.value(x));
        assert_eq!(m.ncols(), mask.ncols());
        assert_eq!(m.nrows() % mask.nrows(), 0);
        let mut out = Array2::<F>::zeros(m.dim());
        for i in 0..m.nrows() {
            let mrow = mask.row(i % mask.nrows());
            let mut mx = F::neg_infinity();
            for j in 0..m.ncols() {
                if mrow[j] {
                    let c = clamp_val(m[(i, j)], clamp);
                    if c > mx {
                        mx = c;
                    }
                }
            }
            if mx == F::neg_infinity() {
                continue;
            }
            let mut denom = F::zero();
            for j in 0..m.ncols() {
                if mrow[j] {
                    let e = (clamp_val(m[(i, j)], clamp) - mx).exp();
                    out[(i, j)] = e;
                    denom = denom + e;
                }
            }
            for j in 0..m.ncols() {
                if mrow[j] {
                    out[(i, j)] = out[(i, j)] / denom;
                }
            }
        }
        self.push(out.into_dyn(), Op::MaskedSoftmaxRows(x, mask, clamp))
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = as2(self.value(a));
        let v = m.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(v.into_dyn(), Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|&v| as2(self.value(v))).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        self.push(v.into_dyn(), Op::ConcatCols(vars.to_vec()))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        let views: Vec<_> = vars.iter().map(|&v| as2(self.value(v))).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        self.push(v.into_dyn(), Op::ConcatRows(vars.to_vec()))
    }

    /// Per-block `A_b · B_bᵀ`: `[B*block, d] x [B*block, d] -> [B*block, block]`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Var {
        let (ma, mb) = (as2(self.value(a)), as2(self.value(b)));
        assert_eq!(ma.dim(), mb.dim());
        assert_eq!(ma.nrows() % block, 0);
        let nblocks = ma.nrows() / block;
        let mut out = Array2::<F>::zeros((ma.nrows(), block));
        for g in 0..nblocks {
            let r = g * block..(g + 1) * block;
            let prod = ma.slice(ndarray::s![r.clone(), ..]).dot(&mb.slice(ndarray::s![r.clone(), ..]).t());
            out.slice_mut(ndarray::s![r, ..]).assign(&prod);
        }
        self.push(out.into_dyn(), Op::BlockMatMulNT(a, b, block))
    }

    /// Per-block `S_b · V_b`: `[B*block, block] x [B*block, d] -> [B*block, d]`.
    pub fn block_matmul_nn(&mut self, s: Var, v: Var, block: usize) -> Var {
        let (ms, mv) = (as2(self.value(s)), as2(self.value(v)));
        assert_eq!(ms.ncols(), block);
        assert_eq!(ms.nrows(), mv.nrows());
        assert_eq!(ms.nrows() % block, 0);
        let nblocks = ms.nrows() / block;
        let mut out = Array2::<F>::zeros((mv.nrows(), mv.ncols()));
        for g in 0..nblocks {
            let r = g * block..(g + 1) * block;
            let prod = ms.slice(ndarray::s![r.clone(), ..]).dot(&mv.slice(ndarray::s![r.clone(), ..]));
            out.slice_mut(ndarray::s![r, ..]).assign(&prod);
        }
        self.push(out.into_dyn(), Op::BlockMatMulNN(s, v, block))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Frobenius norm of a tensor -> `[1]`.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.sum_all(sq);
        self.sqrt(s)
    }

    /// Reverse pass from a `[1]`-shaped loss node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(IxDyn(&[1]), F::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = {
                    let (ma, mb) = (as2(self.value(*a)), as2(self.value(*b)));
                    let gm = as2(g);
                    (gm.dot(&mb.t()).into_dyn(), ma.t().dot(&gm).into_dyn())
                };
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                add_grad(grads, *a, g * self.value(*b));
                add_grad(grads, *b, g * self.value(*a));
            }
            Op::AddN(vars) => {
                for &v in vars {
                    add_grad(grads, v, g.clone());
                }
            }
            Op::Scale(a, c) => add_grad(grads, *a, g.mapv(|x| x * *c)),
            Op::AddRowBias(m, bias) => {
                add_grad(grads, *m, g.clone());
                let gsum = as2(g).sum_axis(Axis(0));
                add_grad(grads, *bias, gsum.into_dyn());
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |dv, &x| {
                    if x <= F::zero() {
                        *dv = F::zero();
                    }
                });
                add_grad(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |dv, &y| *dv = *dv * y * (F::one() - y));
                add_grad(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |dv, &y| *dv = *dv * (F::one() - y * y));
                add_grad(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let mut d = g.clone();
                let half = F::from_f64v(0.5);
                d.zip_mut_with(&node.value, |dv, &y| {
                    *dv = if y == F::zero() { F::zero() } else { *dv * half / y };
                });
                add_grad(grads, *a, d);
            }
            Op::Square(a) => {
                let two = F::from_f64v(2.0);
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |dv, &x| *dv = *dv * two * x);
                add_grad(grads, *a, d);
            }
            Op::SumAll(a) => {
                let gd = ArrayD::from_elem(self.value(*a).raw_dim(), g[[0]]);
                add_grad(grads, *a, gd);
            }
            Op::MeanPoolBlocks(a, block) => {
                let src = as2(self.value(*a));
                let gm = as2(g);
                let inv = F::one() / F::from_usize(*block).unwrap();
                let mut d = Array2::<F>::zeros(src.dim());
                for i in 0..src.nrows() {
                    let gr = gm.row(i / block);
                    d.row_mut(i).zip_mut_with(&gr, |o, &x| *o = x * inv);
                }
                add_grad(grads, *a, d.into_dyn());
            }
            Op::GatherRows(a, idx) => {
                let src = as2(self.value(*a));
                let gm = as2(g);
                let mut d = Array2::<F>::zeros(src.dim());
                for (k, &i) in idx.iter().enumerate() {
                    let gr = gm.row(k);
                    d.row_mut(i).zip_mut_with(&gr, |o, &x| *o = *o + x);
                }
                add_grad(grads, *a, d.into_dyn());
            }
            Op::SegmentSumRows(a, segments) => {
                let src = as2(self.value(*a));
                let gm = as2(g);
                let mut d = Array2::<F>::zeros(src.dim());
                for (s, &(lo, hi)) in segments.iter().enumerate() {
                    for r in lo..hi {
                        d.row_mut(r).assign(&gm.row(s));
                    }
                }
                add_grad(grads, *a, d.into_dyn());
            }
            Op::RowDot(a, b) => {
                let (ma, mb) = (as2(self.value(*a)), as2(self.value(*b)));
                let gv = as1(g);
                let mut da = Array2::<F>::zeros(ma.dim());
                let mut db = Array2::<F>::zeros(mb.dim());
                for i in 0..ma.nrows() {
                    let c = gv[i];
                    da.row_mut(i).zip_mut_with(&mb.row(i), |o, &x| *o = c * x);
                    db.row_mut(i).zip_mut_with(&ma.row(i), |o, &x| *o = c * x);
                }
                add_grad(grads, *a, da.into_dyn());
                add_grad(grads, *b, db.into_dyn());
            }
            Op::ScaleRows(a, s) => {
                let ma = as2(self.value(*a));
                let sv = as1(self.value(*s));
                let gm = as2(g);
                let mut da = Array2::<F>::zeros(ma.dim());
                let mut ds = Array1::<F>::zeros(sv.len());
                for i in 0..ma.nrows() {
                    let c = sv[i];
                    da.row_mut(i).zip_mut_with(&gm.row(i), |o, &x| *o = c * x);
                    ds[i] = gm.row(i).dot(&ma.row(i));
                }
                add_grad(grads, *a, da.into_dyn());
                add_grad(grads, *s, ds.into_dyn());
            }
            Op::SegmentSoftmax(x, segments, clamp) => {
                let xv = as1(self.value(*x));
                let yv = as1(&node.value);
                let gv = as1(g);
                let mut d = Array1::<F>::zeros(xv.len());
                for &(lo, hi) in segments.iter() {
                    if lo == hi {
                        continue;
                    }
                    let mut dot = F::zero();
                    for i in lo..hi {
                        dot = dot + gv[i] * yv[i];
                    }
                    for i in lo..hi {
                        let dsoft = yv[i] * (gv[i] - dot);
                        d[i] = if xv[i].abs() < *clamp { dsoft } else { F::zero() };
                    }
                }
                add_grad(grads, *x, d.into_dyn());
            }
            Op::MaskedSoftmaxRows(x, mask, clamp) => {
                let xm = as2(self.value(*x));
                let ym = as2(&node.value);
                let gm = as2(g);
                let mut d = Array2::<F>::zeros(xm.dim());
                for i in 0..xm.nrows() {
                    let mrow = mask.row(i % mask.nrows());
                    let mut dot = F::zero();
                    for j in 0..xm.ncols() {
                        if mrow[j] {
                            dot = dot + gm[(i, j)] * ym[(i, j)];
                        }
                    }
                    for j in 0..xm.ncols() {
                        if mrow[j] && xm[(i, j)].abs() < *clamp {
                            d[(i, j)] = ym[(i, j)] * (gm[(i, j)] - dot);
                        }
                    }
                }
                add_grad(grads, *x, d.into_dyn());
            }
            Op::SliceCols(a, start, len) => {
                let src = as2(self.value(*a));
                let gm = as2(g);
                let mut d = Array2::<F>::zeros(src.dim());
                d.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&gm);
                add_grad(grads, *a, d.into_dyn());
            }
            Op::ConcatCols(vars) => {
                let gm = as2(g);
                let mut c0 = 0;
                for &v in vars {
                    let w = as2(self.value(v)).ncols();
                    let piece = gm.slice(ndarray::s![.., c0..c0 + w]).to_owned();
                    add_grad(grads, v, piece.into_dyn());
                    c0 += w;
                }
            }
            Op::ConcatRows(vars) => {
                let gm = as2(g);
                let mut r0 = 0;
                for &v in vars {
                    let h = as2(self.value(v)).nrows();
                    let piece = gm.slice(ndarray::s![r0..r0 + h, ..]).to_owned();
                    add_grad(grads, v, piece.into_dyn());
                    r0 += h;
                }
            }
            Op::BlockMatMulNT(a, b, block) => {
                let (ma, mb) = (as2(self.value(*a)), as2(self.value(*b)));
                let gm = as2(g);
                let mut da = Array2::<F>::zeros(ma.dim());
                let mut db = Array2::<F>::zeros(mb.dim());
                let nblocks = ma.nrows() / block;
                for gi in 0..nblocks {
                    let r = gi * block..(gi + 1) * block;
                    let go = gm.slice(ndarray::s![r.clone(), ..]);
                    let av = ma.slice(ndarray::s![r.clone(), ..]);
                    let bv = mb.slice(ndarray::s![r.clone(), ..]);
                    da.slice_mut(ndarray::s![r.clone(), ..]).assign(&go.dot(&bv));
                    db.slice_mut(ndarray::s![r, ..]).assign(&go.t().dot(&av));
                }
                add_grad(grads, *a, da.into_dyn());
                add_grad(grads, *b, db.into_dyn());
            }
            Op::BlockMatMulNN(s, v, block) => {
                let (ms, mv) = (as2(self.value(*s)), as2(self.value(*v)));
                let gm = as2(g);
                let mut ds = Array2::<F>::zeros(ms.dim());
                let mut dv = Array2::<F>::zeros(mv.dim());
                let nblocks = ms.nrows() / block;
                for gi in 0..nblocks {
                    let r = gi * block..(gi + 1) * block;
                    let go = gm.slice(ndarray::s![r.clone(), ..]);
                    let sv = ms.slice(ndarray::s![r.clone(), ..]);
                    let vv = mv.slice(ndarray::s![r.clone(), ..]);
                    ds.slice_mut(ndarray::s![r.clone(), ..]).assign(&go.dot(&vv.t()));
                    dv.slice_mut(ndarray::s![r, ..]).assign(&sv.t().dot(&go));
                }
                add_grad(grads, *s, ds.into_dyn());
                add_grad(grads, *v, dv.into_dyn());
            }
            Op::Reshape(a) => {
                let d = g
                    .clone()
                    .into_shape_with_order(self.value(*a).raw_dim())
                    .expect("reshape backward");
                add_grad(grads, *a, d);
            }
        }
    }
}

fn clamp_val<F: Real>(x: F, clamp: F) -> F {
    if x > clamp {
        clamp
    } else if x < -clamp {
        -clamp
    } else {
        x
    }
}

fn add_grad<F: Real>(grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randa(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite differences of `f` w.r.t. every leaf, compared against
    /// the tape gradient. `build` maps leaf values to a scalar loss node.
    fn check_op(
        leaves: &[ArrayD<f64>],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(vars[li]).cloned().unwrap_or_else(|| ArrayD::zeros(leaf.raw_dim()));
            for idx in 0..leaf.len() {
                let run = |delta: f64| {
                    let mut perturbed: Vec<ArrayD<f64>> = leaves.to_vec();
                    perturbed[li].as_slice_mut().unwrap()[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.iter().map(|l| t.leaf(l.clone())).collect();
                    let lv = build(&mut t, &vs);
                    t.value(lv)[[0]]
                };
                let fd = (run(eps) - run(-eps)) / (2.0 * eps);
                let an = g.as_slice().unwrap()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "leaf {li} idx {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_bias_grad() {
        let mut rng = StdRng::seed_from_u64(1);
        let a = randa(&mut rng, &[3, 4]);
        let b = randa(&mut rng, &[4, 2]);
        let bias = randa(&mut rng, &[2]);
        check_op(&[a, b, bias], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row_bias(m, v[2]);
            let m = t.tanh(m);
            t.sum_all(m)
        });
    }

    #[test]
    fn elementwise_grads() {
        let mut rng = StdRng::seed_from_u64(2);
        let a = randa(&mut rng, &[2, 3]);
        let b = randa(&mut rng, &[2, 3]);
        check_op(&[a, b], |t, v| {
            let s = t.sub(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let q = t.square(m);
            let r = t.sigmoid(q);
            let n = t.add_n(&[r, v[1]]);
            let sc = t.scale(n, 0.7);
            t.sum_all(sc)
        });
    }

    #[test]
    fn relu_sqrt_grad() {
        // keep values away from the relu kink and sqrt(0)
        let a = arr2(&[[0.5, -0.7, 1.2], [2.0, -0.1, 0.9]]).into_dyn();
        check_op(&[a], |t, v| {
            let r = t.relu(v[0]);
            let q = t.square(r);
            let s = t.sum_all(q);
            t.sqrt(s)
        });
    }

    #[test]
    fn gather_segment_rowdot_grads() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = randa(&mut rng, &[4, 3]);
        let b = randa(&mut rng, &[5, 3]);
        let idx = Rc::new(vec![0usize, 2, 2, 3, 1]);
        let segs: Segments = Rc::new(vec![(0, 2), (2, 2), (2, 5)]);
        check_op(&[a, b], |t, v| {
            let g = t.gather_rows(v[0], idx.clone());
            let d = t.row_dot(g, v[1]);
            let sm = t.segment_softmax(d, segs.clone(), 30.0);
            let sc = t.scale_rows(g, sm);
            let ss = t.segment_sum_rows(sc, segs.clone());
            let sq = t.square(ss);
            t.sum_all(sq)
        });
    }

    #[test]
    fn masked_softmax_rows_grad() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = randa(&mut rng, &[4, 2]);
        // mask tiled over two blocks of 2 rows; one row keeps a single entry
        let mask = Rc::new(arr2(&[[true, true], [true, false]]));
        check_op(&[x], |t, v| {
            let sm = t.masked_softmax_rows(v[0], mask.clone(), 30.0);
            let sq = t.square(sm);
            t.sum_all(sq)
        });
    }

    #[test]
    fn block_matmul_grads() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = randa(&mut rng, &[6, 3]); // 2 blocks of 3
        let b = randa(&mut rng, &[6, 3]);
        let v2 = randa(&mut rng, &[6, 2]);
        check_op(&[a, b, v2], |t, v| {
            let s = t.block_matmul_nt(v[0], v[1], 3);
            let sm = t.tanh(s);
            let o = t.block_matmul_nn(sm, v[2], 3);
            t.sum_all(o)
        });
    }

    #[test]
    fn concat_slice_pool_grads() {
        let mut rng = StdRng::seed_from_u64(6);
        let a = randa(&mut rng, &[4, 2]);
        let b = randa(&mut rng, &[4, 3]);
        check_op(&[a, b], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let s = t.slice_cols(c, 1, 3);
            let p = t.mean_pool_blocks(s, 2);
            let r = t.concat_rows(&[p, p]);
            let q = t.square(r);
            t.sum_all(q)
        });
    }

    #[test]
    fn reshape_grad() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = randa(&mut rng, &[2, 6]);
        check_op(&[a], |t, v| {
            let r = t.reshape(v[0], &[3, 4]);
            let q = t.square(r);
            t.sum_all(q)
        });
    }

    #[test]
    fn segment_softmax_sums_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf1(arr1(&[0.3, -2.0, 5.0, 1.0, 1.0]));
        let segs: Segments = Rc::new(vec![(0, 3), (3, 5)]);
        let y = tape.segment_softmax(x, segs, 30.0);
        let v = tape.value(y);
        let s1: f64 = (0..3).map(|i| v[[i]]).sum();
        let s2: f64 = (3..5).map(|i| v[[i]]).sum();
        assert!((s1 - 1.0).abs() < 1e-12 && (s2 - 1.0).abs() < 1e-12);
        assert!((v[[3]] - 0.5).abs() < 1e-12, "equal logits split evenly");
    }

    #[test]
    fn masked_softmax_empty_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let mask = Rc::new(arr2(&[[false, false], [true, true]]));
        let y = tape.masked_softmax_rows(x, mask, 30.0);
        let v = tape.value(y);
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] + v[[1, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gather_and_segments() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf2(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let g = tape.gather_rows(a, Rc::new(vec![]));
        assert_eq!(tape.value(g).shape(), &[0, 2]);
        let segs: Segments = Rc::new(vec![(0, 0)]);
        let s = tape.segment_sum_rows(g, segs);
        assert_eq!(tape.value(s).shape(), &[1, 2]);
        assert_eq!(tape.value(s)[[0, 0]], 0.0);
    }

    #[test]
    fn logit_clamp_engages() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf1(arr1(&[100.0, 0.0]));
        let segs: Segments = Rc::new(vec![(0, 2)]);
        let y = tape.segment_softmax(x, segs, 30.0);
        let v = tape.value(y);
        // clamped to 30 vs 0: exp(30)/(exp(30)+1)
        let expect = (30f64).exp() / ((30f64).exp() + 1.0);
        assert!((v[[0]] - expect).abs() < 1e-12);
    }
}
