//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape in reverse accumulating gradients.
//! Parameters enter the tape through [`Graph::param`], at most once each, so
//! their gradients can be read back by [`ParamId`].

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::estimator::{self, EstimatorTape};
use crate::inducer::SyntacticProfile;
use crate::matrix::{self, Matrix};
use crate::params::{ParamId, ParamStore};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    MaskRows(Var, Vec<bool>),
    MaskCols(Var, Vec<bool>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Shift(Var, isize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
    },
    Estimator {
        tau: Var,
        height: Var,
        mu: Var,
        tape: Box<EstimatorTape>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Option<Var>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; `None` if it never entered the tape or
    /// received no gradient.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }
}

fn shape_err(op: &'static str, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::Shape { op, expected, got }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.iter_mut().for_each(|v| *v = 0.0);
            continue;
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf)
    }

    /// Leaf for a stored parameter, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let idx = id.index();
        if self.params.len() <= idx {
            self.params.resize(idx + 1, None);
        }
        if let Some(v) = self.params[idx] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(bias) != (1, c) {
            return Err(shape_err("add_bias", (1, c), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).row(0).to_vec();
        for i in 0..r {
            for (o, bj) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    /// Zeroes rows where `keep` is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (r, _) = self.shape(a);
        if keep.len() != r {
            return Err(shape_err("mask_rows", (r, 1), (keep.len(), 1)));
        }
        let mut out = self.value(a).clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(self.push(out, Op::MaskRows(a, keep.to_vec())))
    }

    /// Zeroes columns where `keep` is false.
    pub fn mask_cols(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if keep.len() != c {
            return Err(shape_err("mask_cols", (1, c), (1, keep.len())));
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (x, &k) in out.row_mut(i).iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
        }
        Ok(self.push(out, Op::MaskCols(a, keep.to_vec())))
    }

    /// Row-wise softmax. Columns with `keep[j] == false` get probability 0;
    /// with `causal`, row `i` only sees columns `0..=i`.
    pub fn softmax(&mut self, a: Var, keep: Option<&[bool]>, causal: bool) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(k) = keep {
            if k.len() != c {
                return Err(shape_err("softmax", (1, c), (1, k.len())));
            }
        }
        let mut x = self.value(a).clone();
        if keep.is_some() || causal {
            for i in 0..r {
                let row = x.row_mut(i);
                for (j, v) in row.iter_mut().enumerate() {
                    let hidden = keep.is_some_and(|k| !k[j]) || (causal && j > i);
                    if hidden {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let out = softmax_rows(&x);
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Normalizes each row, then applies `gamma` and `beta` (both `1 × c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", (1, c), self.shape(gamma)));
        }
        let xv = self.value(x);
        let mut xhat = Matrix::zeros(r, c);
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + LN_EPS);
            inv_std[i] = is;
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut out = xhat.clone();
        for i in 0..r {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.shape();
        let mut out = Matrix::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(shape_err("gather", (vocab, d), (id, d)));
            }
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        Ok(self.push(out, Op::Gather(table, ids.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.shape(p).0);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(shape_err("concat_cols", (r, pc), (pr, pc)));
            }
            total += pc;
        }
        let mut out = Matrix::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let pc = v.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + pc].copy_from_slice(v.row(i));
            }
            off += pc;
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(shape_err("slice_cols", (r, c), (r, start + len)));
        }
        let v = self.value(a);
        let mut out = Matrix::zeros(r, len);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&v.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(shape_err("slice_rows", (r, c), (start + len, c)));
        }
        let v = self.value(a);
        let out = Matrix::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// `out[i] = a[i + offset]`, zero outside the row range.
    pub fn shift(&mut self, a: Var, offset: isize) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a);
        let mut out = Matrix::zeros(r, c);
        for i in 0..r {
            let src = i as isize + offset;
            if src >= 0 && (src as usize) < r {
                out.row_mut(i).copy_from_slice(v.row(src as usize));
            }
        }
        self.push(out, Op::Shift(a, offset))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Summed cross-entropy of `logits` rows against `targets`, with label
    /// smoothing `smoothing` spread uniformly over the vocabulary.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(shape_err("cross_entropy", (r, c), (targets.len(), c)));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(shape_err("cross_entropy", (r, c), (r, t)));
            }
            let row = v.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>());
            let nll = lse - row[t];
            let uniform = lse - row.iter().sum::<f64>() / c as f64;
            total += (1.0 - smoothing) * nll + smoothing * uniform;
        }
        Ok(self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
            },
        ))
    }

    /// Dependency matrix of `(tau, height, mu)`; `tau` and `height` may be
    /// any shape holding `n − 1` and `n` values, `mu` is `1 × 1`.
    pub fn dependency(&mut self, tau: Var, height: Var, mu: Var) -> Result<Var> {
        let profile = SyntacticProfile::new(
            self.value(tau).data().to_vec(),
            self.value(height).data().to_vec(),
            self.value(mu).data().first().copied().unwrap_or(f64::NAN),
        )?;
        let (p, tape) = estimator::dependency_matrix_with_tape(&profile)?;
        Ok(self.push(
            p.into_matrix(),
            Op::Estimator {
                tau,
                height,
                mu,
                tape: Box::new(tape),
            },
        ))
    }

    /// Gradients of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(loss);
        grads[loss.0] = Some(Matrix::filled(r, c, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b)).expect("matmul grad");
                    let gb = self.value(*a).t_matmul(&g).expect("matmul grad");
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b)).expect("matmul_t grad");
                    let gb = g.t_matmul(self.value(*a)).expect("matmul_t grad");
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).expect("mul grad");
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).expect("mul grad");
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s)),
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (1.0 - y * y)).unwrap();
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y)).unwrap();
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 })
                        .unwrap();
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip_map(self.value(*a), |x, y| x * sigmoid(y)).unwrap();
                    acc(&mut grads, *a, ga);
                }
                Op::MaskRows(a, keep) => {
                    let mut ga = g.clone();
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            ga.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskCols(a, keep) => {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, &k) in ga.row_mut(i).iter_mut().zip(keep) {
                            if !k {
                                *x = 0.0;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let d = matrix::dot(yr, gr);
                        for ((o, yi), gi) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - d);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (r, c) = xhat.shape();
                    let gam = self.value(*gamma).row(0);
                    let mut gg = Matrix::zeros(1, c);
                    let mut gbeta = Matrix::zeros(1, c);
                    let mut gx = Matrix::zeros(r, c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        for j in 0..c {
                            gg.row_mut(0)[j] += gr[j] * xr[j];
                            gbeta.row_mut(0)[j] += gr[j];
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = matrix::dot(&dxhat, xr) / c as f64;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(&mut grads, *gamma, gg);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Gather(table, ids) => {
                    let (vocab, d) = self.shape(*table);
                    let mut gt = Matrix::zeros(vocab, d);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape(p);
                        let mut gp = Matrix::zeros(pr, pc);
                        for i in 0..pr {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let len = g.cols();
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Matrix::zeros(r, c);
                    let n = g.rows();
                    ga.data_mut()[start * c..(start + n) * c].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::Shift(a, offset) => {
                    let (r, c) = g.shape();
                    let mut ga = Matrix::zeros(r, c);
                    for i in 0..r {
                        let src = i as isize + offset;
                        if src >= 0 && (src as usize) < r {
                            let s = src as usize;
                            for (o, x) in ga.row_mut(s).iter_mut().zip(g.row(i)) {
                                *o += x;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Matrix::filled(r, c, g[(0, 0)]));
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let scale = g[(0, 0)];
                    let mut ga = softmax_rows(self.value(*logits));
                    let c = ga.cols() as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        let row = ga.row_mut(i);
                        for v in row.iter_mut() {
                            *v -= smoothing / c;
                        }
                        row[t] -= 1.0 - smoothing;
                        row.iter_mut().for_each(|v| *v *= scale);
                    }
                    acc(&mut grads, *logits, ga);
                }
                Op::Estimator {
                    tau,
                    height,
                    mu,
                    tape,
                } => {
                    let pg = tape.backward(&g);
                    let (tr, tc) = self.shape(*tau);
                    let (hr, hc) = self.shape(*height);
                    acc(&mut grads, *tau, Matrix::from_vec(tr, tc, pg.tau).unwrap());
                    acc(
                        &mut grads,
                        *height,
                        Matrix::from_vec(hr, hc, pg.height).unwrap(),
                    );
                    acc(&mut grads, *mu, Matrix::scalar(pg.mu));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}
