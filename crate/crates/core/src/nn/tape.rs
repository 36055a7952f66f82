//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! requires one: inputs created with [`Tape::input`] and, when the tape
//! tracks parameters, every parameter pulled in via [`Tape::param`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::matrix::{Matrix, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamKey {
    group: u64,
    index: usize,
}

static NEXT_GROUP: AtomicU64 = AtomicU64::new(1);

/// Named trainable matrices. Each store gets a process-unique group id so
/// several stores can share one tape.
#[derive(Debug)]
pub struct ParamStore {
    group: u64,
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            group: NEXT_GROUP.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            group: NEXT_GROUP.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group,
            index,
        }
    }

    pub fn get(&self, index: usize) -> &Matrix {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.values[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Replaces all values; names and shapes must match.
    pub fn load(&mut self, names: &[String], values: Vec<Matrix>) -> Result<(), String> {
        if names != self.names.as_slice() {
            return Err("parameter names differ".into());
        }
        for (i, (old, new)) in self.values.iter().zip(&values).enumerate() {
            if old.shape() != new.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                ));
            }
        }
        self.values = values;
        Ok(())
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SpMM(Arc<SparseMatrix>, Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
    params: HashMap<ParamKey, Var>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter of `store`, zero for parameters that did not
    /// take part in the pass.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Matrix> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&store.key(i))
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| {
                        let (r, c) = store.get(i).shape();
                        Matrix::zeros(r, c)
                    })
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    /// A tape that differentiates parameters.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape that treats parameters as constants; only [`Tape::input`]
    /// leaves receive gradients.
    pub fn frozen() -> Self {
        Tape {
            track_params: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, index: usize) -> Var {
        let key = store.key(index);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let track = self.track_params;
        let v = self.push(store.get(index).clone(), Op::Param, track);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `a + row`, broadcasting a `1 x cols` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let mut value = self.value(a).clone();
        let rv = self.value(row).data.clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a * row` elementwise, broadcasting a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row shape");
        let mut value = self.value(a).clone();
        let rv = self.value(row).data.clone();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a` times the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let value = self.value(a).scale(sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = value.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm(a, inv_std), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let m = self.value(a);
        assert!(start < end && end <= m.cols);
        let mut value = Matrix::zeros(m.rows, end - start);
        for r in 0..m.rows {
            value.row_mut(r).copy_from_slice(&m.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.value(a);
        let value = Matrix::from_vec(rows, cols, m.data.clone());
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Matrix::scalar(m.sum() / m.len() as f64);
        let rg = self.rg(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, a: Var) -> Var {
        let value = s.mul_dense(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SpMM(Arc::clone(s), a), rg)
    }

    /// Rows of `table` at `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let value = self.value(table).select_rows(idx);
        let rg = self.rg(table);
        self.push(value, Op::GatherRows(table, idx.to_vec()), rg)
    }

    /// Column vector of the entries of `a` at `idx`.
    pub fn pick(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let m = self.value(a);
        let value = Matrix::column(idx.iter().map(|&(r, c)| m.get(r, c)).collect());
        let rg = self.rg(a);
        self.push(value, Op::Pick(a, idx.to_vec()), rg)
    }

    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(val(*b)));
                }
                if self.rg(*b) {
                    acc(*b, val(*a).matmul_tn(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x / y));
                }
                if self.rg(*b) {
                    let mut d = g.zip_map(out, |x, o| x * o);
                    d = d.zip_map(val(*b), |x, y| -x / y);
                    acc(*b, d);
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.rg(*row) {
                    acc(*row, g.col_sums());
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if self.rg(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows {
                        for (x, s) in d.row_mut(r).iter_mut().zip(&rv.data) {
                            *x *= s;
                        }
                    }
                    acc(*a, d);
                }
                if self.rg(*row) {
                    acc(*row, g.zip_map(val(*a), |x, y| x * y).col_sums());
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::MulScalar(a, s) => {
                let sv = val(*s).item();
                if self.rg(*a) {
                    acc(*a, g.scale(sv));
                }
                if self.rg(*s) {
                    let d: f64 = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::scalar(d));
                }
            }
            Op::Silu(a) => acc(
                *a,
                g.zip_map(val(*a), |gx, x| {
                    let s = sigmoid(x);
                    gx * s * (1.0 + x * (1.0 - s))
                }),
            ),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |gx, x| if x > 0.0 { gx } else { 0.0 })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(out, |gx, y| gx * y * (1.0 - y))),
            Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx * sigmoid(x))),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gx, y| gx * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |gx, x| gx / x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |gx, y| gx * 0.5 / y)),
            Op::SoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = y[c] * (gr[c] - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = gr[c] - y[c].exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm(a, inv_std) => {
                let mut d = Matrix::zeros(g.rows, g.cols);
                let n = g.cols as f64;
                for r in 0..g.rows {
                    let xh = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = inv_std[r] * (gr[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    if self.rg(p) {
                        let mut d = Matrix::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, d);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::from_vec(rows, cols, g.data.clone()));
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.item()));
            }
            Op::MeanAll(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.item() / (rows * cols) as f64));
            }
            Op::SpMM(s, a) => acc(*a, s.tmul_dense(g)),
            Op::GatherRows(table, idx) => {
                let (rows, cols) = self.shape(*table);
                let mut d = Matrix::zeros(rows, cols);
                for (i, &r) in idx.iter().enumerate() {
                    for (x, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                        *x += v;
                    }
                }
                acc(*table, d);
            }
            Op::Pick(a, idx) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for (i, &(r, c)) in idx.iter().enumerate() {
                    d.data[r * cols + c] += g.data[i];
                }
                acc(*a, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d loss / d input for a graph builder.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let loss = build(&mut tape, xv);
        let g = tape.backward(loss).get(xv).cloned().unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data[i] += h;
            let mut minus = x.clone();
            minus.data[i] -= h;
            let eval = |m: Matrix| {
                let mut t = Tape::new();
                let v = t.input(m);
                let l = build(&mut t, v);
                t.value(l).item()
            };
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            let err = (fd - g.data[i]).abs() / (1.0 + fd.abs());
            assert!(err < 1e-6, "entry {i}: analytic {} vs fd {fd}", g.data[i]);
        }
    }

    #[test]
    fn elementwise_and_matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        check(
            |t, x| {
                let wv = t.constant(w.clone());
                let r = t.input(row.clone());
                let y = t.matmul(x, wv);
                let y = t.add_row(y, r);
                let y = t.silu(y);
                let z = t.sigmoid(y);
                let z = t.mul_row(z, r);
                let s = t.softplus(z);
                let e = t.exp(s);
                let l = t.log(e);
                let q = t.mul(l, y);
                t.sum(q)
            },
            random(&mut rng, 2, 3),
        );
    }

    #[test]
    fn softmax_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = random(&mut rng, 3, 5);
        check(
            |t, x| {
                let tv = t.constant(target.clone());
                let s = t.softmax_rows(x);
                let ln = t.layer_norm(x);
                let ls = t.log_softmax_rows(ln);
                let a = t.mul(s, tv);
                let b = t.mul(ls, tv);
                let c = t.add(a, b);
                t.mean(c)
            },
            random(&mut rng, 3, 5),
        );
    }

    #[test]
    fn structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sp = Arc::new(SparseMatrix::new(2, 4, vec![(0, 1, 0.5), (1, 3, -2.0), (1, 0, 1.0)]));
        check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 2, 3);
                let c = t.concat_cols(&[b, a, b]);
                let d = t.spmm(&sp, c);
                let e = t.transpose(d);
                let f = t.reshape(e, 1, 8);
                let g = t.gather_rows(x, &[3, 0, 3]);
                let gs = t.sum(g);
                let h = t.mul_scalar(f, gs);
                let sq = t.mul(h, h);
                let p = t.pick(sq, &[(0, 1), (0, 4)]);
                let den = t.constant(Matrix::column(vec![2.0, 3.0]));
                let q = t.div(p, den);
                let r = t.add(q, q);
                let r = t.sqrt(r);
                t.sum(r)
            },
            random(&mut rng, 4, 3).map(|v| v + 1.5),
        );
    }

    #[test]
    fn relu_and_sub_and_div_denominator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            |t, x| {
                let one = t.constant(Matrix::filled(2, 2, 0.3));
                let d = t.sub(x, one);
                let r = t.relu(d);
                let q = t.div(one, x);
                let s = t.scale(q, 0.7);
                let both = t.add(r, s);
                t.sum(both)
            },
            random(&mut rng, 2, 2).map(|v| v.abs() + 0.6),
        );
    }

    #[test]
    fn frozen_tape_skips_params() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::filled(2, 2, 1.0));
        let mut tape = Tape::frozen();
        let x = tape.input(Matrix::filled(1, 2, 1.0));
        let wv = tape.param(&store, w);
        let y = tape.matmul(x, wv);
        let l = tape.sum(y);
        let grads = tape.backward(l);
        assert!(grads.get(x).is_some());
        assert_eq!(grads.for_store(&store)[0], Matrix::zeros(2, 2));

        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(1, 2, 1.0));
        let wv = tape.param(&store, w);
        let again = tape.param(&store, w);
        assert_eq!(wv, again);
        let y = tape.matmul(x, wv);
        let l = tape.sum(y);
        assert_eq!(tape.backward(l).for_store(&store)[0], Matrix::filled(2, 2, 1.0));
    }
}
