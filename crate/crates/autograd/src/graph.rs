//! Reverse-mode tape. Nodes are appended in construction order, which is a
//! topological order; `backward` walks them once in reverse.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::{
    check_distribution, matmul_into, matmul_t_into, moments, sigmoid, t_matmul_into, Tensor,
    EPS_KL, LAYER_NORM_EPS,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    GatherMean(Var, Arc<Vec<Vec<usize>>>),
    GatherByIndex(Var, Arc<Vec<usize>>),
    ScatterByIndex(Var, Arc<Vec<usize>>),
    Sum(Var),
    Pick(Var, usize, usize),
    KlDiv(Var, Var),
    Dropout(Var, Vec<f64>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable parameter that
/// took part in the computation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_param.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.by_param {
            match self.by_param.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.by_param.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_param.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.by_param
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// A single-owner computation graph.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Graph {
    /// Graph in evaluation mode (dropout disabled).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Graph in training mode; dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Graph::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::KlDiv(a, b) => vec![*a, *b],
            Op::LayerNorm(a, b, c) => vec![*a, *b, *c],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::SelectCols(a, _)
            | Op::GatherMean(a, _)
            | Op::GatherByIndex(a, _)
            | Op::ScatterByIndex(a, _)
            | Op::Sum(a)
            | Op::Pick(a, _, _)
            | Op::Dropout(a, _) => vec![*a],
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated requests for the same name return
    /// the same node. Non-trainable parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let p = store
            .param(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        let var = if p.trainable {
            self.nodes.push(Node {
                value: p.value.clone(),
                op: Op::Param(name.to_string()),
                requires_grad: true,
            });
            Var(self.nodes.len() - 1)
        } else {
            self.constant(p.value.clone())
        };
        self.params.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v, "matmul")
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_t")?;
        let (n, k2) = self.value(b).dims2("matmul_t")?;
        if k != k2 {
            return Err(mismatch("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_t_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMulT(a, b), Tensor::raw(vec![m, n], out), "matmul_t")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        self.push(Op::Transpose(a), v, "transpose")
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Ok(Tensor::raw(x.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), v, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, "mul")
    }

    /// Adds a `[1, n]` (or `[n]`) row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let x = self.value(a);
        let r = self.value(row);
        let n = x.cols();
        if r.len() != n {
            return Err(mismatch("add_row", format!("{:?} + row {:?}", x.shape(), r.shape())));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, b) in chunk.iter_mut().zip(r.data()) {
                *d += b;
            }
        }
        let v = Tensor::raw(x.shape().to_vec(), data);
        self.push(Op::AddRow(a, row), v, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = x.softmax(x.rank() - 1)?;
        self.push(Op::Softmax(a), v, "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        if n == 0 {
            return Err(TensorError::DegenerateSoftmax { axis: x.rank() - 1 });
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::raw(x.shape().to_vec(), data);
        self.push(Op::LogSoftmax(a), v, "log_softmax")
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let v = self
            .value(a)
            .layer_norm(self.value(gain), self.value(bias))?;
        self.push(Op::LayerNorm(a, gain, bias), v, "layer_norm")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(mismatch("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let v = Tensor::raw(vec![rows, total], data);
        self.push(Op::ConcatCols(parts.to_vec()), v, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(mismatch("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let v = Tensor::raw(vec![rows, cols], data);
        self.push(Op::ConcatRows(parts.to_vec()), v, "concat_rows")
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(mismatch("slice_cols", format!("{start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row_slice(i)[start..start + len]);
        }
        let v = Tensor::raw(vec![r, len], data);
        self.push(Op::SliceCols(a, start), v, "slice_cols")
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n = x.rows();
        let c = x.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(x.row_slice(r));
        }
        if rows.is_empty() {
            return Err(mismatch("select_rows", "empty row selection".into()));
        }
        let v = Tensor::raw(vec![rows.len(), c], data);
        self.push(Op::SelectRows(a, rows.to_vec()), v, "select_rows")
    }

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2("select_cols")?;
        if cols.is_empty() {
            return Err(mismatch("select_cols", "empty column selection".into()));
        }
        let mut data = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            for &j in cols {
                if j >= c {
                    return Err(TensorError::IndexOutOfRange {
                        op: "select_cols",
                        index: j,
                        extent: c,
                    });
                }
                data.push(x.at(i, j));
            }
        }
        let v = Tensor::raw(vec![r, cols.len()], data);
        self.push(Op::SelectCols(a, cols.to_vec()), v, "select_cols")
    }

    /// Row `i` of the output is the mean of the rows of `table` listed in `groups[i]`.
    pub fn gather_mean(&mut self, table: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let t = self.value(table);
        let n = t.rows();
        let c = t.cols();
        let mut data = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(mismatch("gather_mean", format!("group {g} is empty")));
            }
            let w = 1.0 / members.len() as f64;
            for &m in members {
                if m >= n {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_mean",
                        index: m,
                        extent: n,
                    });
                }
                for (o, v) in data[g * c..(g + 1) * c].iter_mut().zip(t.row_slice(m)) {
                    *o += w * v;
                }
            }
        }
        let v = Tensor::raw(vec![groups.len(), c], data);
        self.push(Op::GatherMean(table, groups), v, "gather_mean")
    }

    /// `out[i, j] = m[i, index[i * n + j]]` for a `[n, R]` input and `n x n` index.
    pub fn gather_by_index(&mut self, m: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let x = self.value(m);
        let (n, r) = x.dims2("gather_by_index")?;
        if index.len() != n * n {
            return Err(mismatch("gather_by_index", format!("index of {} for {n} rows", index.len())));
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let k = index[i * n + j];
                if k >= r {
                    return Err(TensorError::IndexOutOfRange {
                        op: "gather_by_index",
                        index: k,
                        extent: r,
                    });
                }
                data[i * n + j] = x.at(i, k);
            }
        }
        let v = Tensor::raw(vec![n, n], data);
        self.push(Op::GatherByIndex(m, index), v, "gather_by_index")
    }

    /// `out[i, r] = sum_j e[i, j] * [index[i * n + j] == r]` for a `[n, n]` input.
    pub fn scatter_by_index(&mut self, e: Var, index: Arc<Vec<usize>>, labels: usize) -> Result<Var> {
        let x = self.value(e);
        let (n, n2) = x.dims2("scatter_by_index")?;
        if n != n2 || index.len() != n * n {
            return Err(mismatch("scatter_by_index", format!("{:?} with index of {}", x.shape(), index.len())));
        }
        let mut data = vec![0.0; n * labels];
        for i in 0..n {
            for j in 0..n {
                let k = index[i * n + j];
                if k >= labels {
                    return Err(TensorError::IndexOutOfRange {
                        op: "scatter_by_index",
                        index: k,
                        extent: labels,
                    });
                }
                data[i * labels + k] += x.at(i, j);
            }
        }
        let v = Tensor::raw(vec![n, labels], data);
        self.push(Op::ScatterByIndex(e, index), v, "scatter_by_index")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v, "sum")
    }

    /// Sum of several nodes of equal shape.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("add_all of nothing".into()))?;
        for p in &parts[1..] {
            acc = self.add(acc, *p)?;
        }
        Ok(acc)
    }

    /// The single entry `a[r, c]` as a `[1, 1]` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.dims2("pick")?;
        if r >= rows || c >= cols {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index: r.max(c),
                extent: rows.max(cols),
            });
        }
        let v = Tensor::scalar(x.at(r, c));
        self.push(Op::Pick(a, r, c), v, "pick")
    }

    /// Clamped `KL(p || q)` as a `[1, 1]` node; see [`crate::kl_div`].
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        let v = crate::tensor::kl_div(self.value(p), self.value(q))?;
        self.push(Op::KlDiv(p, q), Tensor::scalar(v), "kl_div")
    }

    /// `KL(p || q) + KL(q || p)`.
    pub fn symmetric_kl(&mut self, p: Var, q: Var) -> Result<Var> {
        let a = self.kl_div(p, q)?;
        let b = self.kl_div(q, p)?;
        self.add(a, b)
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::raw(x.shape().to_vec(), data);
        self.push(Op::Dropout(a, mask), v, "dropout")
    }

    /// One LSTM step on `[1, d]` rows with fused gate weights (input, forget,
    /// candidate, output). Returns `(c', h')`.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        c: Var,
        h: Var,
        w_input: Var,
        w_hidden: Var,
        bias: Var,
    ) -> Result<(Var, Var)> {
        let hidden = self.value(c).cols();
        if self.shape(w_hidden) != [hidden, 4 * hidden] || self.shape(h) != [1, hidden] {
            return Err(mismatch(
                "lstm_cell",
                format!(
                    "state {:?}/{:?} with recurrent weights {:?}",
                    self.shape(c),
                    self.shape(h),
                    self.shape(w_hidden)
                ),
            ));
        }
        let xi = self.matmul(x, w_input)?;
        let hh = self.matmul(h, w_hidden)?;
        let pre = self.add(xi, hh)?;
        let pre = self.add_row(pre, bias)?;
        let i = self.slice_cols(pre, 0, hidden)?;
        let f = self.slice_cols(pre, hidden, hidden)?;
        let g = self.slice_cols(pre, 2 * hidden, hidden)?;
        let o = self.slice_cols(pre, 3 * hidden, hidden)?;
        let i = self.sigmoid(i)?;
        let f = self.sigmoid(f)?;
        let g = self.tanh(g)?;
        let o = self.sigmoid(o)?;
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c_new = self.add(fc, ig)?;
        let tc = self.tanh(c_new)?;
        let h_new = self.mul(o, tc)?;
        Ok((c_new, h_new))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param(name) = &node.op {
                let t = Tensor::raw(node.value.shape().to_vec(), g);
                match out.by_param.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.by_param.insert(name.clone(), t);
                    }
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_t_into(g, bd, ga, m, n, k);
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    t_matmul_into(ad, g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_into(g, bd, ga, m, n, k);
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    t_matmul_into(g, ad, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                let n = self.value(*row).len();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bd = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                let ad = self.value(*a).data();
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, gv) in ga.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), xv) in ga.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = grow.iter().sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm(a, gain, bias) => {
                let x = self.value(*a);
                let d = x.cols();
                let gd = self.value(*gain).data();
                let mut g_gain = vec![0.0; d];
                let mut g_bias = vec![0.0; d];
                let mut gx = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let (mean, inv) = moments(xr, LAYER_NORM_EPS);
                    let grow = &g[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(p, q)| p * q).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        g_gain[j] += grow[j] * xhat[j];
                        g_bias[j] += grow[j];
                        gx[r * d + j] = inv / d as f64 * (d as f64 * dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, &gx);
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    add_into(gg, &g_gain);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    add_into(gb, &g_bias);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let len = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        add_into(&mut ga[r * c + start..r * c + start + len], grow);
                    }
                }
            }
            Op::SelectRows(a, rows) => {
                let c = node.value.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SelectCols(a, cols) => {
                let c = self.value(*a).cols();
                let k = cols.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, grow) in g.chunks(k).enumerate() {
                        for (gv, &j) in grow.iter().zip(cols) {
                            ga[r * c + j] += gv;
                        }
                    }
                }
            }
            Op::GatherMean(t, groups) => {
                let c = node.value.cols();
                if let Some(gt) = self.acc(grads, *t) {
                    for (gi, members) in groups.iter().enumerate() {
                        let w = 1.0 / members.len() as f64;
                        for &m in members {
                            for (o, gv) in gt[m * c..(m + 1) * c].iter_mut().zip(&g[gi * c..(gi + 1) * c]) {
                                *o += w * gv;
                            }
                        }
                    }
                }
            }
            Op::GatherByIndex(m, index) => {
                let n = node.value.rows();
                let r = self.value(*m).cols();
                if let Some(gm) = self.acc(grads, *m) {
                    for i in 0..n {
                        for j in 0..n {
                            gm[i * r + index[i * n + j]] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ScatterByIndex(e, index) => {
                let n = self.value(*e).rows();
                let labels = node.value.cols();
                if let Some(ge) = self.acc(grads, *e) {
                    for i in 0..n {
                        for j in 0..n {
                            ge[i * n + j] += g[i * labels + index[i * n + j]];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Pick(a, r, c) => {
                let cols = self.value(*a).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    ga[r * cols + c] += g[0];
                }
            }
            Op::KlDiv(p, q) => {
                let pd = self.value(*p).data();
                let qd = self.value(*q).data();
                if let Some(gp) = self.acc(grads, *p) {
                    for ((o, pi), qi) in gp.iter_mut().zip(pd).zip(qd) {
                        let inner = if *pi > EPS_KL { 1.0 } else { 0.0 };
                        *o += g[0] * (pi.max(EPS_KL).ln() - qi.max(EPS_KL).ln() + inner);
                    }
                }
                if let Some(gq) = self.acc(grads, *q) {
                    for ((o, pi), qi) in gq.iter_mut().zip(pd).zip(qd) {
                        if *qi > EPS_KL {
                            *o -= g[0] * pi / qi;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
        }
    }

    /// Checks that `p` is a normalized distribution (used by callers that
    /// want the KL precondition surfaced before building the node).
    pub fn check_distribution(&self, p: Var) -> Result<()> {
        check_distribution(self.value(p))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
