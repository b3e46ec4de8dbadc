//! Dense row-major `f64` tensors and the eager forms of the numeric kernels
//! the model needs (softmax, layer norm, LSTM cell, KL divergence).

use crate::error::{Result, TensorError};

/// Probability clamp applied before every logarithm inside KL terms.
pub const EPS_KL: f64 = 1e-8;

/// Epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the zero-extent check. Used internally for
    /// degenerate-axis error reporting.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::raw(vec![1, 1], vec![value])
    }

    /// A `[1, n]` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor::raw(vec![1, values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "from_rows",
                detail: "ragged rows".into(),
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix view: all leading axes are flattened.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor::raw(vec![c, r], out))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("[{m}, {k}] x [{k2}, {n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::raw(vec![m, n], out))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, extent, inner) = self.axis_split(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * extent + k) * inner + i;
                let max = (0..extent)
                    .map(|k| self.data[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..extent {
                    let e = (self.data[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..extent {
                    out[idx(k)] /= total;
                }
            }
        }
        Ok(Tensor::raw(self.shape.clone(), out))
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: self.rank(),
            });
        }
        let extent = self.shape[axis];
        if extent == 0 {
            return Err(TensorError::DegenerateSoftmax { axis });
        }
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        Ok((outer, extent, inner))
    }

    /// Layer normalization over the last axis with the default epsilon.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.layer_norm_eps(gain, bias, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = self.cols();
        if gain.len() != d || bias.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain/bias of length {}/{} for last-axis extent {d}",
                    gain.len(),
                    bias.len()
                ),
            });
        }
        if d == 1 && eps == 0.0 {
            return Err(TensorError::LayerNormDivisionByZero);
        }
        let mut out = vec![0.0; self.len()];
        for r in 0..self.rows() {
            let x = self.row_slice(r);
            let (mean, inv_std) = moments(x, eps);
            for j in 0..d {
                out[r * d + j] = (x[j] - mean) * inv_std * gain.data[j] + bias.data[j];
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "layer_norm" });
        }
        Ok(Tensor::raw(self.shape.clone(), out))
    }
}

/// Mean and inverse standard deviation of a row (population variance).
pub(crate) fn moments(x: &[f64], eps: f64) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// `out += a[m,k] * b[k,n]`, i-k-j loop order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_t_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`.
pub(crate) fn t_matmul_into(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weights of a single LSTM cell. Gate order in the fused matrices is
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmWeights {
    /// `[input_dim, 4 * hidden]`
    pub w_input: Tensor,
    /// `[hidden, 4 * hidden]`
    pub w_hidden: Tensor,
    /// `[1, 4 * hidden]`
    pub bias: Tensor,
}

impl LstmWeights {
    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[0]
    }
}

/// One LSTM step on row vectors. Returns `(c', h')`.
pub fn lstm_cell(x: &Tensor, c: &Tensor, h: &Tensor, w: &LstmWeights) -> Result<(Tensor, Tensor)> {
    let hidden = w.hidden();
    let shapes_ok = x.shape() == [1, w.w_input.shape()[0]]
        && c.shape() == [1, hidden]
        && h.shape() == [1, hidden]
        && w.w_input.shape() == [w.w_input.shape()[0], 4 * hidden]
        && w.w_hidden.shape() == [hidden, 4 * hidden]
        && w.bias.shape() == [1, 4 * hidden];
    if !shapes_ok {
        return Err(TensorError::ShapeMismatch {
            op: "lstm_cell",
            detail: format!(
                "x {:?}, c {:?}, h {:?}, w_input {:?}, w_hidden {:?}, bias {:?}",
                x.shape(),
                c.shape(),
                h.shape(),
                w.w_input.shape(),
                w.w_hidden.shape(),
                w.bias.shape()
            ),
        });
    }
    let mut gates = x.matmul(&w.w_input)?.into_data();
    let hh = h.matmul(&w.w_hidden)?;
    for (g, (a, b)) in gates.iter_mut().zip(hh.data().iter().zip(w.bias.data())) {
        *g += a + b;
    }
    let mut c_new = vec![0.0; hidden];
    let mut h_new = vec![0.0; hidden];
    for j in 0..hidden {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[hidden + j]);
        let g = gates[2 * hidden + j].tanh();
        let o = sigmoid(gates[3 * hidden + j]);
        c_new[j] = f * c.data()[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    Ok((Tensor::row(c_new), Tensor::row(h_new)))
}

pub(crate) fn check_distribution(p: &Tensor) -> Result<()> {
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TensorError::NotNormalized { sum });
    }
    Ok(())
}

/// `KL(p || q)` with both sides clamped to at least [`EPS_KL`] before the log.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "kl_div",
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        });
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(p.data()
        .iter()
        .zip(q.data())
        .map(|(&pi, &qi)| pi * (pi.max(EPS_KL).ln() - qi.max(EPS_KL).ln()))
        .sum())
}

/// `KL(p || q) + KL(q || p)`.
pub fn symmetric_kl(p: &Tensor, q: &Tensor) -> Result<f64> {
    Ok(kl_div(p, q)? + kl_div(q, p)?)
}
