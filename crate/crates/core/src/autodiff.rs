//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough saved state to run its backward
//! rule; nodes are therefore always in topological order, and
//! [`Tape::backward`] walks them once in reverse.
//!
//! Broadcasting is limited to `matrix op row-vector` and `tensor op scalar`;
//! every other shape mismatch is an error.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    DivScalar(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Log(Var),
    Sum(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SqDist(Var, Var),
    LogSimilarity { d: Var, eps: f64 },
    MaskedMaxCols { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it participates in gradients iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_operand(&self, x: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(x)?;
        let rs = self.shape(row);
        let ok = matches!(rs, [c] if *c == n) || matches!(rs, [1, c] if *c == n);
        if !ok {
            return Err(shape_err(name, self.shape(x), rs));
        }
        Ok((m, n))
    }

    /// `x[m×n] + row[1×n]`, broadcasting the row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_operand(x, row, "add_row")?;
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::AddRow(x, row), rg))
    }

    /// `x[m×n] ⊙ row[1×n]`, broadcasting the row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_operand(x, row, "mul_row")?;
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= r[j];
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::MulRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v + c).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    fn scalar_operand(&self, s: Var, x: Var, name: &'static str) -> Result<f64> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(shape_err(name, self.shape(x), ts.shape()));
        }
        Ok(ts.data()[0])
    }

    /// `x * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_operand(s, x, "mul_scalar")?;
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulScalar(x, s), rg))
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let c = self.scalar_operand(s, x, "div_scalar")?;
        if c == 0.0 {
            return Err(Error::Contract("division by zero scalar".into()));
        }
        let t = self.value(x);
        let data = t.data().iter().map(|v| v / c).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::DivScalar(x, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        let data = transpose_raw(self.data(x), m, n);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, m], data)?, Op::Transpose(x), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax restricted to columns with `keep[j] == true`.
    ///
    /// Dropped columns are exactly zero and every row renormalizes over the
    /// kept columns. `None` keeps every column and runs the same arithmetic.
    pub fn masked_softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if let Some(k) = keep {
            if k.len() != n {
                return Err(Error::Contract(format!(
                    "softmax column mask has length {} but rows have {n} columns",
                    k.len()
                )));
            }
            if !k.iter().any(|&b| b) {
                return Err(Error::Contract("softmax column mask keeps no column".into()));
            }
        }
        let kept = |j: usize| keep.map_or(true, |k| k[j]);
        let src = self.data(x);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let out = &mut data[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if kept(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut sum = 0.0;
            for j in 0..n {
                if kept(j) {
                    let e = (row[j] - mx).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for v in out.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::Softmax(x), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `max(x, 0)` elementwise.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), data).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Contract(format!("log of non-positive value {bad}")));
        }
        let data = t.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > m {
            return Err(shape_err("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.data(x)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len, n], data)?, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[rows, n], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Per-row layer normalization followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_operand(x, gain, "layer_norm gain")?;
        self.row_operand(x, bias, "layer_norm bias")?;
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&[m, n], data)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Pairwise squared Euclidean distances between the rows of `x[m×d]`
    /// and the rows of `p[k×d]`, giving `m×k`.
    pub fn sq_dist(&mut self, x: Var, p: Var) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        let (k, d2) = self.dims2(p)?;
        if d != d2 {
            return Err(shape_err("sq_dist", self.shape(x), self.shape(p)));
        }
        let (xs, ps) = (self.data(x), self.data(p));
        let mut data = vec![0.0; m * k];
        for i in 0..m {
            let xi = &xs[i * d..(i + 1) * d];
            for j in 0..k {
                let pj = &ps[j * d..(j + 1) * d];
                data[i * k + j] = xi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        let rg = self.rg(x) || self.rg(p);
        Ok(self.push(Tensor::new(&[m, k], data)?, Op::SqDist(x, p), rg))
    }

    /// `ln((d + 1) / (d + eps))` elementwise on squared distances.
    pub fn log_similarity(&mut self, d: Var, eps: f64) -> Result<Var> {
        let t = self.value(d);
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("negative squared distance".into()));
        }
        let data = t.data().iter().map(|&v| ((v + 1.0) / (v + eps)).ln()).collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(d);
        Ok(self.push(out, Op::LogSimilarity { d, eps }, rg))
    }

    /// Column-wise max over the rows with `keep[i] == true`, giving `1×k`.
    /// Ties resolve to the lowest row index.
    pub fn masked_max_cols(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, k) = self.dims2(x)?;
        if keep.len() != m {
            return Err(Error::Contract(format!(
                "pooling mask has length {} but map has {m} positions",
                keep.len()
            )));
        }
        if !keep.iter().any(|&b| b) {
            return Err(Error::Contract("pooling mask keeps no position".into()));
        }
        let src = self.data(x);
        let mut argmax = vec![usize::MAX; k];
        let mut data = vec![f64::NEG_INFINITY; k];
        for i in (0..m).filter(|&i| keep[i]) {
            for j in 0..k {
                let v = src[i * k + j];
                if v > data[j] {
                    data[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, k], data)?, Op::MaskedMaxCols { x, argmax }, rg))
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let t = self.value(logits);
        let c = t.numel();
        if !(t.rank() == 1 || (t.rank() == 2 && t.shape()[0] == 1)) {
            return Err(Error::Contract(format!(
                "cross_entropy expects a single logit row, got {:?}",
                t.shape()
            )));
        }
        if label >= c {
            return Err(Error::Param(format!("label {label} out of range for {c} classes")));
        }
        let z = t.data();
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        let probs = z.iter().map(|v| (v - mx).exp() / sum).collect();
        let loss = lse - z[label];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, label, probs }, rg))
    }

    /// Reverse pass from a one-element `loss`. Afterwards every leaf with
    /// `requires_grad` holds `d loss / d leaf` in its `grad` slot.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        for node in self.nodes.iter_mut() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let n = self.data(*row).len();
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
                self.acc(grads, *row, |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                });
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.data(*x), self.data(*row));
                let n = vr.len();
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vr[k % n];
                    }
                });
                self.acc(grads, *row, |d| {
                    for k in 0..g.len() {
                        d[k % n] += g[k] * vx[k];
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| axpy(d, g, *c)),
            Op::AddScalar(x) => self.acc(grads, *x, |d| axpy(d, g, 1.0)),
            Op::MulScalar(x, s) => {
                let c = self.data(*s)[0];
                let vx = self.data(*x);
                self.acc(grads, *x, |d| axpy(d, g, c));
                let ds: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                self.acc(grads, *s, |d| d[0] += ds);
            }
            Op::DivScalar(x, s) => {
                let c = self.data(*s)[0];
                self.acc(grads, *x, |d| axpy(d, g, 1.0 / c));
                // d(x/c)/dc = -(x/c)/c
                let ds: f64 = -g.iter().zip(out).map(|(a, b)| a * b).sum::<f64>() / c;
                self.acc(grads, *s, |d| d[0] += ds);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.rg(*a) {
                    let da = matmul_nt(g, self.data(*b), m, n, k);
                    self.acc(grads, *a, |d| axpy(d, &da, 1.0));
                }
                if self.rg(*b) {
                    let db = matmul_tn(self.data(*a), g, m, k, n);
                    self.acc(grads, *b, |d| axpy(d, &db, 1.0));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let gt = transpose_raw(g, n, m);
                self.acc(grads, *x, |d| axpy(d, &gt, 1.0));
            }
            Op::Softmax(x) => {
                let (m, n) = node.value.dims2().unwrap();
                self.acc(grads, *x, |d| {
                    for r in 0..m {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.data(*x);
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        let v = vx[k];
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.data(*x);
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Log(x) => {
                let vx = self.data(*x);
                self.acc(grads, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vx[k];
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc(grads, *x, |d| d.iter_mut().for_each(|v| *v += g0));
            }
            Op::SliceRows { x, start } => {
                let (_, n) = self.value(*x).dims2().unwrap();
                self.acc(grads, *x, |d| axpy(&mut d[start * n..start * n + g.len()], g, 1.0));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let len = g.len() / m.max(1);
                self.acc(grads, *x, |d| {
                    for r in 0..m {
                        for c in 0..len {
                            d[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(grads, p, |d| axpy(d, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    self.acc(grads, p, |d| {
                        for r in 0..m {
                            for c in 0..w {
                                d[r * w + c] += g[r * n + col + c];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2().unwrap();
                let gv = self.data(*gain);
                self.acc(grads, *gain, |d| {
                    for k in 0..g.len() {
                        d[k % n] += g[k] * xhat[k];
                    }
                });
                self.acc(grads, *bias, |d| {
                    for k in 0..g.len() {
                        d[k % n] += g[k];
                    }
                });
                self.acc(grads, *x, |d| {
                    let nf = n as f64;
                    for r in 0..m {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * n + j];
                        }
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            d[r * n + j] +=
                                inv_std[r] / nf * (nf * dh - sum_dh - xhat[r * n + j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::SqDist(x, p) => {
                let (m, dd) = self.value(*x).dims2().unwrap();
                let (k, _) = self.value(*p).dims2().unwrap();
                let (xs, ps) = (self.data(*x), self.data(*p));
                let mut dx = vec![0.0; m * dd];
                let mut dp = vec![0.0; k * dd];
                for i in 0..m {
                    for j in 0..k {
                        let gij = 2.0 * g[i * k + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..dd {
                            let diff = gij * (xs[i * dd + c] - ps[j * dd + c]);
                            dx[i * dd + c] += diff;
                            dp[j * dd + c] -= diff;
                        }
                    }
                }
                self.acc(grads, *x, |d| axpy(d, &dx, 1.0));
                self.acc(grads, *p, |d| axpy(d, &dp, 1.0));
            }
            Op::LogSimilarity { d: dist, eps } => {
                let vd = self.data(*dist);
                self.acc(grads, *dist, |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * (1.0 / (vd[k] + 1.0) - 1.0 / (vd[k] + eps));
                    }
                });
            }
            Op::MaskedMaxCols { x, argmax } => {
                let (_, k) = self.value(*x).dims2().unwrap();
                self.acc(grads, *x, |d| {
                    for (j, &r) in argmax.iter().enumerate() {
                        d[r * k + j] += g[j];
                    }
                });
            }
            Op::CrossEntropy { logits, label, probs } => {
                let g0 = g[0];
                self.acc(grads, *logits, |d| {
                    for (k, p) in probs.iter().enumerate() {
                        d[k] += g0 * (p - if k == *label { 1.0 } else { 0.0 });
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn axpy(d: &mut [f64], g: &[f64], c: f64) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += c * b;
    }
}

/// `a[m×k] · b[k×n]`.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for j in 0..n {
                ci[j] += aip * bp[j];
            }
        }
    }
    c
}

/// `a[m×n] · b[k×n]ᵀ`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let bj = &b[j * n..(j + 1) * n];
            c[i * k + j] = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let cp = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                cp[j] += aip * bi[j];
            }
        }
    }
    c
}

fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
