//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the indices of its inputs, so node order is already a
//! topological order and [`Graph::backward`] simply walks the tape in reverse.
//! Reductions always run in index order, which makes gradients bit-identical
//! across runs.
//!
//! ```
//! use miat::autodiff::Graph;
//! use miat::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.leaf(Tensor::scalar(3.0), true).unwrap();
//! let y = g.mul(w, w).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap(), &[6.0]);
//! ```

use std::collections::HashMap;

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | Add(a, b)
            | AddRow(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | MulCol(a, b)
            | Maximum(a, b)
            | Minimum(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | Sigmoid(a)
            | Tanh(a)
            | Exp(a)
            | Log(a)
            | Abs(a)
            | SoftmaxRows(a)
            | LogSoftmaxRows(a)
            | Sum(a)
            | SumRows(a)
            | SumCols(a)
            | Reshape(a) => vec![*a],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            SliceCols { x, .. } | SliceRows { x, .. } | GatherRows { x, .. } | Pick { x, .. } => {
                vec![*x]
            }
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for each parameter that took part in the computation.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_cache: HashMap<ParamId, Var>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite value produced by {what}"
        )));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        check_finite(&value, what)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, mut value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite(&value, "leaf input")?;
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Inserts a learnable parameter, reusing the node if it is already on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let t = store.get(id);
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("stored shape");
        value.requires_grad = true;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((id, v));
        self.param_cache.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(dim_err!("matmul {m}x{k} by {k2}x{n}"));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        self.push(t, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_map(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(va.shape(), data)?;
        self.push(t, op, what)
    }

    fn map(&mut self, a: Var, op: Op, what: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor::new(va.shape(), va.data().iter().map(|x| f(*x)).collect())?;
        self.push(t, op, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Maximum(a, b), "maximum", f64::max)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Minimum(a, b), "minimum", f64::min)
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (r, n2) = self.dims(row)?;
        if r != 1 || n != n2 {
            return Err(dim_err!("add_row {m}x{n} with {r}x{n2}"));
        }
        let bias = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias[j];
            }
        }
        self.push(Tensor::new(&[m, n], data)?, Op::AddRow(a, row), "add_row")
    }

    /// Scales row `i` of an `m×n` matrix by `col[i]` (`col` is `m×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (m2, c) = self.dims(col)?;
        if m != m2 || c != 1 {
            return Err(dim_err!("mul_col {m}x{n} with {m2}x{c}"));
        }
        let s = self.value(col).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= s[i];
            }
        }
        self.push(Tensor::new(&[m, n], data)?, Op::MulCol(a, col), "mul_col")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        self.map(a, Op::Log(a), "log", f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), "abs", f64::abs)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if n == 0 {
            return Err(dim_err!("softmax over an empty row"));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            softmax_in_place(&mut data[i * n..(i + 1) * n]);
        }
        self.push(Tensor::new(&[m, n], data)?, Op::SoftmaxRows(a), "softmax")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if n == 0 {
            return Err(dim_err!("log_softmax over an empty row"));
        }
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(
            Tensor::new(&[m, n], data)?,
            Op::LogSoftmaxRows(a),
            "log_softmax",
        )
    }

    /// Per-row layer normalization with the biased variance estimator.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if d == 0 {
            return Err(dim_err!("layer_norm over width 0"));
        }
        for (what, p) in [("gain", gain), ("bias", bias)] {
            let len = self.value(p).len();
            if len != d {
                return Err(dim_err!("layer_norm {what} has {len} values, width is {d}"));
            }
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let bs = self.value(bias).data();
        let mut out = vec![0.0; m * d];
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gs[j] + bs[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push(Tensor::new(&[m, d], out)?, op, "layer_norm")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start + len > n {
            return Err(dim_err!(
                "column slice {}..{} out of {}",
                start,
                start + len,
                n
            ));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::new(&[m, len], out)?,
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        self.push(t, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let m = self.dims(first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(dim_err!("concat_cols with {r} rows, expected {m}"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(&[m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let n = self.dims(first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(dim_err!("concat_rows with width {c}, expected {n}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(&[rows, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Row lookup, e.g. an embedding table indexed by token ids.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Data(format!("row index {i} out of {m}")));
            }
            out.extend_from_slice(&xs[i * n..(i + 1) * n]);
        }
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
        };
        self.push(Tensor::new(&[idx.len(), n], out)?, op, "gather_rows")
    }

    /// Collects the listed `(row, col)` entries into a `1×k` row.
    pub fn pick(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        let mut out = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(Error::Data(format!("entry ({r},{c}) out of {m}x{n}")));
            }
            out.push(self.value(x).data()[r * n + c]);
        }
        let op = Op::Pick {
            x,
            idx: idx.to_vec(),
        };
        self.push(Tensor::new(&[1, idx.len()], out)?, op, "pick")
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Column sums of an `m×n` matrix as a `1×n` row.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let xs = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xs[i * n + j];
            }
        }
        self.push(Tensor::new(&[1, n], out)?, Op::SumRows(a), "sum_rows")
    }

    /// Row sums of an `m×n` matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let xs = self.value(a).data();
        let out = (0..m)
            .map(|i| xs[i * n..(i + 1) * n].iter().sum())
            .collect();
        self.push(Tensor::new(&[m, 1], out)?, Op::SumCols(a), "sum_cols")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), "reshape")
    }

    pub fn add_many(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| dim_err!("sum of nothing"))?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and scales
    /// survivors by `1/(1-rate)`. Identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let m = self.constant(Tensor::new(&shape, mask)?)?;
        self.mul(x, m)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("rank 2");
                let n = self.nodes[b.0].value.cols();
                if needs(*a) {
                    let bv = val(*b);
                    acc(*a, &|ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gy[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    let av = val(*a);
                    acc(*b, &|gb| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += aip * gy[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().expect("rank 2");
                acc(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gy[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, gy));
                acc(*b, &|gb| add_into(gb, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, gy));
                acc(*b, &|gb| gb.iter_mut().zip(gy).for_each(|(g, d)| *g -= d));
            }
            Op::AddRow(a, row) => {
                acc(*a, &|ga| add_into(ga, gy));
                let n = self.nodes[row.0].value.len();
                acc(*row, &|gr| {
                    for (i, d) in gy.iter().enumerate() {
                        gr[i % n] += d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * bv[i];
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        gb[i] += gy[i] * av[i];
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (val(*a), val(*col));
                let m = cv.len();
                let n = av.len().checked_div(m).unwrap_or(0);
                acc(*a, &|ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += gy[i * n + j] * cv[i];
                        }
                    }
                });
                acc(*col, &|gc| {
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gy[i * n + j] * av[i * n + j];
                        }
                        gc[i] += s;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|ga| {
                ga.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &|ga| add_into(ga, gy)),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += gy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += gy[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Exp(a) => acc(*a, &|ga| {
                for i in 0..ga.len() {
                    ga[i] += gy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] / av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        ga[i] += gy[i] * av[i].signum() * f64::from(av[i] != 0.0);
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (val(*a), val(*b));
                let take_a = |i: usize| {
                    if is_max {
                        av[i] >= bv[i]
                    } else {
                        av[i] <= bv[i]
                    }
                };
                acc(*a, &|ga| {
                    for i in 0..ga.len() {
                        if take_a(i) {
                            ga[i] += gy[i];
                        }
                    }
                });
                acc(*b, &|gb| {
                    for i in 0..gb.len() {
                        if !take_a(i) {
                            gb[i] += gy[i];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                acc(*a, &|ga| {
                    for (row, (gr, yr)) in gy.chunks(n).zip(y.chunks(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, p)| g * p).sum();
                        for j in 0..n {
                            ga[row * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.value.cols();
                acc(*a, &|ga| {
                    for (row, (gr, yr)) in gy.chunks(n).zip(y.chunks(n)).enumerate() {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[row * n + j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gs = val(*gain);
                acc(*gain, &|gg| {
                    for (i, g) in gy.iter().enumerate() {
                        gg[i % d] += g * xhat[i];
                    }
                });
                acc(*bias, &|gb| {
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % d] += g;
                    }
                });
                acc(*x, &|gx| {
                    for (row, inv) in inv_std.iter().enumerate() {
                        let base = row * d;
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = gy[base + j] * gs[j];
                            mean_g += gh;
                            mean_gx += gh * xhat[base + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gh = gy[base + j] * gs[j];
                            gx[base + j] += inv * (gh - mean_g - xhat[base + j] * mean_gx);
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = self.nodes[x.0].value.cols();
                let w = node.value.cols();
                acc(*x, &|gx| {
                    for (i, gr) in gy.chunks(w.max(1)).enumerate() {
                        for j in 0..w {
                            gx[i * n + start + j] += gr[j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = node.value.cols();
                acc(*x, &|gx| {
                    add_into(&mut gx[start * n..start * n + gy.len()], gy)
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let m = self.nodes[p.0].value.rows();
                    acc(p, &|gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += gy[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &|gp| add_into(gp, &gy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = node.value.cols();
                acc(*x, &|gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &gy[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Pick { x, idx } => {
                let n = self.nodes[x.0].value.cols();
                acc(*x, &|gx| {
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        gx[r * n + c] += gy[k];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|ga| ga.iter_mut().for_each(|g| *g += gy[0])),
            Op::SumRows(a) => {
                let n = node.value.cols();
                acc(*a, &|ga| {
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += gy[i % n];
                    }
                });
            }
            Op::SumCols(a) => {
                let n = self.nodes[a.0].value.cols();
                acc(*a, &|ga| {
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += gy[i / n];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

/// Randomness for dropout; `Some` only while training.
pub type TrainRng<'a> = Option<&'a mut (dyn rand::RngCore + 'static)>;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax with per-row max subtraction.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn linear_sum_gradient_is_input_broadcast() {
        // loss = sum(x W): dL/dW[i][j] = x[i]
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, -2.0, 0.5])).unwrap();
        let w = g.leaf(Tensor::zeros(&[3, 2]), true).unwrap();
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_leaf_rejected_in_debug() {
        if cfg!(debug_assertions) {
            let mut g = Graph::new();
            assert!(matches!(
                g.leaf(Tensor::row(&[f64::NAN]), true),
                Err(Error::Numeric(_))
            ));
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_rate_one_rejected() {
        let mut g = Graph::new();
        let mut r = rng();
        let x = g.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true).unwrap();
        assert_eq!(g.dropout(x, 0.0, true, &mut r).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut r).unwrap(), x);
        assert!(matches!(
            g.dropout(x, 1.0, true, &mut r),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::new();
        let mut r = rng();
        let x = g.constant(Tensor::full(&[1, 2000], 1.0)).unwrap();
        let y = g.dropout(x, 0.25, true, &mut r).unwrap();
        let vals = g.value(y).data();
        assert!(vals
            .iter()
            .all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
        let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / 2000.0;
        assert!((zeros - 0.25).abs() < 0.04, "dropped fraction {zeros}");
    }

    #[test]
    fn every_op_passes_gradcheck() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let c = Tensor::randn(&[3, 4], 1.0, &mut r);
        let row = Tensor::randn(&[1, 4], 1.0, &mut r);
        let col = Tensor::randn(&[3, 1], 1.0, &mut r);
        let pos = Tensor::rand_uniform(&[3, 4], 0.5, 2.0, &mut r);
        let w = Tensor::randn(&[3, 4], 1.0, &mut r);

        type F = fn(&mut Graph, &[Var]) -> Result<Var>;
        let cases: Vec<(&str, Vec<Tensor>, F)> = vec![
            ("matmul", vec![a.clone(), b.clone()], |g, v| {
                g.matmul(v[0], v[1])
            }),
            ("transpose", vec![a.clone()], |g, v| g.transpose(v[0])),
            ("add", vec![a.clone(), c.clone()], |g, v| g.add(v[0], v[1])),
            ("sub", vec![a.clone(), c.clone()], |g, v| g.sub(v[0], v[1])),
            ("mul", vec![a.clone(), c.clone()], |g, v| g.mul(v[0], v[1])),
            ("add_row", vec![a.clone(), row.clone()], |g, v| {
                g.add_row(v[0], v[1])
            }),
            ("mul_col", vec![a.clone(), col.clone()], |g, v| {
                g.mul_col(v[0], v[1])
            }),
            ("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7)),
            ("relu", vec![a.clone()], |g, v| g.relu(v[0])),
            ("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0])),
            ("tanh", vec![a.clone()], |g, v| g.tanh(v[0])),
            ("exp", vec![a.clone()], |g, v| g.exp(v[0])),
            ("log", vec![pos.clone()], |g, v| g.log(v[0])),
            ("abs", vec![a.clone()], |g, v| g.abs(v[0])),
            ("maximum", vec![a.clone(), c.clone()], |g, v| {
                g.maximum(v[0], v[1])
            }),
            ("minimum", vec![a.clone(), c.clone()], |g, v| {
                g.minimum(v[0], v[1])
            }),
            ("softmax_rows", vec![a.clone()], |g, v| g.softmax_rows(v[0])),
            ("log_softmax_rows", vec![a.clone()], |g, v| {
                g.log_softmax_rows(v[0])
            }),
            (
                "layer_norm",
                vec![a.clone(), row.clone(), row.clone()],
                |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
            ),
            ("slice_cols", vec![a.clone()], |g, v| {
                g.slice_cols(v[0], 1, 2)
            }),
            ("slice_rows", vec![a.clone()], |g, v| {
                g.slice_rows(v[0], 1, 2)
            }),
            ("concat_cols", vec![a.clone(), c.clone()], |g, v| {
                g.concat_cols(&[v[0], v[1], v[0]])
            }),
            ("concat_rows", vec![a.clone(), row.clone()], |g, v| {
                g.concat_rows(&[v[0], v[1]])
            }),
            ("gather_rows", vec![a.clone()], |g, v| {
                g.gather_rows(v[0], &[2, 0, 2])
            }),
            ("pick", vec![a.clone()], |g, v| {
                g.pick(v[0], &[(0, 1), (2, 3), (0, 1)])
            }),
            ("sum_rows", vec![a.clone()], |g, v| g.sum_rows(v[0])),
            ("sum_cols", vec![a.clone()], |g, v| g.sum_cols(v[0])),
            ("reshape", vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6])),
        ];
        for (name, inputs, f) in cases {
            // Weight the output so every entry gets a distinct upstream gradient.
            let report = check_gradients(&inputs, |g, vars| {
                let y = f(g, vars)?;
                let shape = g.value(y).shape().to_vec();
                let n: usize = shape.iter().product();
                let wt = Tensor::new(&shape, w.data().iter().cycle().take(n).cloned().collect())?;
                let wv = g.constant(wt)?;
                let p = g.mul(y, wv)?;
                g.sum(p)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut r = rng();
        let a = Tensor::randn(&[5, 5], 1.0, &mut r);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(a.clone(), true).unwrap();
            let y = g.matmul(x, x).unwrap();
            let s = g.softmax_rows(y).unwrap();
            let l = g.sum(s).unwrap();
            let t = g.tanh(l).unwrap();
            g.backward(t).unwrap().get(x).unwrap().to_vec()
        };
        let first = run();
        let second = run();
        assert!(first
            .iter()
            .zip(&second)
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
