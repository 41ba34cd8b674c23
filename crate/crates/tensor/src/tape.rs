use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::rng::dropout_mask;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Sine,
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Elu,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "identity" => Ok(Self::Identity),
            "relu" => Ok(Self::Relu),
            "sine" | "sin" => Ok(Self::Sine),
            "sigmoid" => Ok(Self::Sigmoid),
            "tanh" => Ok(Self::Tanh),
            "elu" => Ok(Self::Elu),
            other => Err(TensorError::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::Sine => x.sin(),
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => x.tanh(),
            Self::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Self::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Identity => 1.0,
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Sine => x.cos(),
            Self::Sigmoid => y * (1.0 - y),
            Self::Tanh => 1.0 - y * y,
            Self::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMode {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM {
        adj: Arc<CsrMatrix>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<[f64]>),
    ScaleRows(Var, Arc<[f64]>),
    Unary(Var, Activation),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    Scatter {
        x: Var,
        index: Arc<[usize]>,
        inv_count: Option<Vec<f64>>,
    },
    SegmentSoftmax {
        x: Var,
        segment: Arc<[usize]>,
        n_segments: usize,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    HeadDot {
        x: Var,
        a: Var,
        heads: usize,
    },
    HeadScale {
        x: Var,
        w: Var,
        heads: usize,
    },
    HeadRowDot {
        a: Var,
        b: Var,
        heads: usize,
    },
    HeadMatMul {
        x: Var,
        w: Var,
        heads: usize,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and the reverse sweep in [`Tape::backward`] is a valid
/// topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, left: &Tensor, right: &Tensor) -> TensorError {
    TensorError::Dimension {
        op,
        left: left.shape().to_vec(),
        right: right.shape().to_vec(),
    }
}

impl Tape {
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

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::from_vec(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient matches value shape"),
        )
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn matrix_dims(&self, v: Var) -> (usize, usize) {
        let t = self.val(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(dim_err("matmul", ta, tb));
        }
        let value = ta.matmul(tb)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Product of a fixed sparse operator with a recorded dense matrix.
    pub fn spmm(&mut self, adj: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let value = adj.matmul_dense(self.val(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SpMM {
                adj: Arc::clone(adj),
                x,
            },
            rg,
        ))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-`d` bias to every row of an n×d matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        let d = tx.cols();
        if tb.numel() != d {
            return Err(dim_err("add_bias", tx, tb));
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.val(x);
        let value = Tensor::from_vec(tx.shape().to_vec(), tx.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant array of the same size.
    pub fn mul_const(&mut self, x: Var, c: Arc<[f64]>) -> Result<Var> {
        let tx = self.val(x);
        if c.len() != tx.numel() {
            return Err(TensorError::Dimension {
                op: "mul_const",
                left: tx.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let data = tx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MulConst(x, c), rg))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: Arc<[f64]>) -> Result<Var> {
        let tx = self.val(x);
        if factors.len() != tx.rows() {
            return Err(TensorError::Dimension {
                op: "scale_rows",
                left: tx.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for (row, &f) in data.chunks_mut(d.max(1)).zip(factors.iter()) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ScaleRows(x, factors), rg))
    }

    pub fn unary(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        let tx = self.val(x);
        let value = Tensor::from_vec(tx.shape().to_vec(), tx.data().iter().map(|&v| act.apply(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Unary(x, act), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Activation::Relu)
    }

    /// Inverted dropout. Evaluation mode (and `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mask: Arc<[f64]> = dropout_mask(self.val(x).numel(), p, seed).into();
        self.mul_const(x, mask)
    }

    /// Row gather: output row `e` is input row `index[e]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.val(x);
        let (n, d) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(&tx.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec(vec![index.len(), d], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.into(),
            },
            rg,
        ))
    }

    /// Sums (or averages) message rows into `n` target rows.
    pub fn scatter_aggregate(&mut self, messages: Var, target: &[usize], n: usize, mode: AggregateMode) -> Result<Var> {
        let tm = self.val(messages);
        let (e, d) = (tm.rows(), tm.cols());
        if target.len() != e {
            return Err(TensorError::Dimension {
                op: "scatter_aggregate",
                left: tm.shape().to_vec(),
                right: vec![target.len()],
            });
        }
        let mut out = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (row, &t) in target.iter().enumerate() {
            if t >= n {
                return Err(TensorError::Index {
                    op: "scatter_aggregate",
                    index: t,
                    len: n,
                });
            }
            counts[t] += 1;
            let src = &tm.data()[row * d..(row + 1) * d];
            let dst = &mut out[t * d..(t + 1) * d];
            match mode {
                AggregateMode::Sum => dst.iter_mut().zip(src).for_each(|(o, s)| *o += s),
                // Running mean: identical inputs reproduce themselves exactly.
                AggregateMode::Mean => {
                    let k = counts[t] as f64;
                    dst.iter_mut().zip(src).for_each(|(o, s)| *o += (s - *o) / k);
                }
            }
        }
        let inv_count = match mode {
            AggregateMode::Sum => None,
            AggregateMode::Mean => Some(
                counts
                    .iter()
                    .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
                    .collect::<Vec<f64>>(),
            ),
        };
        let value = Tensor::from_vec(vec![n, d], out)?;
        let rg = self.rg(&[messages]);
        Ok(self.push(
            value,
            Op::Scatter {
                x: messages,
                index: target.into(),
                inv_count,
            },
            rg,
        ))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// Used for attention over the incoming edges of each target node.
    pub fn segment_softmax(&mut self, x: Var, segment: &[usize], n_segments: usize) -> Result<Var> {
        let tx = self.val(x);
        let (e, h) = (tx.rows(), tx.cols());
        if segment.len() != e {
            return Err(TensorError::Dimension {
                op: "segment_softmax",
                left: tx.shape().to_vec(),
                right: vec![segment.len()],
            });
        }
        let mut max = vec![f64::NEG_INFINITY; n_segments * h];
        for (row, &s) in segment.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::Index {
                    op: "segment_softmax",
                    index: s,
                    len: n_segments,
                });
            }
            for k in 0..h {
                let v = tx.data()[row * h + k];
                if v > max[s * h + k] {
                    max[s * h + k] = v;
                }
            }
        }
        let mut out = vec![0.0; e * h];
        let mut denom = vec![0.0; n_segments * h];
        for (row, &s) in segment.iter().enumerate() {
            for k in 0..h {
                let ex = (tx.data()[row * h + k] - max[s * h + k]).exp();
                out[row * h + k] = ex;
                denom[s * h + k] += ex;
            }
        }
        for (row, &s) in segment.iter().enumerate() {
            for k in 0..h {
                out[row * h + k] /= denom[s * h + k];
            }
        }
        let value = Tensor::from_vec(vec![e, h], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                x,
                segment: segment.into(),
                n_segments,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let c = tx.cols().max(1);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-row standardization (biased variance) followed by gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.val(x);
        let (n, d) = (tx.rows(), tx.cols());
        if self.val(gain).numel() != d {
            return Err(dim_err("layer_norm", tx, self.val(gain)));
        }
        if self.val(bias).numel() != d {
            return Err(dim_err("layer_norm", tx, self.val(bias)));
        }
        let (g, b) = (self.val(gain).data(), self.val(bias).data());
        let mut normalized = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                normalized[i * d + j] = xh;
                out[i * d + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols needs at least one input".into()))?;
        let n = self.val(*first).rows();
        for &p in parts {
            if self.val(p).rows() != n {
                return Err(dim_err("concat_cols", self.val(*first), self.val(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.val(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![n, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let (n, d) = (tx.rows(), tx.cols());
        if start > end || end > d {
            return Err(TensorError::Dimension {
                op: "slice_cols",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&tx.data()[i * d + start..i * d + end]);
        }
        let value = Tensor::from_vec(vec![n, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows needs at least one input".into()))?;
        let d = self.val(*first).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            if self.val(p).cols() != d {
                return Err(dim_err("concat_rows", self.val(*first), self.val(p)));
            }
            n += self.val(p).rows();
            data.extend_from_slice(self.val(p).data());
        }
        let value = Tensor::from_vec(vec![n, d], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let (n, d) = (tx.rows(), tx.cols());
        if start > end || end > n {
            return Err(TensorError::Dimension {
                op: "slice_rows",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let value = Tensor::from_vec(vec![end - start, d], tx.data()[start * d..end * d].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    fn head_dims(&self, x: Var, heads: usize, op: &'static str) -> Result<(usize, usize)> {
        let tx = self.val(x);
        if heads == 0 || tx.cols() % heads != 0 {
            return Err(TensorError::Dimension {
                op,
                left: tx.shape().to_vec(),
                right: vec![heads],
            });
        }
        Ok((tx.rows(), tx.cols() / heads))
    }

    /// Per-head dot product of each row with a per-head vector:
    /// `x: n×(H·dh)`, `a: H×dh` → `n×H`.
    pub fn head_dot(&mut self, x: Var, a: Var) -> Result<Var> {
        let heads = self.val(a).rows();
        let (n, dh) = self.head_dims(x, heads, "head_dot")?;
        if self.val(a).numel() != heads * dh {
            return Err(dim_err("head_dot", self.val(x), self.val(a)));
        }
        let (tx, ta) = (self.val(x).data(), self.val(a).data());
        let mut out = vec![0.0; n * heads];
        for i in 0..n {
            for h in 0..heads {
                let xs = &tx[i * heads * dh + h * dh..i * heads * dh + (h + 1) * dh];
                let av = &ta[h * dh..(h + 1) * dh];
                out[i * heads + h] = xs.iter().zip(av).map(|(p, q)| p * q).sum();
            }
        }
        let value = Tensor::from_vec(vec![n, heads], out)?;
        let rg = self.rg(&[x, a]);
        Ok(self.push(value, Op::HeadDot { x, a, heads }, rg))
    }

    /// Scales each head block of each row: `x: e×(H·dh)`, `w: e×H`.
    pub fn head_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let heads = self.val(w).cols();
        let (e, dh) = self.head_dims(x, heads, "head_scale")?;
        if self.val(w).rows() != e {
            return Err(dim_err("head_scale", self.val(x), self.val(w)));
        }
        let (tx, tw) = (self.val(x).data(), self.val(w).data());
        let mut out = vec![0.0; e * heads * dh];
        for r in 0..e {
            for h in 0..heads {
                let f = tw[r * heads + h];
                let base = r * heads * dh + h * dh;
                for k in 0..dh {
                    out[base + k] = tx[base + k] * f;
                }
            }
        }
        let value = Tensor::from_vec(self.val(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::HeadScale { x, w, heads }, rg))
    }

    /// Per-head dot product of matching rows of two `e×(H·dh)` matrices → `e×H`.
    pub fn head_row_dot(&mut self, a: Var, b: Var, heads: usize) -> Result<Var> {
        let (e, dh) = self.head_dims(a, heads, "head_row_dot")?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(dim_err("head_row_dot", self.val(a), self.val(b)));
        }
        let (ta, tb) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; e * heads];
        for r in 0..e {
            for h in 0..heads {
                let base = r * heads * dh + h * dh;
                out[r * heads + h] = (0..dh).map(|k| ta[base + k] * tb[base + k]).sum();
            }
        }
        let value = Tensor::from_vec(vec![e, heads], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::HeadRowDot { a, b, heads }, rg))
    }

    /// Block-diagonal product: each head block of `x: e×(H·dh)` is multiplied
    /// by its own `dh×dh` matrix from `w: [H, dh, dh]`.
    pub fn head_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.val(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != ws[2] {
            return Err(dim_err("head_matmul", self.val(x), self.val(w)));
        }
        let heads = ws[0];
        let (e, dh) = self.head_dims(x, heads, "head_matmul")?;
        if dh != ws[1] {
            return Err(dim_err("head_matmul", self.val(x), self.val(w)));
        }
        let (tx, tw) = (self.val(x).data(), self.val(w).data());
        let mut out = vec![0.0; e * heads * dh];
        for (x_row, o_row) in tx.chunks_exact(heads * dh).zip(out.chunks_exact_mut(heads * dh)).take(e) {
            for ((xh, oh), wh) in x_row.chunks_exact(dh).zip(o_row.chunks_exact_mut(dh)).zip(tw.chunks_exact(dh * dh)) {
                for (&xv, w_row) in xh.iter().zip(wh.chunks_exact(dh)) {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &wv) in oh.iter_mut().zip(w_row) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(self.val(x).shape().to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::HeadMatMul { x, w, heads }, rg))
    }

    /// Scales each row to unit Euclidean norm (rows with norm below 1e-12
    /// are divided by 1e-12 instead).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let d = tx.cols().max(1);
        let mut data = tx.data().to_vec();
        let mut norms = Vec::with_capacity(tx.rows());
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.val(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean softmax cross-entropy over the listed `(row, class)` pairs.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let tl = self.val(logits);
        let (n, c) = (tl.rows(), tl.cols());
        if targets.is_empty() {
            return Err(TensorError::Contract("cross_entropy over an empty target set".into()));
        }
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut total = 0.0;
        for &(row, class) in targets {
            if row >= n {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: row,
                    len: n,
                });
            }
            if class >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: class,
                    len: c,
                });
            }
            let r = &tl.data()[row * c..(row + 1) * c];
            let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - r[class];
            probs.extend(r.iter().map(|v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. Every tensor that requires a
    /// gradient receives one (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.matrix_dims(*a);
                let n = self.val(*b).cols();
                if self.requires_grad(*a) {
                    let ga = kernels::matmul_bt(g, self.val(*b).data(), m, n, k);
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb = kernels::matmul_at(self.val(*a).data(), g, m, k, n);
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::SpMM { adj, x } => {
                if self.requires_grad(*x) {
                    let d = out.cols();
                    let mut gx = vec![0.0; self.val(*x).numel()];
                    for r in 0..adj.n_rows() {
                        let gr = &g[r * d..(r + 1) * d];
                        for (c, v) in adj.row(r) {
                            for (o, &gv) in gx[c * d..(c + 1) * d].iter_mut().zip(gr) {
                                *o += v * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.val(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, &ga);
                }
                if self.requires_grad(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, &gb);
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g);
                if self.requires_grad(*bias) {
                    let d = out.cols().max(1);
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(grads, *bias, &gb);
                }
            }
            Op::Scale(x, s) => {
                let gx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.accumulate(grads, *x, &gx);
            }
            Op::MulConst(x, c) => {
                let gx: Vec<f64> = g.iter().zip(c.iter()).map(|(a, b)| a * b).collect();
                self.accumulate(grads, *x, &gx);
            }
            Op::ScaleRows(x, f) => {
                let d = out.cols().max(1);
                let mut gx = g.to_vec();
                for (row, &fv) in gx.chunks_mut(d).zip(f.iter()) {
                    row.iter_mut().for_each(|v| *v *= fv);
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::Unary(x, act) => {
                let xin = self.val(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xin)
                    .zip(out.data())
                    .map(|((gv, &xv), &yv)| gv * act.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, &gx);
            }
            Op::Gather { x, index } => {
                if self.requires_grad(*x) {
                    let d = out.cols();
                    let mut gx = vec![0.0; self.val(*x).numel()];
                    for (row, &i) in index.iter().enumerate() {
                        for (o, &gv) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *o += gv;
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::Scatter { x, index, inv_count } => {
                if self.requires_grad(*x) {
                    let d = out.cols();
                    let mut gx = vec![0.0; self.val(*x).numel()];
                    for (row, &t) in index.iter().enumerate() {
                        let f = inv_count.as_ref().map_or(1.0, |c| c[t]);
                        for (o, &gv) in gx[row * d..(row + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                            *o = gv * f;
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::SegmentSoftmax { x, segment, n_segments } => {
                let h = out.cols();
                let y = out.data();
                let mut dot = vec![0.0; n_segments * h];
                for (row, &s) in segment.iter().enumerate() {
                    for k in 0..h {
                        dot[s * h + k] += y[row * h + k] * g[row * h + k];
                    }
                }
                let mut gx = vec![0.0; y.len()];
                for (row, &s) in segment.iter().enumerate() {
                    for k in 0..h {
                        let i = row * h + k;
                        gx[i] = y[i] * (g[i] - dot[s * h + k]);
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols().max(1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = out.cols().max(1);
                let gn = self.val(*gain).data();
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gain, &gg);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; d];
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(grads, *bias, &gb);
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let df = d as f64;
                    for (i, ((gr, xr), or)) in g
                        .chunks(d)
                        .zip(normalized.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dxh: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxh.iter().sum();
                        let sum_x: f64 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            or[j] = inv_std[i] / df * (df * dxh[j] - sum - xr[j] * sum_x);
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for i in 0..n {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, d) = self.matrix_dims(*x);
                let w = out.cols();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    gx[i * d + start..i * d + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    self.accumulate(grads, p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let (n, d) = self.matrix_dims(*x);
                let mut gx = vec![0.0; n * d];
                gx[start * d..start * d + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, &gx);
            }
            Op::HeadDot { x, a, heads } => {
                let (n, hd) = self.matrix_dims(*x);
                let dh = hd / heads;
                let (tx, ta) = (self.val(*x).data(), self.val(*a).data());
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; n * hd];
                    for i in 0..n {
                        for h in 0..*heads {
                            let gv = g[i * heads + h];
                            for k in 0..dh {
                                gx[i * hd + h * dh + k] = gv * ta[h * dh + k];
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; heads * dh];
                    for i in 0..n {
                        for h in 0..*heads {
                            let gv = g[i * heads + h];
                            for k in 0..dh {
                                ga[h * dh + k] += gv * tx[i * hd + h * dh + k];
                            }
                        }
                    }
                    self.accumulate(grads, *a, &ga);
                }
            }
            Op::HeadScale { x, w, heads } => {
                let (e, hd) = self.matrix_dims(*x);
                let dh = hd / heads;
                let (tx, tw) = (self.val(*x).data(), self.val(*w).data());
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; e * hd];
                    for r in 0..e {
                        for h in 0..*heads {
                            let f = tw[r * heads + h];
                            let base = r * hd + h * dh;
                            for k in 0..dh {
                                gx[base + k] = g[base + k] * f;
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; e * heads];
                    for r in 0..e {
                        for h in 0..*heads {
                            let base = r * hd + h * dh;
                            gw[r * heads + h] = (0..dh).map(|k| g[base + k] * tx[base + k]).sum();
                        }
                    }
                    self.accumulate(grads, *w, &gw);
                }
            }
            Op::HeadRowDot { a, b, heads } => {
                let (e, hd) = self.matrix_dims(*a);
                let dh = hd / heads;
                let (ta, tb) = (self.val(*a).data(), self.val(*b).data());
                let expand = |other: &[f64]| {
                    let mut out = vec![0.0; e * hd];
                    for r in 0..e {
                        for h in 0..*heads {
                            let gv = g[r * heads + h];
                            let base = r * hd + h * dh;
                            for k in 0..dh {
                                out[base + k] = gv * other[base + k];
                            }
                        }
                    }
                    out
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, &expand(tb));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, &expand(ta));
                }
            }
            Op::HeadMatMul { x, w, heads } => {
                let (e, hd) = self.matrix_dims(*x);
                let dh = hd / heads;
                let (tx, tw) = (self.val(*x).data(), self.val(*w).data());
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; e * hd];
                    for r in 0..e {
                        for h in 0..*heads {
                            let base = r * hd + h * dh;
                            let wh = &tw[h * dh * dh..(h + 1) * dh * dh];
                            for k in 0..dh {
                                gx[base + k] = (0..dh).map(|j| g[base + j] * wh[k * dh + j]).sum();
                            }
                        }
                    }
                    self.accumulate(grads, *x, &gx);
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; heads * dh * dh];
                    for r in 0..e {
                        for h in 0..*heads {
                            let base = r * hd + h * dh;
                            for k in 0..dh {
                                let xv = tx[base + k];
                                if xv == 0.0 {
                                    continue;
                                }
                                for j in 0..dh {
                                    gw[h * dh * dh + k * dh + j] += xv * g[base + j];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *w, &gw);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let d = out.cols().max(1);
                let mut gx = vec![0.0; g.len()];
                for (i, ((gr, yr), or)) in g.chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let norm = norms[i];
                    if norm <= L2_EPS {
                        or.iter_mut().zip(gr).for_each(|(o, v)| *o = v / L2_EPS);
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        or[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accumulate(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.val(*x).numel()];
                self.accumulate(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = self.val(*x).numel();
                let gx = vec![g[0] / n.max(1) as f64; n];
                self.accumulate(grads, *x, &gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.val(*logits).cols();
                let mut gx = vec![0.0; self.val(*logits).numel()];
                let f = g[0] / targets.len() as f64;
                for (t, &(row, class)) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == class { 1.0 } else { 0.0 };
                        gx[row * c + j] += f * (probs[t * c + j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, &gx);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

const L2_EPS: f64 = 1e-12;

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
