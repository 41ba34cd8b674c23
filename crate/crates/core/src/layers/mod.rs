//! Neural layers built on the tape: a named parameter store, graph
//! convolutions, an LSTM and the prediction head.

mod conv;
mod lstm;

use dyhgn_tensor::{stream_seed, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use conv::{gcn_conv, Attention, GatConv, GcnConv, HgtConv, Residual, SimpleHgnConv};
pub use lstm::Lstm;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("parameter `{name}` registered twice")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Glorot-uniform matrix of shape `fan_in × fan_out`.
    pub fn glorot(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        self.glorot_shaped(name, vec![fan_in, fan_out], fan_in, fan_out, rng)
    }

    pub fn glorot_shaped(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.uniform(name, shape, limit, rng)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, limit: f64, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init: {e}")))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::full(&shape, 1.0))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces every value, checking names and shapes.
    pub fn load(&mut self, names: &[String], values: Vec<Tensor>) -> Result<()> {
        if names != self.names.as_slice() {
            return Err(Error::ParamTable("parameter names do not match the model".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if v.shape() != self.values[i].shape() {
                return Err(Error::ParamTable(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    names[i],
                    v.shape(),
                    self.values[i].shape()
                )));
            }
        }
        self.values = values;
        Ok(())
    }

    /// Records every parameter on the tape as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone(), true)).collect())
    }

    /// Records every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.values.iter().map(|v| tape.constant(v.clone())).collect())
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables that were recorded in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradients for every parameter, in store order.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.0.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Training/evaluation switch plus the dropout seed stream.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: f64,
    seed: u64,
    counter: u64,
}

impl ForwardCtx {
    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            training: true,
            dropout,
            seed,
            counter: 0,
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: 0.0,
            seed: 0,
            counter: 0,
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        let seed = stream_seed(self.seed, self.counter);
        self.counter += 1;
        Ok(tape.dropout(x, self.dropout, true, seed)?)
    }
}

/// Dense layer `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = store.glorot(format!("{name}.w"), d_in, d_out, rng)?;
        let b = if bias {
            Some(store.zeros(format!("{name}.b"), vec![d_out])?)
        } else {
            None
        };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.forward_blocks(tape, p, &[x])
    }

    /// Same map applied to an input given as column blocks.
    pub fn forward_blocks(&self, tape: &mut Tape, p: &Bound, parts: &[Var]) -> Result<Var> {
        let y = block_matmul(tape, parts, p.get(self.w))?;
        Ok(match self.b {
            Some(b) => tape.add_bias(y, p.get(b))?,
            None => y,
        })
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.ones(format!("{name}.gain"), vec![d])?,
            bias: store.zeros(format!("{name}.bias"), vec![d])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.get(self.gain), p.get(self.bias), LAYER_NORM_EPS)?)
    }
}

/// `FC → LayerNorm → ReLU → Dropout → FC`.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

impl MlpHead {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_hid: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_hid, true, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_hid)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_hid, classes, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = self.norm.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h)?;
        self.fc2.forward(tape, p, h)
    }
}

/// `[x₁ ‖ x₂ ‖ …] · W` computed block by block against row slices of `W`,
/// so blocks that need no gradient cost nothing in the backward pass.
pub fn block_matmul(tape: &mut Tape, parts: &[Var], w: Var) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| contract("block_matmul needs at least one block"))?;
    if rest.is_empty() {
        return Ok(tape.matmul(first, w)?);
    }
    let total: usize = parts.iter().map(|&x| tape.value(x).cols()).sum();
    if total != tape.value(w).rows() {
        return Err(contract(format!(
            "blocks of total width {total} against a weight with {} rows",
            tape.value(w).rows()
        )));
    }
    let mut acc: Option<Var> = None;
    let mut offset = 0;
    for &x in parts {
        let width = tape.value(x).cols();
        let w_block = tape.slice_rows(w, offset, offset + width)?;
        let y = tape.matmul(x, w_block)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, y)?,
            None => y,
        });
        offset += width;
    }
    Ok(acc.expect("at least one block"))
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Tensor(TensorError::Contract(msg.into()))
}
