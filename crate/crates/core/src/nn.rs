//! Layers built on the autodiff graph. Layers own [`ParamId`]s into a shared
//! [`ParamStore`]; a [`Ctx`] binds them to graph leaves for one forward pass.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

/// One forward (and optionally backward) pass over a model.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, Var>,
    mode: Mode,
    updates: Vec<StatsUpdate>,
    trace: Option<Vec<(String, Tensor)>>,
}

impl Deref for Ctx<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Ctx<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            mode,
            updates: Vec::new(),
            trace: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Keeps copies of every value passed to [`Ctx::record`].
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn record(&mut self, name: impl Into<String>, v: Var) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push((name.into(), self.graph.value(v).clone()));
        }
    }

    pub fn take_trace(&mut self) -> Vec<(String, Tensor)> {
        self.trace.take().unwrap_or_default()
    }

    /// Graph leaf for a parameter; frozen parameters are bound without grad.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), !p.frozen);
        self.bound.insert(id, v);
        v
    }

    pub fn buffer(&self, id: BufferId) -> &'a Tensor {
        self.store.buffer(id)
    }

    pub fn push_stats(&mut self, update: StatsUpdate) {
        self.updates.push(update);
    }

    pub fn take_stats(&mut self) -> Vec<StatsUpdate> {
        std::mem::take(&mut self.updates)
    }

    /// Backpropagates `loss` and returns the gradient of every bound trainable
    /// parameter that the loss reached, ordered by parameter id.
    pub fn backward(&mut self, loss: Var) -> Result<Vec<(ParamId, Tensor)>> {
        self.graph.backward(loss)?;
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.graph.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

/// Applies gradients returned by [`Ctx::backward`].
pub fn accumulate(store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
    for (id, g) in grads {
        store.accumulate_grad(*id, g.data());
    }
}

/// Folds train-mode batch statistics into the running buffers.
pub fn apply_stats(store: &mut ParamStore, updates: &[StatsUpdate]) {
    for u in updates {
        let n = u.stats.count as f64;
        let unbias = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        let mean = store.buffer_mut(u.mean).data_mut();
        for (m, s) in mean.iter_mut().zip(&u.stats.mean) {
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * s;
        }
        let var = store.buffer_mut(u.var).data_mut();
        for (v, s) in var.iter_mut().zip(&u.stats.var) {
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * s * unbias;
        }
    }
}

pub fn uniform_tensor(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-bound, bound))
}

/// `x·W + b` on the last axis. `W` is stored as `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::build(store, rng, name, fan_in, fan_out, true, false)
    }

    pub fn build(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        frozen: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            &format!("{name}.w"),
            uniform_tensor(rng, &[fan_in, fan_out], bound),
            frozen,
        )?;
        let bias = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out]), frozen)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    /// Rank-2 inputs are multiplied row by row, keeping each row's result
    /// independent of the rest of the batch.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let shape = ctx.shape(x).to_vec();
        let y = if shape.len() == 2 {
            let rows = ctx.reshape(x, &[shape[0], 1, shape[1]])?;
            let y = ctx.matmul(rows, w)?;
            ctx.reshape(y, &[shape[0], self.fan_out])?
        } else {
            ctx.matmul(x, w)?
        };
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), false)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), false)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        ctx.layer_norm(x, g, b, NORM_EPS)
    }
}

/// Batch norm over every axis but the last, with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[dim]), false)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), false)?,
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[dim]))?,
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[dim]))?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.param(self.gamma), ctx.param(self.beta));
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.batch_norm_train(x, g, b, NORM_EPS)?;
                ctx.push_stats(StatsUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.buffer(self.running_mean).data();
                let var = ctx.buffer(self.running_var).data();
                ctx.graph.batch_norm_eval(x, g, b, mean, var, NORM_EPS)
            }
        }
    }
}

/// `linear → gelu → linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Splits `(B, N, H·dh)` into `(B, H, N, dh)`.
fn split_heads(ctx: &mut Ctx, x: Var, heads: usize) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = ctx.reshape(x, &[b, n, heads, d / heads])?;
    ctx.permute(x, &[0, 2, 1, 3])
}

fn merge_heads(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let (b, h, n, dh) = (s[0], s[1], s[2], s[3]);
    let x = ctx.permute(x, &[0, 2, 1, 3])?;
    ctx.reshape(x, &[b, n, h * dh])
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(
                format!("{name}.heads"),
                format!("{heads} heads do not divide width {dim}"),
            ));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            k: Linear::build(store, rng, &format!("{name}.k"), dim, dim, false, false)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    /// Self-attention over `x: (B, N, D)`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let d = ctx.shape(x)[2];
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let q = split_heads(ctx, q, self.heads)?;
        let k = split_heads(ctx, k, self.heads)?;
        let v = split_heads(ctx, v, self.heads)?;
        let kt = ctx.transpose(k)?;
        let s = ctx.matmul(q, kt)?;
        let s = ctx.scale(s, 1.0 / ((d / self.heads) as f64).sqrt());
        let a = ctx.softmax(s, -1)?;
        let o = ctx.matmul(a, v)?;
        let o = merge_heads(ctx, o)?;
        self.out.forward(ctx, o)
    }
}

/// Pre-norm encoder block.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, 4 * dim)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.ln1.forward(ctx, x)?;
        let h = self.attn.forward(ctx, h)?;
        let x = ctx.add(x, h)?;
        let h = self.ln2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.add(x, h)
    }
}

/// Stack of pre-norm blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        depth: usize,
        heads: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.layer{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder {
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        self.norm.forward(ctx, x)
    }
}

/// Prepends a learned `(1, D)` token to every sequence of `x: (B, N, D)`.
pub fn prepend_token(ctx: &mut Ctx, token: ParamId, x: Var) -> Result<Var> {
    let s = ctx.shape(x).to_vec();
    let t = ctx.param(token);
    let t = ctx.reshape(t, &[1, 1, s[2]])?;
    let t = ctx.broadcast_to(t, &[s[0], 1, s[2]])?;
    ctx.concat(&[t, x], 1)
}
