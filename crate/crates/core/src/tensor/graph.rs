use std::cell::Cell;

use super::broadcast::{broadcast_shape, Pairing};
use super::kernel::gemm;
use super::{numel, strides, Tensor};
use crate::error::{Error, Result};
use crate::rng::mix64;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// `max(x, 0)²`, derivative 0 at the origin.
    ReluSquared,
    Sigmoid,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Act(Activation),
    Exp,
    Ln,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Offset {
        x: Var,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    SumAll {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    /// Max or min along an axis; `arg` is the chosen position per output element.
    Extreme {
        x: Var,
        axis: usize,
        arg: Vec<usize>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        train: bool,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    PairwiseDistance {
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Per-channel batch statistics (biased variance) from a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Reverse-mode computation graph. Nodes are appended in evaluation order, so
/// the node list is already topologically sorted.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) leaf_grads: Vec<Option<Vec<f64>>>,
    kinks: Option<u64>,
}

thread_local! {
    static ACTIVATION_FAULT: Cell<Option<Activation>> = const { Cell::new(None) };
}

/// Test hook: doubles the backward rule of one activation on this thread.
#[doc(hidden)]
pub fn inject_activation_fault(kind: Option<Activation>) {
    ACTIVATION_FAULT.with(|f| f.set(kind));
}

pub(crate) fn activation_fault() -> Option<Activation> {
    ACTIVATION_FAULT.with(|f| f.get())
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean norm with a fixed left-to-right summation order.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
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

    /// Records a hash of every kink-side decision (ReLU signs, argmax choices,
    /// zero distances) so finite differences can detect crossing a kink.
    pub fn track_kinks(&mut self) {
        self.kinks = Some(0);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    fn note_kink(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(sig) = self.kinks.as_mut() {
            for b in bits {
                *sig = mix64(*sig ^ b);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if it requires grad and `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.leaf_grads[v.0].as_ref()?;
        Some(Tensor::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn axis(&self, v: Var, axis: isize) -> Result<usize> {
        let rank = self.shape(v).len();
        let resolved = if axis < 0 { axis + rank as isize } else { axis };
        if resolved < 0 || resolved as usize >= rank {
            return Err(Error::InvalidAxis {
                axis: axis.unsigned_abs(),
                rank,
            });
        }
        Ok(resolved as usize)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::shape("broadcast", sa, sb))?;
        let pairing = Pairing::new(sa, sb, &out_shape);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; numel(&out_shape)];
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        pairing.visit(|o, ia, ib| out[o] = f(da[ia], db[ib]));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Offset { x }, rg)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Unary::Act(Activation::Relu) => |v| v.max(0.0),
            Unary::Act(Activation::ReluSquared) => |v| {
                let r = v.max(0.0);
                r * r
            },
            Unary::Act(Activation::Sigmoid) => sigmoid,
            Unary::Act(Activation::Tanh) => f64::tanh,
            Unary::Act(Activation::Gelu) => gelu,
            Unary::Exp => f64::exp,
            Unary::Ln => f64::ln,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |v| v * v,
        };
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        if self.kinks.is_some()
            && matches!(
                kind,
                Unary::Act(Activation::Relu) | Unary::Act(Activation::ReluSquared)
            )
        {
            let bits: Vec<u64> = self.value(x).data().iter().map(|&v| (v > 0.0) as u64).collect();
            self.note_kink(bits.into_iter());
        }
        let rg = self.rg(x);
        self.push(out, Op::Unary { kind, x }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.unary(Unary::Act(kind), x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn relu_squared(&mut self, x: Var) -> Var {
        self.activation(x, Activation::ReluSquared)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Batched matrix product `(.., m, k) · (.., k, n)`. Batch axes must match,
    /// or one operand must be a plain matrix that is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..plan.batch {
            let ao = plan.a_off(i);
            let bo = plan.b_off(i);
            gemm(
                plan.m,
                plan.k,
                plan.n,
                (&da[ao..ao + plan.m * plan.k], plan.k as isize, 1),
                (&db[bo..bo + plan.k * plan.n], plan.n as isize, 1),
                &mut out[i * plan.m * plan.n..(i + 1) * plan.m * plan.n],
                0.0,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&plan.out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, rg)
    }

    pub fn sum_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let axis = self.axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        let resolved = self.axis(x, axis)?;
        let n = self.shape(x)[resolved] as f64;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / n))
    }

    fn extreme(&mut self, x: Var, axis: isize, keepdim: bool, max: bool) -> Result<Var> {
        let axis = self.axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = d[o * len * inner + i];
                let mut best_j = 0;
                for j in 1..len {
                    let v = d[(o * len + j) * inner + i];
                    if (max && v > best) || (!max && v < best) {
                        best = v;
                        best_j = j;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        self.note_kink(arg.iter().map(|&a| a as u64));
        let out_shape = reduced_shape(&shape, axis, keepdim);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Extreme { x, axis, arg }, rg))
    }

    /// Maximum along `axis`; ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.extreme(x, axis, keepdim, true)
    }

    pub fn min_axis(&mut self, x: Var, axis: isize, keepdim: bool) -> Result<Var> {
        self.extreme(x, axis, keepdim, false)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let axis = self.axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = axis_map(self.value(x).data(), &shape, axis, |lane, out| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = (v - m).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        });
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let axis = self.axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let out = axis_map(self.value(x).data(), &shape, axis, |lane, out| {
            let m = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = v - lse;
            }
        });
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::LogSoftmax { x, axis }, rg))
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::shape("cross_entropy label", &[bad], &[classes]));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; d.len()];
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &d[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (p, &v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            loss += m + z.ln() - row[y];
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- shape manipulation ------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", t.shape(), shape));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        permute_visit(&shape, perm, |o, i| out[o] = src[i]);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", &[], &[]))?;
        let axis = self.axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let axis = self.axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[start, len]));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        match broadcast_shape(&sx, shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("broadcast_to", &sx, shape)),
        }
        let pairing = Pairing::new(&sx, shape, shape);
        let src = self.value(x).data();
        let mut out = vec![0.0; numel(shape)];
        pairing.visit(|o, ia, _| out[o] = src[ia]);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::BroadcastTo { x }, rg))
    }

    // ---- normalisation -----------------------------------------------------

    /// Layer norm over the last axis with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        self.check_affine("layer_norm", gamma, beta, d)?;
        let rows = numel(&shape) / d;
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let lane = &src[r * d..(r + 1) * d];
            let mean = lane.iter().sum::<f64>() / d as f64;
            let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (lane[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    fn check_affine(&self, op: &'static str, gamma: Var, beta: Var, d: usize) -> Result<()> {
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(Error::shape(op, &[d], self.shape(v)));
            }
        }
        Ok(())
    }

    /// Train-mode batch norm: channels on the last axis, statistics over all
    /// other axes.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        let rows = numel(&shape) / c;
        let src = self.value(x).data();
        let mut mean = vec![0.0; c];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for j in 0..c {
                let dv = src[r * c + j] - mean[j];
                var[j] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let v = self.batch_norm_apply(x, gamma, beta, &mean, rstd, true)?;
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: rows,
            },
        ))
    }

    /// Eval-mode batch norm: a fixed affine map from running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let c = *self.shape(x).last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        self.check_affine("batch_norm", gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batch_norm stats", &[c], &[running_mean.len()]));
        }
        let rstd = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, running_mean, rstd, false)
    }

    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        rstd: Vec<f64>,
        train: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = mean.len();
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, &v) in src.iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * rstd[j];
            xhat[i] = h;
            out[i] = h * g[j] + b[j];
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            rg,
        ))
    }

    /// Scales every last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let lane = &src[r * d..(r + 1) * d];
            let n = l2_norm(lane);
            if !(n >= 1e-12) {
                return Err(Error::DegenerateNorm { norm: n });
            }
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(lane) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::L2Normalize { x, norms }, rg))
    }

    // ---- distances ---------------------------------------------------------

    /// Euclidean distances between the rows of `a (.., n, d)` and `b (.., m, d)`,
    /// via `‖a‖² + ‖b‖² − 2a·b` clamped at zero before the square root.
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 1] {
            return Err(Error::shape("pairwise_distance", &sa, &sb));
        }
        let (n, m, d) = (sa[r - 2], sb[r - 2], sa[r - 1]);
        let batch = numel(&sa[..r - 2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * n * m];
        let mut zeros = Vec::new();
        for bi in 0..batch {
            let ab = &da[bi * n * d..(bi + 1) * n * d];
            let bb = &db[bi * m * d..(bi + 1) * m * d];
            let sq_b: Vec<f64> = (0..m).map(|c| bb[c * d..(c + 1) * d].iter().map(|v| v * v).sum()).collect();
            for i in 0..n {
                let ar = &ab[i * d..(i + 1) * d];
                let sq_a: f64 = ar.iter().map(|v| v * v).sum();
                for c in 0..m {
                    let dot: f64 = ar.iter().zip(&bb[c * d..(c + 1) * d]).map(|(x, y)| x * y).sum();
                    let d2 = (sq_a + sq_b[c] - 2.0 * dot).max(0.0);
                    let dist = d2.sqrt();
                    if dist == 0.0 {
                        zeros.push((bi * n * m + i * m + c) as u64);
                    }
                    out[bi * n * m + i * m + c] = dist;
                }
            }
        }
        self.note_kink(zeros.into_iter());
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([n, m]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::PairwiseDistance { a, b }, rg))
    }
}

pub(crate) fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

/// Applies `f(lane, out_lane)` to every 1-D lane along `axis`.
fn axis_map(src: &[f64], shape: &[usize], axis: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Vec<f64> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![0.0; src.len()];
    if inner == 1 {
        for (lane, o) in src.chunks(len).zip(out.chunks_mut(len)) {
            f(lane, o);
        }
        return out;
    }
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                lane[j] = src[(o * len + j) * inner + i];
            }
            f(&lane, &mut res);
            for j in 0..len {
                out[(o * len + j) * inner + i] = res[j];
            }
        }
    }
    out
}

/// Lane-wise helper shared with backward: iterates (lane start, stride) pairs.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let (outer, len, inner) = split_axis(shape, axis);
    (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * len * inner + i, inner, len)))
}

/// Calls `f(out_flat, in_flat)` for a permutation of `shape` by `perm`.
pub(crate) fn permute_visit(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let total = numel(shape);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub(crate) fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", sa, sb);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, k2, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let batch_shape = if ba == bb || bb.is_empty() {
            ba
        } else if ba.is_empty() {
            bb
        } else {
            return Err(err());
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batch: numel(batch_shape),
            m,
            k,
            n,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    pub(crate) fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.m * self.k
        } else {
            0
        }
    }

    pub(crate) fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }
}
