use super::broadcast::Pairing;
use super::graph::{activation_fault, gelu_grad, lanes, permute_visit, split_axis, Binary, Graph, MatmulPlan, Node, Op, Unary, Var};
use super::graph::Activation;
use super::kernel::gemm;
use crate::error::{Error, Result};

type Grads = Vec<Option<Vec<f64>>>;

fn slot<'a>(grads: &'a mut Grads, nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

impl Graph {
    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalar(shape));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let Graph { nodes, leaf_grads, .. } = self;
        let mut grads: Grads = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            propagate(nodes, &mut grads, node, &g);
            if let Op::Leaf = node.op {
                match &mut leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn propagate(nodes: &[Node], grads: &mut Grads, node: &Node, g: &[f64]) {
    let val = |v: Var| &nodes[v.0].value;
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let pairing = Pairing::new(ta.shape(), tb.shape(), node.value.shape());
            let (da, db) = (ta.data(), tb.data());
            if let Some(ga) = slot(grads, nodes, *a) {
                match kind {
                    Binary::Add | Binary::Sub => pairing.visit(|o, ia, _| ga[ia] += g[o]),
                    Binary::Mul => pairing.visit(|o, ia, ib| ga[ia] += g[o] * db[ib]),
                    Binary::Div => pairing.visit(|o, ia, ib| ga[ia] += g[o] / db[ib]),
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                match kind {
                    Binary::Add => pairing.visit(|o, _, ib| gb[ib] += g[o]),
                    Binary::Sub => pairing.visit(|o, _, ib| gb[ib] -= g[o]),
                    Binary::Mul => pairing.visit(|o, ia, ib| gb[ib] += g[o] * da[ia]),
                    Binary::Div => pairing.visit(|o, ia, ib| gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib])),
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
            }
        }
        Op::Offset { x } | Op::Reshape { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::Unary { kind, x } => {
            let xs = val(*x).data();
            let fault = match kind {
                Unary::Act(a) if activation_fault() == Some(*a) => 2.0,
                _ => 1.0,
            };
            if let Some(gx) = slot(grads, nodes, *x) {
                for i in 0..gx.len() {
                    let d = match kind {
                        Unary::Act(Activation::Relu) => (xs[i] > 0.0) as u8 as f64,
                        Unary::Act(Activation::ReluSquared) => 2.0 * xs[i].max(0.0),
                        Unary::Act(Activation::Sigmoid) => y[i] * (1.0 - y[i]),
                        Unary::Act(Activation::Tanh) => 1.0 - y[i] * y[i],
                        Unary::Act(Activation::Gelu) => gelu_grad(xs[i]),
                        Unary::Exp => y[i],
                        Unary::Ln => 1.0 / xs[i],
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Square => 2.0 * xs[i],
                    };
                    gx[i] += g[i] * d * fault;
                }
            }
        }
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let plan = MatmulPlan::new(ta.shape(), tb.shape()).expect("validated in forward");
            let (m, k, n) = (plan.m, plan.k, plan.n);
            if let Some(ga) = slot(grads, nodes, *a) {
                for i in 0..plan.batch {
                    let (ao, bo) = (plan.a_off(i), plan.b_off(i));
                    gemm(
                        m,
                        n,
                        k,
                        (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
                        (&tb.data()[bo..bo + k * n], 1, n as isize),
                        &mut ga[ao..ao + m * k],
                        1.0,
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for i in 0..plan.batch {
                    let (ao, bo) = (plan.a_off(i), plan.b_off(i));
                    gemm(
                        k,
                        m,
                        n,
                        (&ta.data()[ao..ao + m * k], 1, k as isize),
                        (&g[i * m * n..(i + 1) * m * n], n as isize, 1),
                        &mut gb[bo..bo + k * n],
                        1.0,
                    );
                }
            }
        }
        Op::SumAll { x } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Extreme { x, axis, arg } => {
            let (_, len, inner) = split_axis(val(*x).shape(), *axis);
            if let Some(gx) = slot(grads, nodes, *x) {
                for (oi, &j) in arg.iter().enumerate() {
                    let (o, i) = (oi / inner, oi % inner);
                    gx[(o * len + j) * inner + i] += g[oi];
                }
            }
        }
        Op::Softmax { x, axis } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (start, stride, len) in lanes(node.value.shape(), *axis) {
                    let s: f64 = (0..len).map(|j| g[start + j * stride] * y[start + j * stride]).sum();
                    for j in 0..len {
                        let p = start + j * stride;
                        gx[p] += y[p] * (g[p] - s);
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (start, stride, len) in lanes(node.value.shape(), *axis) {
                    let s: f64 = (0..len).map(|j| g[start + j * stride]).sum();
                    for j in 0..len {
                        let p = start + j * stride;
                        gx[p] += g[p] - y[p].exp() * s;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = probs.len() / labels.len();
            let scale = g[0] / labels.len() as f64;
            if let Some(gx) = slot(grads, nodes, *logits) {
                for (b, &lbl) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == lbl { 1.0 } else { 0.0 };
                        gx[b * classes + c] += scale * (probs[b * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            let shape = val(*x).shape().to_vec();
            if let Some(gx) = slot(grads, nodes, *x) {
                permute_visit(&shape, perm, |o, i| gx[i] += g[o]);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = val(v).shape()[*axis];
                if let Some(gx) = slot(grads, nodes, v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        gx[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = slot(grads, nodes, *x) {
                for o in 0..outer {
                    let dst = &mut gx[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::BroadcastTo { x } => {
            let pairing = Pairing::new(val(*x).shape(), node.value.shape(), node.value.shape());
            if let Some(gx) = slot(grads, nodes, *x) {
                pairing.visit(|o, ia, _| gx[ia] += g[o]);
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = *node.value.shape().last().unwrap();
            let gam = val(*gamma).data();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                    gg[i % d] += gi * h;
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % d] += gi;
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let base = r * d;
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        dxhat[j] = g[base + j] * gam[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[base + j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        gx[base + j] += rs * (dxhat[j] - m1 - xhat[base + j] * m2);
                    }
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
            let c = rstd.len();
            let rows = g.len() / c;
            let gam = val(*gamma).data();
            if let Some(gg) = slot(grads, nodes, *gamma) {
                for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                    gg[i % c] += gi * h;
                }
            }
            if let Some(gb) = slot(grads, nodes, *beta) {
                for (i, gi) in g.iter().enumerate() {
                    gb[i % c] += gi;
                }
            }
            if let Some(gx) = slot(grads, nodes, *x) {
                if *train {
                    let mut m1 = vec![0.0; c];
                    let mut m2 = vec![0.0; c];
                    for (i, gi) in g.iter().enumerate() {
                        let j = i % c;
                        let dh = gi * gam[j];
                        m1[j] += dh;
                        m2[j] += dh * xhat[i];
                    }
                    for j in 0..c {
                        m1[j] /= rows as f64;
                        m2[j] /= rows as f64;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        let j = i % c;
                        gx[i] += rstd[j] * (gi * gam[j] - m1[j] - xhat[i] * m2[j]);
                    }
                } else {
                    for (i, gi) in g.iter().enumerate() {
                        let j = i % c;
                        gx[i] += gi * gam[j] * rstd[j];
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let d = *node.value.shape().last().unwrap();
            if let Some(gx) = slot(grads, nodes, *x) {
                for (r, n) in norms.iter().enumerate() {
                    let base = r * d;
                    let dot: f64 = (0..d).map(|j| g[base + j] * y[base + j]).sum();
                    for j in 0..d {
                        gx[base + j] += (g[base + j] - y[base + j] * dot) / n;
                    }
                }
            }
        }
        Op::PairwiseDistance { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let r = ta.rank();
            let (n, m, d) = (ta.shape()[r - 2], tb.shape()[r - 2], ta.shape()[r - 1]);
            let batch = g.len() / (n * m);
            let (da, db) = (ta.data(), tb.data());
            // coefficient g/D for every pair, zero where D == 0
            let coef: Vec<f64> = g
                .iter()
                .zip(y)
                .map(|(gi, dist)| if *dist > 0.0 { gi / dist } else { 0.0 })
                .collect();
            if let Some(ga) = slot(grads, nodes, *a) {
                for bi in 0..batch {
                    for i in 0..n {
                        for c in 0..m {
                            let k = coef[bi * n * m + i * m + c];
                            if k == 0.0 {
                                continue;
                            }
                            let (ar, br) = ((bi * n + i) * d, (bi * m + c) * d);
                            for j in 0..d {
                                ga[ar + j] += k * (da[ar + j] - db[br + j]);
                            }
                        }
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for bi in 0..batch {
                    for i in 0..n {
                        for c in 0..m {
                            let k = coef[bi * n * m + i * m + c];
                            if k == 0.0 {
                                continue;
                            }
                            let (ar, br) = ((bi * n + i) * d, (bi * m + c) * d);
                            for j in 0..d {
                                gb[br + j] -= k * (da[ar + j] - db[br + j]);
                            }
                        }
                    }
                }
            }
        }
    }
}
