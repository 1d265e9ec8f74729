//! The recording tape and the reverse pass.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each call appends one node
//! holding its output value, so node ids are topologically ordered by
//! construction and the reverse pass is a single backwards sweep.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::ops::{forward, gemm, split_axis, Op, Saved, KL_CLAMP, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
    saved: Saved,
}

/// Gradients produced by [`Graph::backward`], one per gradient-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_var: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(&v.0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|id| self.by_var.get(id))
    }

    /// Gradients of all named leaves.
    pub fn named(&self) -> GradMap {
        self.names
            .iter()
            .map(|(n, id)| (n.clone(), self.by_var[id].clone()))
            .collect()
    }

    /// Ids of every leaf that received a gradient entry.
    pub fn leaves(&self) -> impl Iterator<Item = Var> + '_ {
        self.by_var.keys().map(|&id| Var(id))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            name,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-requiring leaf, reported under `name` by [`Gradients::named`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_leaf(value, true, Some(name.into()))
    }

    /// A constant leaf; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Applies `op` to `inputs`, records the node and returns its handle.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if matches!(op, Op::Leaf) {
            return Err(AutodiffError::UnknownKind("leaf".into()));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownVar(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = forward(&op, &values)?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { kind: op.name() });
        }
        let requires_grad = !matches!(op, Op::StopGradient)
            && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            name: None,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.apply(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            &[table],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: LAYER_NORM_EPS }, &[x, gain, bias])
    }

    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        self.apply(Op::Softmax { temperature }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var> {
        self.apply(Op::LogSoftmax { temperature }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::L2Normalize, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean { axis: None }, &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Mean { axis: Some(axis) }, &[x])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    /// `KL(q ‖ p)` averaged over rows.
    pub fn kl_divergence(&mut self, q: Var, p: Var) -> Result<Var> {
        self.apply(Op::KlDivergence, &[q, p])
    }

    pub fn gumbel_softmax(
        &mut self,
        logits: Var,
        noise: Tensor,
        temperature: f64,
        hard: bool,
    ) -> Result<Var> {
        self.apply(
            Op::GumbelSoftmax {
                temperature,
                hard,
                noise,
            },
            &[logits],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            &[x],
        )
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::StopGradient, &[x])
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every gradient-requiring leaf gets an entry; leaves the loss does not
    /// depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut by_var = BTreeMap::new();
        let mut names = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_var.insert(id, Tensor::new(node.value.shape().to_vec(), data)?);
                if let Some(n) = &node.name {
                    names.insert(n.clone(), id);
                }
            }
        }
        Ok(Gradients { by_var, names })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inputs: Vec<&Node> = node.inputs.iter().map(|v| &self.nodes[v.0]).collect();
        let wants = |k: usize| inputs[k].requires_grad;
        // Accumulation buffer for input `k`, allocated on first use.
        fn buf(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
            grads[var.0].get_or_insert_with(|| vec![0.0; len])
        }
        let out = &node.value;

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul => {
                let (a, b) = (&inputs[0].value, &inputs[1].value);
                let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                if wants(0) {
                    // dA[n,k] += G[n,m] · Bᵀ
                    let ga = buf(grads, node.inputs[0], n * k);
                    gemm(n, m, k, g, (m as isize, 1), b.data(), (1, m as isize), 1.0, ga);
                }
                if wants(1) {
                    // dB[k,m] += Aᵀ · G
                    let gb = buf(grads, node.inputs[1], k * m);
                    gemm(k, n, m, a.data(), (1, k as isize), g, (m as isize, 1), 1.0, gb);
                }
            }
            Op::Add | Op::Mul => {
                let Saved::Broadcast(plan) = &node.saved else { unreachable!() };
                let (a, b) = (&inputs[0].value, &inputs[1].value);
                let is_add = matches!(node.op, Op::Add);
                if wants(0) {
                    let ga = buf(grads, node.inputs[0], a.len());
                    for i in 0..g.len() {
                        ga[i] += if is_add { g[i] } else { g[i] * b.data()[plan.index(i)] };
                    }
                }
                if wants(1) {
                    let gb = buf(grads, node.inputs[1], b.len());
                    for i in 0..g.len() {
                        gb[plan.index(i)] += if is_add { g[i] } else { g[i] * a.data()[i] };
                    }
                }
            }
            Op::Scale(f) => {
                if wants(0) {
                    let ga = buf(grads, node.inputs[0], g.len());
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += f * gi;
                    }
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for (k, inp) in inputs.iter().enumerate() {
                    let len = inp.value.shape()[*axis];
                    if wants(k) {
                        let gi = buf(grads, node.inputs[k], inp.value.len());
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for i in 0..len * inner {
                                gi[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start, end } => {
                if wants(0) {
                    let x = &inputs[0].value;
                    let (outer, len, inner) = split_axis(x.shape(), *axis);
                    let width = (end - start) * inner;
                    let gx = buf(grads, node.inputs[0], x.len());
                    for o in 0..outer {
                        let dst = o * len * inner + start * inner;
                        for i in 0..width {
                            gx[dst + i] += g[o * width + i];
                        }
                    }
                }
            }
            Op::GatherRows { indices } => {
                if wants(0) {
                    let table = &inputs[0].value;
                    let d = table.cols();
                    let gt = buf(grads, node.inputs[0], table.len());
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::LayerNorm { .. } => {
                let Saved::LayerNorm { xhat, inv_std } = &node.saved else { unreachable!() };
                let gain = &inputs[1].value;
                let d = gain.len();
                let rows = inv_std.len();
                if wants(0) {
                    let gx = buf(grads, node.inputs[0], rows * d);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gain.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gain.data()[j];
                            gx[r * d + j] += inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if wants(1) {
                    let gg = buf(grads, node.inputs[1], d);
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                }
                if wants(2) {
                    let gb = buf(grads, node.inputs[2], d);
                    for i in 0..g.len() {
                        gb[i % d] += g[i];
                    }
                }
            }
            Op::Softmax { temperature } => {
                if wants(0) {
                    softmax_backward(out.data(), g, out.cols(), *temperature, buf(grads, node.inputs[0], g.len()));
                }
            }
            Op::GumbelSoftmax { temperature, .. } => {
                if wants(0) {
                    let Saved::Probs(soft) = &node.saved else { unreachable!() };
                    softmax_backward(soft, g, out.cols(), *temperature, buf(grads, node.inputs[0], g.len()));
                }
            }
            Op::LogSoftmax { temperature } => {
                if wants(0) {
                    let d = out.cols();
                    let gx = buf(grads, node.inputs[0], g.len());
                    for r in 0..out.rows() {
                        let gs: f64 = g[r * d..(r + 1) * d].iter().sum();
                        for j in 0..d {
                            let p = out.data()[r * d + j].exp();
                            gx[r * d + j] += (g[r * d + j] - p * gs) / temperature;
                        }
                    }
                }
            }
            Op::Gelu => {
                if wants(0) {
                    let x = &inputs[0].value;
                    let gx = buf(grads, node.inputs[0], x.len());
                    for (i, &xv) in x.data().iter().enumerate() {
                        let u = 0.797_884_560_802_865_4 * (xv + 0.044_715 * xv * xv * xv);
                        let t = u.tanh();
                        let du = 0.797_884_560_802_865_4 * (1.0 + 3.0 * 0.044_715 * xv * xv);
                        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                    }
                }
            }
            Op::L2Normalize => {
                if wants(0) {
                    let Saved::Norms(norms) = &node.saved else { unreachable!() };
                    let d = out.cols();
                    let gx = buf(grads, node.inputs[0], g.len());
                    for (r, n) in norms.iter().enumerate() {
                        let y = &out.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] += (gr[j] - y[j] * dot) / n;
                        }
                    }
                }
            }
            Op::Mean { axis } => {
                if wants(0) {
                    let x = &inputs[0].value;
                    let gx = buf(grads, node.inputs[0], x.len());
                    match axis {
                        None => {
                            let s = g[0] / x.len() as f64;
                            gx.iter_mut().for_each(|v| *v += s);
                        }
                        Some(a) => {
                            let (outer, len, inner) = split_axis(x.shape(), *a);
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        gx[(o * len + l) * inner + i] += g[o * inner + i] / len as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Mse => {
                let (a, b) = (&inputs[0].value, &inputs[1].value);
                let s = 2.0 * g[0] / a.len() as f64;
                if wants(0) {
                    let ga = buf(grads, node.inputs[0], a.len());
                    for ((g, x), y) in ga.iter_mut().zip(a.data()).zip(b.data()) {
                        *g += s * (x - y);
                    }
                }
                if wants(1) {
                    let gb = buf(grads, node.inputs[1], b.len());
                    for ((g, x), y) in gb.iter_mut().zip(a.data()).zip(b.data()) {
                        *g -= s * (x - y);
                    }
                }
            }
            Op::CrossEntropy { targets } => {
                if wants(0) {
                    let Saved::Probs(probs) = &node.saved else { unreachable!() };
                    let x = &inputs[0].value;
                    let c = x.cols();
                    let s = g[0] / targets.len() as f64;
                    let gx = buf(grads, node.inputs[0], x.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gx[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::KlDivergence => {
                let (q, p) = (&inputs[0].value, &inputs[1].value);
                let s = g[0] / q.rows() as f64;
                if wants(0) {
                    let gq = buf(grads, node.inputs[0], q.len());
                    for ((g, &qi), &pi) in gq.iter_mut().zip(q.data()).zip(p.data()) {
                        let dlogq = if qi > KL_CLAMP { qi.ln() + 1.0 } else { KL_CLAMP.ln() };
                        *g += s * (dlogq - pi.max(KL_CLAMP).ln());
                    }
                }
                if wants(1) {
                    let gp = buf(grads, node.inputs[1], p.len());
                    for ((g, &qi), &pi) in gp.iter_mut().zip(q.data()).zip(p.data()) {
                        if pi > KL_CLAMP {
                            *g -= s * qi / pi;
                        }
                    }
                }
            }
            Op::Transpose => {
                if wants(0) {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let gx = buf(grads, node.inputs[0], g.len());
                    // out is [r, c]; input is [c, r].
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape { .. } => {
                if wants(0) {
                    let gx = buf(grads, node.inputs[0], g.len());
                    for (x, &gi) in gx.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
        }
    }
}

fn softmax_backward(y: &[f64], g: &[f64], d: usize, temperature: f64, gx: &mut [f64]) {
    for r in 0..y.len() / d {
        let yr = &y[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..d {
            gx[r * d + j] += yr[j] * (gr[j] - dot) / temperature;
        }
    }
}
