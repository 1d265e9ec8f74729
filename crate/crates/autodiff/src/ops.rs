//! Operation kinds and their forward kernels.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tensor::{argmax, Tensor};

/// Epsilon added to the variance in layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Probabilities are clamped to this floor before taking logarithms in KL.
pub const KL_CLAMP: f64 = 1e-12;
/// Smallest norm used as a divisor by `l2-normalize`.
pub const L2_NORM_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// The closed set of differentiable operations. Attributes live on the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    /// Elementwise sum; the second input may broadcast into the first.
    Add,
    /// Elementwise product; the second input may broadcast into the first.
    Mul,
    Scale(f64),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    /// Embedding lookup: selects rows of a 2-D table.
    GatherRows { indices: Vec<usize> },
    /// Normalizes the last axis; inputs are `[x, gain, bias]`.
    LayerNorm { eps: f64 },
    /// Softmax over the last axis of `x / temperature`.
    Softmax { temperature: f64 },
    LogSoftmax { temperature: f64 },
    Gelu,
    /// Scales each row (last axis) to unit Euclidean norm.
    L2Normalize,
    /// Mean over one axis, or over everything when `axis` is `None`.
    Mean { axis: Option<usize> },
    /// Mean squared difference of two equal-shaped inputs.
    Mse,
    /// Mean negative log-probability of `targets` under the row softmax of the logits.
    CrossEntropy { targets: Vec<usize> },
    /// Row-mean of `sum q (log q - log p)` for inputs `[q, p]`.
    KlDivergence,
    /// Softmax of `(logits + noise) / temperature`; `hard` emits the one-hot argmax
    /// in the forward pass while differentiating through the soft rows.
    GumbelSoftmax {
        temperature: f64,
        hard: bool,
        noise: Tensor,
    },
    Transpose,
    Reshape { shape: Vec<usize> },
    StopGradient,
}

/// Loosely typed attribute values for building an [`Op`] by name.
#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Float(f64),
    Int(usize),
    Ints(Vec<usize>),
    Bool(bool),
    Tensor(Tensor),
}

pub type Attrs = BTreeMap<String, AttrValue>;

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather-rows",
            Op::LayerNorm { .. } => "layer-norm",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log-softmax",
            Op::Gelu => "gelu",
            Op::L2Normalize => "l2-normalize",
            Op::Mean { .. } => "mean",
            Op::Mse => "mse",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::KlDivergence => "kl-divergence",
            Op::GumbelSoftmax { .. } => "gumbel-softmax",
            Op::Transpose => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::StopGradient => "stop-gradient",
        }
    }

    /// Resolves an operation from its kind name and attribute map.
    pub fn from_name(kind: &str, attrs: &Attrs) -> Result<Op> {
        let bad = |attr: &str| AutodiffError::BadAttribute {
            kind: kind.to_string(),
            attr: attr.to_string(),
        };
        let float = |key: &str| match attrs.get(key) {
            Some(AttrValue::Float(v)) => Ok(*v),
            _ => Err(bad(key)),
        };
        let float_or = |key: &str, default: f64| match attrs.get(key) {
            None => Ok(default),
            Some(AttrValue::Float(v)) => Ok(*v),
            _ => Err(bad(key)),
        };
        let int = |key: &str| match attrs.get(key) {
            Some(AttrValue::Int(v)) => Ok(*v),
            _ => Err(bad(key)),
        };
        let ints = |key: &str| match attrs.get(key) {
            Some(AttrValue::Ints(v)) => Ok(v.clone()),
            _ => Err(bad(key)),
        };
        Ok(match kind {
            "matmul" => Op::MatMul,
            "add" => Op::Add,
            "mul" => Op::Mul,
            "scale" => Op::Scale(float("factor")?),
            "concat" => Op::Concat { axis: int("axis")? },
            "slice" => Op::Slice {
                axis: int("axis")?,
                start: int("start")?,
                end: int("end")?,
            },
            "gather-rows" => Op::GatherRows {
                indices: ints("indices")?,
            },
            "layer-norm" => Op::LayerNorm {
                eps: float_or("epsilon", LAYER_NORM_EPS)?,
            },
            "softmax" => Op::Softmax {
                temperature: float_or("temperature", 1.0)?,
            },
            "log-softmax" => Op::LogSoftmax {
                temperature: float_or("temperature", 1.0)?,
            },
            "gelu" => Op::Gelu,
            "l2-normalize" => Op::L2Normalize,
            "mean" => Op::Mean {
                axis: match attrs.get("axis") {
                    None => None,
                    Some(AttrValue::Int(a)) => Some(*a),
                    _ => return Err(bad("axis")),
                },
            },
            "mse" => Op::Mse,
            "cross-entropy" => Op::CrossEntropy {
                targets: ints("targets")?,
            },
            "kl-divergence" => Op::KlDivergence,
            "gumbel-softmax" => Op::GumbelSoftmax {
                temperature: float("temperature")?,
                hard: match attrs.get("hard") {
                    None => false,
                    Some(AttrValue::Bool(b)) => *b,
                    _ => return Err(bad("hard")),
                },
                noise: match attrs.get("noise") {
                    Some(AttrValue::Tensor(t)) => t.clone(),
                    _ => return Err(bad("noise")),
                },
            },
            "transpose" => Op::Transpose,
            "reshape" => Op::Reshape {
                shape: ints("shape")?,
            },
            "stop-gradient" => Op::StopGradient,
            other => return Err(AutodiffError::UnknownKind(other.to_string())),
        })
    }

    pub(crate) fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Concat { .. } => None,
            Op::MatMul | Op::Add | Op::Mul | Op::Mse | Op::KlDivergence => Some(2),
            Op::LayerNorm { .. } => Some(3),
            _ => Some(1),
        }
    }
}

/// How the second operand of an elementwise binary op maps onto the first.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand repeats with this period (trailing-axis broadcast).
    Cyclic(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// Data retained from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) enum Saved {
    None,
    Broadcast(Broadcast),
    /// Row softmax probabilities (cross-entropy, gumbel-softmax).
    Probs(Vec<f64>),
    LayerNorm { xhat: Vec<f64>, inv_std: Vec<f64> },
    Norms(Vec<f64>),
}

fn mismatch(kind: &'static str, shapes: &[&Tensor], detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        kind,
        shapes: shapes.iter().map(|t| t.shape().to_vec()).collect(),
        detail: detail.into(),
    }
}

fn broadcast_plan(kind: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(Broadcast::Same);
    }
    if b.len() == 1 {
        return Ok(Broadcast::Cyclic(1));
    }
    if sb.len() > sa.len() {
        return Err(mismatch(kind, &[a, b], "right operand has more axes"));
    }
    let offset = sa.len() - sb.len();
    for (i, &d) in sb.iter().enumerate() {
        if d != 1 && d != sa[offset + i] {
            return Err(mismatch(kind, &[a, b], "right operand does not broadcast"));
        }
    }
    if sb.iter().all(|&d| d != 1) {
        return Ok(Broadcast::Cyclic(b.len()));
    }
    // General case: walk every output index.
    let mut b_strides = vec![0usize; sa.len()];
    let mut stride = 1;
    for i in (0..sb.len()).rev() {
        if sb[i] != 1 {
            b_strides[offset + i] = stride;
        }
        stride *= sb[i];
    }
    let mut map = Vec::with_capacity(a.len());
    let mut idx = vec![0usize; sa.len()];
    for _ in 0..a.len() {
        map.push(idx.iter().zip(&b_strides).map(|(i, s)| i * s).sum());
        for ax in (0..sa.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < sa[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Broadcast::Map(map))
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c = beta * c + a · b` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(x: &[f64], temperature: f64, out: &mut [f64]) {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_temperature(kind: &'static str, t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(AutodiffError::BadAttribute {
            kind: kind.into(),
            attr: "temperature".into(),
        })
    }
}

/// Evaluates `op` on `inputs`, returning the output and whatever backward needs.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let kind = op.name();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(AutodiffError::ShapeMismatch {
                kind,
                shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
                detail: format!("expected {n} inputs"),
            });
        }
    } else if inputs.is_empty() {
        return Err(AutodiffError::ShapeMismatch {
            kind,
            shapes: vec![],
            detail: "expected at least one input".into(),
        });
    }

    match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(mismatch(kind, &[a, b], "expected [n,k] x [k,m]"));
            }
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, a.data(), (k as isize, 1), b.data(), (m as isize, 1), 0.0, &mut out);
            Ok((Tensor::new(vec![n, m], out)?, Saved::None))
        }
        Op::Add | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let plan = broadcast_plan(kind, a, b)?;
            let bd = b.data();
            let data: Vec<f64> = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[plan.index(i)];
                    if matches!(op, Op::Add) {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::Broadcast(plan)))
        }
        Op::Scale(f) => Ok((inputs[0].map(|v| v * f), Saved::None)),
        Op::Concat { axis } => {
            let first = inputs[0];
            let nd = first.ndim();
            if *axis >= nd {
                return Err(mismatch(kind, inputs, format!("axis {axis} out of range")));
            }
            let mut total = 0;
            for t in inputs {
                if t.ndim() != nd
                    || t.shape()
                        .iter()
                        .zip(first.shape())
                        .enumerate()
                        .any(|(i, (x, y))| i != *axis && x != y)
                {
                    return Err(mismatch(kind, inputs, format!("extents differ off axis {axis}")));
                }
                total += t.shape()[*axis];
            }
            let mut shape = first.shape().to_vec();
            shape[*axis] = total;
            let (outer, _, inner) = split_axis(first.shape(), *axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let block = t.shape()[*axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Ok((Tensor::new(shape, data)?, Saved::None))
        }
        Op::Slice { axis, start, end } => {
            let x = inputs[0];
            if *axis >= x.ndim() || start >= end || *end > x.shape()[*axis] {
                return Err(mismatch(
                    kind,
                    inputs,
                    format!("range {start}..{end} on axis {axis} is invalid"),
                ));
            }
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut shape = x.shape().to_vec();
            shape[*axis] = end - start;
            let mut data = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * len * inner;
                data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            Ok((Tensor::new(shape, data)?, Saved::None))
        }
        Op::GatherRows { indices } => {
            let table = inputs[0];
            if table.ndim() != 2 || indices.is_empty() {
                return Err(mismatch(kind, inputs, "expected a 2-D table and at least one index"));
            }
            let rows = table.shape()[0];
            if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
                return Err(mismatch(kind, inputs, format!("row {bad} out of range")));
            }
            let mut data = Vec::with_capacity(indices.len() * table.cols());
            for &i in indices {
                data.extend_from_slice(table.row(i));
            }
            Ok((Tensor::new(vec![indices.len(), table.cols()], data)?, Saved::None))
        }
        Op::LayerNorm { eps } => {
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            let d = x.cols();
            if g.shape() != [d] || b.shape() != [d] {
                return Err(mismatch(kind, inputs, "gain and bias must be [last-axis]"));
            }
            let rows = x.rows();
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let xr = x.row(r);
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (xr[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), out)?,
                Saved::LayerNorm { xhat, inv_std },
            ))
        }
        Op::Softmax { temperature } | Op::LogSoftmax { temperature } => {
            check_temperature(kind, *temperature)?;
            let x = inputs[0];
            let d = x.cols();
            let mut out = vec![0.0; x.len()];
            for r in 0..x.rows() {
                let o = &mut out[r * d..(r + 1) * d];
                if matches!(op, Op::Softmax { .. }) {
                    softmax_row(x.row(r), *temperature, o);
                } else {
                    let xr = x.row(r);
                    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = xr
                        .iter()
                        .map(|v| ((v - m) / temperature).exp())
                        .sum::<f64>()
                        .ln();
                    for j in 0..d {
                        o[j] = (xr[j] - m) / temperature - lse;
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::None))
        }
        Op::Gelu => Ok((
            inputs[0].map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())),
            Saved::None,
        )),
        Op::L2Normalize => {
            let x = inputs[0];
            let d = x.cols();
            let mut out = vec![0.0; x.len()];
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let xr = x.row(r);
                let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_NORM_FLOOR);
                norms.push(n);
                for j in 0..d {
                    out[r * d + j] = xr[j] / n;
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norms(norms)))
        }
        Op::Mean { axis } => {
            let x = inputs[0];
            match axis {
                None => Ok((
                    Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64),
                    Saved::None,
                )),
                Some(a) => {
                    if *a >= x.ndim() {
                        return Err(mismatch(kind, inputs, format!("axis {a} out of range")));
                    }
                    let (outer, len, inner) = split_axis(x.shape(), *a);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += x.data()[base + i];
                            }
                        }
                    }
                    for v in out.iter_mut() {
                        *v /= len as f64;
                    }
                    let mut shape: Vec<usize> = x.shape().to_vec();
                    shape.remove(*a);
                    if shape.is_empty() {
                        shape.push(1);
                    }
                    Ok((Tensor::new(shape, out)?, Saved::None))
                }
            }
        }
        Op::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(kind, inputs, "operands must have equal shapes"));
            }
            let s: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok((Tensor::scalar(s / a.len() as f64), Saved::None))
        }
        Op::CrossEntropy { targets } => {
            let x = inputs[0];
            if x.ndim() != 2 || targets.len() != x.rows() {
                return Err(mismatch(
                    kind,
                    inputs,
                    format!("expected [n,C] logits for {} targets", targets.len()),
                ));
            }
            let c = x.cols();
            if let Some(t) = targets.iter().find(|&&t| t >= c) {
                return Err(mismatch(kind, inputs, format!("target {t} out of range")));
            }
            let mut probs = vec![0.0; x.len()];
            let mut loss = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                let xr = x.row(r);
                let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = xr.iter().map(|v| (v - m).exp()).sum();
                loss -= xr[t] - m - sum.ln();
                softmax_row(xr, 1.0, &mut probs[r * c..(r + 1) * c]);
            }
            Ok((
                Tensor::scalar(loss / targets.len() as f64),
                Saved::Probs(probs),
            ))
        }
        Op::KlDivergence => {
            let (q, p) = (inputs[0], inputs[1]);
            if q.shape() != p.shape() {
                return Err(mismatch(kind, inputs, "distributions must have equal shapes"));
            }
            let mut s = 0.0;
            for (&qi, &pi) in q.data().iter().zip(p.data()) {
                if qi > 0.0 {
                    s += qi * (qi.max(KL_CLAMP).ln() - pi.max(KL_CLAMP).ln());
                }
            }
            Ok((Tensor::scalar(s / q.rows() as f64), Saved::None))
        }
        Op::GumbelSoftmax {
            temperature,
            hard,
            noise,
        } => {
            check_temperature(kind, *temperature)?;
            let x = inputs[0];
            if noise.shape() != x.shape() {
                return Err(mismatch(kind, &[x, noise], "noise must match the logits"));
            }
            let d = x.cols();
            let perturbed: Vec<f64> = x.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            let mut soft = vec![0.0; x.len()];
            for r in 0..x.rows() {
                softmax_row(&perturbed[r * d..(r + 1) * d], *temperature, &mut soft[r * d..(r + 1) * d]);
            }
            let out = if *hard {
                let mut one_hot = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    one_hot[r * d + argmax(&perturbed[r * d..(r + 1) * d])] = 1.0;
                }
                one_hot
            } else {
                soft.clone()
            };
            Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Probs(soft)))
        }
        Op::Transpose => {
            let x = inputs[0];
            if x.ndim() != 2 {
                return Err(mismatch(kind, inputs, "expected a 2-D tensor"));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Ok((Tensor::new(vec![c, r], out)?, Saved::None))
        }
        Op::Reshape { shape } => {
            let x = inputs[0];
            let t = Tensor::new(shape.clone(), x.data().to_vec())
                .map_err(|e| mismatch(kind, inputs, e.to_string()))?;
            Ok((t, Saved::None))
        }
        Op::StopGradient => Ok((inputs[0].clone(), Saved::None)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_column_vector_maps_rows() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 1]);
        match broadcast_plan("add", &a, &b).unwrap() {
            Broadcast::Map(m) => assert_eq!(m, vec![0, 0, 0, 1, 1, 1]),
            other => panic!("unexpected plan {other:?}"),
        }
    }

    #[test]
    fn from_name_rejects_unknown_kind() {
        let err = Op::from_name("conv2d", &Attrs::new()).unwrap_err();
        assert_eq!(err, AutodiffError::UnknownKind("conv2d".into()));
        let err = Op::from_name("scale", &Attrs::new()).unwrap_err();
        assert!(matches!(err, AutodiffError::BadAttribute { .. }));
    }
}
