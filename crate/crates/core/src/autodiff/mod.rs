//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every forward op appends one node to a [`Tape`]; [`Tape::backward`]
//! walks the nodes in exact reverse recording order and accumulates
//! vector-Jacobian products into per-node gradient buffers. The op set is
//! deliberately small: it covers the attentive-pooling network, its two
//! classifier heads and the gradient-reversal layer, nothing more.

mod backward;

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use backward::Grads;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

/// Running statistics of one batch-norm layer. Updated in place by
/// train-mode forward passes, read by eval-mode passes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, factor: T },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Sum { x: usize, axis: usize, mean: bool },
    Concat { parts: Vec<usize>, axis: usize },
    Reshape { x: usize },
    Transpose { x: usize, rows: usize, cols: usize },
    Grl { x: usize, lambda: T },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout { x: usize, mask: Vec<T> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        /// Per-row weight already divided by the total selected weight.
        row_weights: Vec<T>,
        probs: Vec<T>,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// A recording of one forward pass. Confined to a single thread; build a
/// fresh tape per pass.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) names: BTreeMap<String, usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an unnamed leaf (an input or constant).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a named leaf whose gradient is reported by
    /// [`Grads::named`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::Parameter(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf);
        self.names.insert(name.to_owned(), v.0);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// Element-wise sum. `b` may have the shape of a trailing suffix of
    /// `a`'s shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add", format!("{sa:?} + {sb:?}")));
        }
        let bd = self.value(b).data();
        let blen = bd.len();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % blen])
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim("elementwise_mul", format!("{sa:?} * {sb:?}")));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale { x: x.0, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x: x.0 })
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::dim(op, format!("axis {axis} for shape {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let value = softmax_raw(self.value(x), axis, false);
        Ok(self.push(value, Op::Softmax { x: x.0, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let value = softmax_raw(self.value(x), axis, true);
        Ok(self.push(value, Op::LogSoftmax { x: x.0, axis }))
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(if mean { "mean" } else { "sum" }, x, axis)?;
        let src = self.value(x);
        let (outer, n, inner) = Tensor::<T>::axis_split(src.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = src.data();
        for o in 0..outer {
            for i in 0..n {
                let row = (o * n + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += d[row + j];
                }
            }
        }
        if mean {
            let inv = T::one() / T::of(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Sum { x: x.0, axis, mean }))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let conforms = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !conforms {
                return Err(Error::dim("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = Tensor::<T>::axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let span = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: x.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("rank-2 input required, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push(value, Op::Transpose { x: x.0, rows, cols }))
    }

    /// Gradient reversal: identity forward, `-lambda` times the upstream
    /// gradient backward.
    pub fn grl(&mut self, x: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "gradient reversal scale must be finite and non-negative, got {lambda}"
            )));
        }
        let value = self.value(x).clone();
        Ok(self.push(value, Op::Grl { x: x.0, lambda }))
    }

    /// Batch normalization over the rows of a `[batch, features]` input.
    /// Train mode normalizes with batch statistics and folds them into
    /// `state`; eval mode applies the running statistics as a fixed affine
    /// map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("batch_norm", format!("expected [batch, features], got {s:?}")));
        }
        let (b, f) = (s[0], s[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] || state.running_mean.len() != f {
            return Err(Error::dim(
                "batch_norm",
                format!(
                    "features {f}, gamma {:?}, beta {:?}, running stats {}",
                    self.shape(gamma),
                    self.shape(beta),
                    state.running_mean.len()
                ),
            ));
        }
        let train = mode == Mode::Train;
        if train && b < 2 {
            return Err(Error::dim("batch_norm", "train mode needs at least 2 rows"));
        }
        let eps = T::of(BN_EPSILON);
        let xd = self.value(x).data();
        let (mean, var) = if train {
            let bn = T::of(b as f64);
            let mut mean = vec![T::zero(); f];
            for r in 0..b {
                for c in 0..f {
                    mean[c] += xd[r * f + c];
                }
            }
            mean.iter_mut().for_each(|m| *m /= bn);
            let mut var = vec![T::zero(); f];
            for r in 0..b {
                for c in 0..f {
                    let d = xd[r * f + c] - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= bn);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); b * f];
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); b * f];
        for r in 0..b {
            for c in 0..f {
                let i = r * f + c;
                xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                out[i] = gd[c] * xhat[i] + bd[c];
            }
        }
        if train {
            let m = T::of(BN_MOMENTUM);
            let unbias = T::of(b as f64 / (b - 1) as f64);
            for c in 0..f {
                state.running_mean[c] = (T::one() - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (T::one() - m) * state.running_var[c] + m * var[c] * unbias;
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Inverted dropout: retained activations are divided by the keep
    /// probability, so eval mode (or `rate == 0`) is the identity and
    /// records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(x);
        let out = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x: x.0, mask }))
    }

    /// Weighted cross-entropy over `[batch, classes]` logits:
    /// `sum_i w[y_i] * -log_softmax(logits_i)[y_i] / sum_i w[y_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[1] != class_weights.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!(
                    "logits {s:?}, {} targets, {} class weights",
                    targets.len(),
                    class_weights.len()
                ),
            ));
        }
        let c = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "class target",
                index: bad,
                bound: c,
            });
        }
        if class_weights.iter().any(|&w| !(w > T::zero())) {
            return Err(Error::Parameter("class weights must be positive".into()));
        }
        let logp = softmax_raw(self.value(logits), 1, true);
        let total: T = targets.iter().map(|&t| class_weights[t]).sum();
        let row_weights: Vec<T> = targets.iter().map(|&t| class_weights[t] / total).collect();
        let loss: T = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -row_weights[i] * logp.data()[i * c + t])
            .sum();
        let probs = logp.data().iter().map(|v| v.exp()).collect();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                row_weights,
                probs,
            },
        ))
    }
}

pub(crate) fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_raw<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, n, inner) = Tensor::<T>::axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![T::zero(); d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let at = |i: usize| (o * n + i) * inner + j;
            let max = (0..n).map(|i| d[at(i)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..n).map(|i| (d[at(i)] - max).exp()).sum();
            if log {
                let lz = z.ln();
                for i in 0..n {
                    out[at(i)] = d[at(i)] - max - lz;
                }
            } else {
                for i in 0..n {
                    out[at(i)] = (d[at(i)] - max).exp() / z;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}
