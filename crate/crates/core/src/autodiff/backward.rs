use std::collections::BTreeMap;

use super::{matmul_raw, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Gradients of one scalar loss with respect to every node of a tape.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    names: BTreeMap<String, usize>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    /// Gradients of every named parameter on the tape.
    pub fn named(&self) -> BTreeMap<String, Tensor<T>> {
        self.names
            .iter()
            .map(|(name, &i)| (name.clone(), self.wrt(Var(i))))
            .collect()
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Tape<T> {
    /// Reverse pass from a scalar `loss`. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!(
                "node {} has not been recorded (tape holds {} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            names: self.names.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = G · Bᵀ
                let bd = val(*b);
                let mut da = vec![T::zero(); m * k];
                for r in 0..m {
                    for p in 0..k {
                        let mut s = T::zero();
                        for c in 0..n {
                            s += g[r * n + c] * bd[p * n + c];
                        }
                        da[r * k + p] = s;
                    }
                }
                // dB = Aᵀ · G
                let ad = val(*a);
                let mut at = vec![T::zero(); k * m];
                for r in 0..m {
                    for p in 0..k {
                        at[p * m + r] = ad[r * k + p];
                    }
                }
                let db = matmul_raw(&at, g, k, m, n);
                accumulate(&mut grads[*a], da);
                accumulate(&mut grads[*b], db);
            }
            Op::Add { a, b } => {
                let blen = self.nodes[*b].value.len();
                let mut db = vec![T::zero(); blen];
                for (j, &gv) in g.iter().enumerate() {
                    db[j % blen] += gv;
                }
                accumulate(&mut grads[*a], g.to_vec());
                accumulate(&mut grads[*b], db);
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let da = g.iter().zip(bd).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(ad).map(|(&gv, &x)| gv * x).collect();
                accumulate(&mut grads[*a], da);
                accumulate(&mut grads[*b], db);
            }
            Op::Scale { x, factor } => {
                accumulate(&mut grads[*x], g.iter().map(|&gv| gv * *factor).collect());
            }
            Op::Relu { x } => {
                let xd = val(*x);
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(&mut grads[*x], dx);
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = Tensor::<T>::axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |r: usize| (o * n + r) * inner + j;
                        let dot: T = (0..n).map(|r| g[at(r)] * y[at(r)]).sum();
                        for r in 0..n {
                            dx[at(r)] = y[at(r)] * (g[at(r)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = Tensor::<T>::axis_split(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |r: usize| (o * n + r) * inner + j;
                        let total: T = (0..n).map(|r| g[at(r)]).sum();
                        for r in 0..n {
                            dx[at(r)] = g[at(r)] - y[at(r)].exp() * total;
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Sum { x, axis, mean } => {
                let src = &self.nodes[*x].value;
                let (outer, n, inner) = Tensor::<T>::axis_split(src.shape(), *axis);
                let s = if *mean {
                    T::one() / T::of(n as f64)
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); src.len()];
                for o in 0..outer {
                    for r in 0..n {
                        for j in 0..inner {
                            dx[(o * n + r) * inner + j] = g[o * inner + j] * s;
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = Tensor::<T>::axis_split(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let extent = self.nodes[p].value.shape()[*axis];
                    let span = extent * inner;
                    let mut dp = Vec::with_capacity(outer * span);
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        dp.extend_from_slice(&g[start..start + span]);
                    }
                    accumulate(&mut grads[p], dp);
                    offset += extent;
                }
            }
            Op::Reshape { x } => accumulate(&mut grads[*x], g.to_vec()),
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::Grl { x, lambda } => {
                let neg = -*lambda;
                accumulate(&mut grads[*x], g.iter().map(|&gv| neg * gv).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let f = inv_std.len();
                let b = g.len() / f;
                let gd = val(*gamma);
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                for r in 0..b {
                    for c in 0..f {
                        dgamma[c] += g[r * f + c] * xhat[r * f + c];
                        dbeta[c] += g[r * f + c];
                    }
                }
                let mut dx = vec![T::zero(); b * f];
                if *train {
                    // dx = inv_std / B * (B·dxhat − Σ dxhat − xhat · Σ dxhat·xhat)
                    let bn = T::of(b as f64);
                    for c in 0..f {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for r in 0..b {
                            let dxh = g[r * f + c] * gd[c];
                            s1 += dxh;
                            s2 += dxh * xhat[r * f + c];
                        }
                        for r in 0..b {
                            let i = r * f + c;
                            let dxh = g[i] * gd[c];
                            dx[i] = inv_std[c] / bn * (bn * dxh - s1 - xhat[i] * s2);
                        }
                    }
                } else {
                    for r in 0..b {
                        for c in 0..f {
                            dx[r * f + c] = g[r * f + c] * gd[c] * inv_std[c];
                        }
                    }
                }
                accumulate(&mut grads[*x], dx);
                accumulate(&mut grads[*gamma], dgamma);
                accumulate(&mut grads[*beta], dbeta);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                accumulate(&mut grads[*x], dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            } => {
                let c = probs.len() / targets.len();
                let mut dl = vec![T::zero(); probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    let w = g[0] * row_weights[r];
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        dl[r * c + j] = w * (probs[r * c + j] - onehot);
                    }
                }
                accumulate(&mut grads[*logits], dl);
            }
        }
    }
}
