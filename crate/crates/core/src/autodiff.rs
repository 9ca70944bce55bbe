//! Reverse-mode gradients over a recorded tape of the model operations.
//!
//! A [`Graph`] owns every intermediate value. Nodes are appended in evaluation
//! order, so the tape is already topologically sorted and `backward` is a single
//! reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::ops::{
    self, Activation, BnCache, BnMode, ConvGeometry, Padding, ReadoutDims,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Poisson,
}

/// Lower clamp applied to predictions inside the Poisson loss.
pub const POISSON_FLOOR: f64 = 1e-8;

enum Op<S: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Sum(Vec<Var>),
    Scale(Var, S),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<S>,
    },
    Act(Var, Activation),
    Pool {
        x: Var,
        dims: [usize; 4],
    },
    Readout {
        x: Var,
        mask: Var,
        features: Var,
        bias: Var,
        dims: ReadoutDims,
        proj: Vec<S>,
    },
    Loss {
        pred: Var,
        target: Vec<S>,
        kind: LossKind,
    },
    AbsSum(Var),
    LaplacianSq {
        w: Var,
        slices: usize,
        k: usize,
        lap: Vec<S>,
    },
    SumAll(Var),
    HalfSumSq(Var),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Recorded forward computation.
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; its `requires_grad` flag decides whether a gradient is kept.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad;
        let mut t = t;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a leaf that participates in differentiation.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // -- operations --------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(x).shape();
        let dims = ops::as_batched(xs)?;
        let geom = ConvGeometry::new(dims, self.value(w).shape(), padding)?;
        let out = ops::conv2d_forward_raw(&geom, self.value(x).data(), self.value(w).data());
        let t = Tensor::from_vec(&[geom.batch, geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(t, Op::Conv { x, w, geom }, rg))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let Some(&first) = items.first() else {
            return shape_err("sum of zero terms");
        };
        let shape = self.shape(first).to_vec();
        let mut acc = self.value(first).data().to_vec();
        for &v in &items[1..] {
            if self.shape(v) != shape.as_slice() {
                return shape_err(format!("sum: {:?} vs {:?}", self.shape(v), shape));
            }
            for (a, &b) in acc.iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let rg = items.iter().any(|&v| self.rg(v));
        let t = Tensor::from_vec(&shape, acc)?;
        Ok(self.push(t, Op::Sum(items.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    /// Mean of equally shaped nodes.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.len() == 1 {
            return Ok(items[0]);
        }
        let s = self.sum(items)?;
        Ok(self.scale(s, S::one() / S::lit(items.len() as f64)))
    }

    /// Batch normalization; `running` supplies the statistics used in eval mode.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[S], &[S]),
        epsilon: S,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let dims = ops::as_batched(&xs)?;
        let (y, cache) = ops::batchnorm_forward_raw(
            dims,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
            epsilon,
            mode,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_vec(&xs, y)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    /// Batch mean and unbiased variance recorded by a train-mode normalization node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[S], &[S])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { cache, .. } => cache
                .batch_stats
                .as_ref()
                .map(|(m, s)| (m.as_slice(), s.as_slice())),
            _ => None,
        }
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = ops::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(t, Op::Act(x, kind), rg)
    }

    pub fn avgpool(&mut self, x: Var) -> Result<Var> {
        let pooled = ops::avgpool(self.value(x))?;
        let dims = ops::as_batched(self.shape(x))?;
        let rg = self.rg(x);
        let [b, c, h, w] = dims;
        let t = pooled.reshape(&[b, c, h / ops::POOL, w / ops::POOL])?;
        Ok(self.push(t, Op::Pool { x, dims }, rg))
    }

    /// Factorized readout: `x [B,C,Hp,Wp]`, `mask [N,Hp,Wp]`, `features [N,C]`, `bias [N]` to `[B,N]`.
    pub fn readout(&mut self, x: Var, mask: Var, features: Var, bias: Var) -> Result<Var> {
        let [batch, channels, h, w] = ops::as_batched(self.shape(x))?;
        let ms = self.shape(mask).to_vec();
        let fs = self.shape(features).to_vec();
        let neurons = ms.first().copied().unwrap_or(0);
        if ms != [neurons, h, w] || fs != [neurons, channels] || self.shape(bias) != [neurons] {
            return shape_err(format!(
                "readout: input [{batch},{channels},{h},{w}], mask {ms:?}, features {fs:?}, bias {:?}",
                self.shape(bias)
            ));
        }
        let dims = ReadoutDims {
            batch,
            channels,
            hw: h * w,
            neurons,
        };
        let (out, proj) = ops::readout_forward_raw(
            dims,
            self.value(x).data(),
            self.value(mask).data(),
            self.value(features).data(),
            self.value(bias).data(),
        );
        let rg = [x, mask, features, bias].iter().any(|&v| self.rg(v));
        let t = Tensor::from_vec(&[batch, neurons], out)?;
        Ok(self.push(
            t,
            Op::Readout {
                x,
                mask,
                features,
                bias,
                dims,
                proj,
            },
            rg,
        ))
    }

    /// Mean prediction loss over all entries.
    ///
    /// MSE is `mean (p - r)^2`; Poisson is `mean (p - r ln p)` with `p` clamped below at
    /// [`POISSON_FLOOR`].
    pub fn loss(&mut self, pred: Var, target: &Tensor<S>, kind: LossKind) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return shape_err(format!(
                "loss: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            ));
        }
        if !p.is_finite() || !target.is_finite() {
            return Err(Error::Numerical("non-finite input to prediction loss".into()));
        }
        let value = prediction_loss_raw(p.data(), target.data(), kind);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Loss {
                pred,
                target: target.data().to_vec(),
                kind,
            },
            rg,
        ))
    }

    /// `sum |x|`.
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|a| a.abs()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::AbsSum(x), rg)
    }

    /// Sum of squared interior Laplacian responses of every `k x k` kernel slice.
    pub fn laplacian_sq(&mut self, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let &[co, ci, k, k2] = ws.as_slice() else {
            return shape_err("laplacian penalty needs a [C_out,C_in,k,k] kernel");
        };
        if k != k2 || k < 3 {
            return shape_err(format!("laplacian penalty needs k >= 3, got {k}x{k2}"));
        }
        let lap = ops::laplacian_interior(self.value(w).data(), co * ci, k);
        let v = lap.iter().map(|&a| a * a).sum();
        let rg = self.rg(w);
        Ok(self.push(
            Tensor::scalar(v),
            Op::LaplacianSq {
                w,
                slices: co * ci,
                k,
                lap,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::SumAll(x), rg)
    }

    /// `0.5 * sum x^2`.
    pub fn half_sum_sq(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|&a| a * a).sum::<S>() * S::lit(0.5);
        let rg = self.rg(x);
        self.push(Tensor::scalar(v), Op::HalfSumSq(x), rg)
    }

    // -- gradients ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`, filling gradients of every node that
    /// depends on a differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, d: &[S]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (a, &b) in buf.iter_mut().zip(d) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(d.to_vec()),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                let (dx, dw) = ops::conv2d_backward_raw(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, &dx);
                }
                if let Some(dw) = dw {
                    acc(*w, &dw);
                }
            }
            Op::Sum(items) => {
                for &v in items {
                    acc(v, g);
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<S> = g.iter().map(|&a| a * *s).collect();
                acc(*x, &d);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) = ops::batchnorm_backward_raw(
                    cache,
                    self.value(*gamma).data(),
                    g,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, &dx);
                }
                acc(*gamma, &dgamma);
                acc(*beta, &dbeta);
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let d: Vec<S> = g
                    .iter()
                    .zip(xv)
                    .map(|(&a, &z)| a * kind.derivative(z))
                    .collect();
                acc(*x, &d);
            }
            Op::Pool { x, dims } => {
                let d = ops::avgpool_backward_raw(*dims, g);
                acc(*x, &d);
            }
            Op::Readout {
                x,
                mask,
                features,
                bias,
                dims,
                proj,
            } => {
                let (dx, dmask, dfeat, dbias) = ops::readout_backward_raw(
                    *dims,
                    self.value(*x).data(),
                    self.value(*mask).data(),
                    self.value(*features).data(),
                    proj,
                    g,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    acc(*x, &dx);
                }
                acc(*mask, &dmask);
                acc(*features, &dfeat);
                acc(*bias, &dbias);
            }
            Op::Loss { pred, target, kind } => {
                let p = self.value(*pred).data();
                let d = prediction_loss_grad_raw(p, target, *kind, g[0]);
                acc(*pred, &d);
            }
            Op::AbsSum(x) => {
                let d: Vec<S> = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|&a| {
                        if a > S::zero() {
                            g[0]
                        } else if a < S::zero() {
                            -g[0]
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                acc(*x, &d);
            }
            Op::LaplacianSq { w, slices, k, lap } => {
                let two = S::lit(2.0) * g[0];
                let dlap: Vec<S> = lap.iter().map(|&a| two * a).collect();
                let d = ops::laplacian_interior_adjoint(&dlap, *slices, *k);
                acc(*w, &d);
            }
            Op::SumAll(x) => {
                let d = vec![g[0]; self.value(*x).len()];
                acc(*x, &d);
            }
            Op::HalfSumSq(x) => {
                let d: Vec<S> = self.value(*x).data().iter().map(|&a| a * g[0]).collect();
                acc(*x, &d);
            }
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Asking for the gradient of a leaf that was not marked differentiable is an error.
    pub fn grad(&self, v: Var) -> Result<Vec<S>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return Err(Error::Graph(format!(
                "node {} is detached (requires_grad = false)",
                v.0
            )));
        }
        Ok(self
            .grads
            .get(v.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![S::zero(); node.value.len()]))
    }

    /// Copy of a leaf's value with its gradient buffer filled.
    pub fn leaf_with_grad(&self, v: Var) -> Result<Tensor<S>> {
        let mut t = self.value(v).clone();
        t.requires_grad = true;
        t.set_grad(self.grad(v)?)?;
        Ok(t)
    }
}

pub(crate) fn prediction_loss_raw<S: Scalar>(p: &[S], r: &[S], kind: LossKind) -> S {
    let n = S::lit(p.len().max(1) as f64);
    let floor = S::lit(POISSON_FLOOR);
    let total: S = match kind {
        LossKind::Mse => p.iter().zip(r).map(|(&a, &b)| (a - b) * (a - b)).sum(),
        LossKind::Poisson => p
            .iter()
            .zip(r)
            .map(|(&a, &b)| {
                let a = a.max(floor);
                a - b * a.ln()
            })
            .sum(),
    };
    total / n
}

fn prediction_loss_grad_raw<S: Scalar>(p: &[S], r: &[S], kind: LossKind, g: S) -> Vec<S> {
    let scale = g / S::lit(p.len().max(1) as f64);
    let floor = S::lit(POISSON_FLOOR);
    match kind {
        LossKind::Mse => p
            .iter()
            .zip(r)
            .map(|(&a, &b)| scale * S::lit(2.0) * (a - b))
            .collect(),
        LossKind::Poisson => p
            .iter()
            .zip(r)
            .map(|(&a, &b)| {
                if a < floor {
                    S::zero()
                } else {
                    scale * (S::one() - b / a)
                }
            })
            .collect(),
    }
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_difference_check<S, F>(f: F, x: &Tensor<S>, step: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv)?;

    let eval = |t: Tensor<S>| -> Result<S> {
        let mut g = Graph::new();
        let v = g.param(t);
        let l = f(&mut g, v)?;
        Ok(g.value(l).data()[0])
    };
    let two = S::lit(2.0);
    let mut worst = S::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (two * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(S::one());
        worst = worst.max(err);
    }
    Ok(worst)
}
