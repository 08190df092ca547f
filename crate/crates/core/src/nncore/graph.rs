use rand::Rng;

use crate::error::{CoreError, Result};
use crate::nncore::params::ParamStore;
use crate::nncore::real::{r, Real};
use crate::nncore::tensor::{layer_norm_forward, linear_forward, softmax_rows, Tensor2D};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Reverse-mode tape over a fixed operation set.
///
/// Nodes are appended in execution order, so walking indices backwards is a
/// valid reverse topological order. Frozen inputs enter as [`Graph::leaf`]
/// and never receive gradients; trainable tensors enter via [`Graph::param`]
/// and their gradients are accumulated back into the owning [`ParamStore`]
/// by [`Graph::backward`].
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

struct Node<R> {
    value: Tensor2D<R>,
    op: Op<R>,
}

enum Op<R> {
    Leaf,
    Param { name: String },
    Linear { x: Var, w: Var, b: Var },
    Matmul { a: Var, b: Var },
    MatmulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, c: R },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: R },
    SoftmaxRows { x: Var },
    Gelu { x: Var },
    Dropout { x: Var, keep: Vec<bool>, keep_scale: R },
    MeanRows { x: Var },
    MseAgainst { x: Var, target: Tensor2D<R>, scale: R },
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2D<R>, op: Op<R>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor2D<R> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> R {
        debug_assert_eq!(self.nodes[v.0].value.shape(), (1, 1));
        self.nodes[v.0].value.get(0, 0)
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, value: Tensor2D<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable input bound to a named parameter in `store`.
    pub fn param(&mut self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        self.push(
            value,
            Op::Param {
                name: name.to_string(),
            },
        );
        Ok(Var(self.nodes.len() - 1))
    }

    /// `xW + b` with the bias broadcast per row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.push(y, Op::Matmul { a, b }))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(y, Op::MatmulNt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let y = self.value(x).scale(c);
        self.push(y, Op::Scale { x, c })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let y = self.value(x).slice_cols(start, len);
        self.push(y, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Precondition("concat of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor2D::zeros(rows, total);
        let mut col = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(CoreError::DimMismatch {
                    op: "concat_cols",
                    left: format!("{rows} rows"),
                    right: format!("{} rows", t.rows()),
                });
            }
            for i in 0..rows {
                let src = t.row(i);
                out.row_mut(i)[col..col + src.len()].copy_from_slice(src);
            }
            col += t.cols();
        }
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> Result<Var> {
        let y = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = softmax_rows(self.value(x));
        self.push(y, Op::SoftmaxRows { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(gelu_scalar);
        self.push(y, Op::Gelu { x })
    }

    /// Inverted dropout. A rate of zero (or `training = false` at the call
    /// site) should skip this node entirely; the builder in `layers` does so.
    pub fn dropout(&mut self, x: Var, rate: R, rng: &mut impl Rng) -> Var {
        debug_assert!(rate > R::zero() && rate < R::one());
        let keep_prob = (R::one() - rate).to_f64();
        let keep: Vec<bool> = (0..self.value(x).data().len())
            .map(|_| rng.gen::<f64>() < keep_prob)
            .collect();
        let keep_scale = r::<R>(1.0 / keep_prob);
        let x_val = self.value(x);
        let mut y = x_val.clone();
        for (v, &k) in y.data_mut().iter_mut().zip(&keep) {
            *v = if k { *v * keep_scale } else { R::zero() };
        }
        self.push(
            y,
            Op::Dropout {
                x,
                keep,
                keep_scale,
            },
        )
    }

    /// Column-wise mean over rows, `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).mean_rows()?;
        Ok(self.push(y, Op::MeanRows { x }))
    }

    /// Mean of two equal-shape tensors.
    pub fn mean_of_two(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.add(a, b)?;
        Ok(self.scale(s, r(0.5)))
    }

    /// `scale * sum((x - target)^2)` as a `1 x 1` node.
    pub fn mse_against(&mut self, x: Var, target: &Tensor2D<R>, scale: R) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(CoreError::DimMismatch {
                op: "mse_against",
                left: format!("{:?}", xv.shape()),
                right: format!("{:?}", target.shape()),
            });
        }
        let sum: R = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &t)| (a - t) * (a - t))
            .sum();
        let y = Tensor2D::new(1, 1, vec![sum * scale])?;
        Ok(self.push(
            y,
            Op::MseAgainst {
                x,
                target: target.clone(),
                scale,
            },
        ))
    }

    /// Reverse pass from a scalar `loss` node; parameter gradients are added
    /// into `store` (existing gradient contents are kept, enabling
    /// accumulation across graphs).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(CoreError::Precondition(format!(
                "backward needs a scalar loss node, got {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(CoreError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor2D<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor2D::new(1, 1, vec![R::one()])?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param { name } => {
                    store.accumulate_grad(name, &dy)?;
                }
                Op::Linear { x, w, b } => {
                    let dx = dy.matmul_nt(self.value(*w))?;
                    let dw = self.value(*x).matmul_tn(&dy)?;
                    let db = dy.sum_rows();
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Matmul { a, b } => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&dy)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatmulNt { a, b } => {
                    let da = dy.matmul(self.value(*b))?;
                    let db = dy.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, dy.clone());
                    accumulate(&mut grads, *b, dy);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, dy.scale(*c));
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for i in 0..dy.rows() {
                        let src = dy.row(i);
                        dx.row_mut(i)[*start..*start + src.len()].copy_from_slice(src);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let dp = dy.slice_cols(col, w);
                        accumulate(&mut grads, p, dp);
                        col += w;
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dgamma, dbeta) =
                        layer_norm_backward(self.value(*x), self.value(*gamma), *eps, &dy);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxRows { x } => {
                    let s = &self.nodes[idx].value;
                    let mut dx = Tensor2D::zeros(s.rows(), s.cols());
                    for i in 0..s.rows() {
                        let srow = s.row(i);
                        let dyrow = dy.row(i);
                        let dot: R = srow.iter().zip(dyrow).map(|(&sv, &dv)| sv * dv).sum();
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = srow[j] * (dyrow[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let mut dx = dy.clone();
                    for (g, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *g = *g * gelu_derivative(v);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, keep, keep_scale } => {
                    let mut dx = dy;
                    for (g, &k) in dx.data_mut().iter_mut().zip(keep) {
                        *g = if k { *g * *keep_scale } else { R::zero() };
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows { x } => {
                    let xv = self.value(*x);
                    let inv = R::one() / r::<R>(xv.rows() as f64);
                    let mut dx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        for (g, &d) in dx.row_mut(i).iter_mut().zip(dy.row(0)) {
                            *g = d * inv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MseAgainst { x, target, scale } => {
                    let d = dy.get(0, 0) * *scale * r::<R>(2.0);
                    let xv = self.value(*x);
                    let mut dx = xv.clone();
                    for (g, &t) in dx.data_mut().iter_mut().zip(target.data()) {
                        *g = (*g - t) * d;
                    }
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor2D<R>>], v: Var, delta: Tensor2D<R>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

/// tanh-form GELU; the derivative below differentiates this exact expression.
fn gelu_scalar<R: Real>(x: R) -> R {
    let c = r::<R>(GELU_C);
    let a = r::<R>(GELU_A);
    let u = c * (x + a * x * x * x);
    r::<R>(0.5) * x * (R::one() + u.tanh())
}

fn gelu_derivative<R: Real>(x: R) -> R {
    let c = r::<R>(GELU_C);
    let a = r::<R>(GELU_A);
    let half = r::<R>(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = R::one() - t * t;
    let du = c * (R::one() + r::<R>(3.0) * a * x * x);
    half * (R::one() + t) + half * x * sech2 * du
}

fn layer_norm_backward<R: Real>(
    x: &Tensor2D<R>,
    gamma: &Tensor2D<R>,
    eps: R,
    dy: &Tensor2D<R>,
) -> (Tensor2D<R>, Tensor2D<R>, Tensor2D<R>) {
    let n = r::<R>(x.cols() as f64);
    let mut dx = Tensor2D::zeros(x.rows(), x.cols());
    let mut dgamma = Tensor2D::zeros(1, x.cols());
    let mut dbeta = Tensor2D::zeros(1, x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().cloned().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let inv_std = R::one() / (var + eps).sqrt();
        let xhat: Vec<R> = row.iter().map(|&v| (v - mean) * inv_std).collect();
        let dyrow = dy.row(i);

        for j in 0..x.cols() {
            let d = dyrow[j];
            let dg = dgamma.get(0, j) + d * xhat[j];
            dgamma.set(0, j, dg);
            let db = dbeta.get(0, j) + d;
            dbeta.set(0, j, db);
        }

        let g: Vec<R> = (0..x.cols()).map(|j| dyrow[j] * gamma.get(0, j)).collect();
        let mean_g = g.iter().cloned().sum::<R>() / n;
        let mean_gx = g
            .iter()
            .zip(&xhat)
            .map(|(&gv, &xv)| gv * xv)
            .sum::<R>()
            / n;
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = inv_std * (g[j] - mean_g - xhat[j] * mean_gx);
        }
    }
    (dx, dgamma, dbeta)
}
