//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! A [`Graph`] records every op as it runs. Parameters are referenced from a
//! [`ParamStore`] by index instead of being copied onto the tape. `backward`
//! walks the tape once in reverse and returns gradients for the nodes and
//! parameters that need them.

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor, View};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(usize),
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f64 },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, heads: usize, probs: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Patchify { x: Var, index: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Assemble { x: Var, token: Var, slots: Vec<Option<usize>> },
    SoftmaxGroups { x: Var, group: usize },
    Mse { pred: Var, target: Vec<f64> },
    L1 { pred: Var, target: Vec<f64>, weight: Vec<f64> },
    Focal { probs: Var, labels: Vec<Option<usize>>, alpha: Vec<f64>, gamma: f64, classes: usize },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, i: usize) -> Option<&Tensor> {
        self.params.get(i).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const PROB_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

impl<'p> Graph<'p> {
    pub fn new(params: Option<&'p ParamStore>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(i) => self.params.expect("param graph").get(*i),
        }
    }

    fn push(&mut self, t: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Parameter `i` of the store; frozen parameters get no gradient.
    pub fn param(&mut self, i: usize) -> Var {
        let store = self.params.expect("graph built without a parameter store");
        self.nodes.push(Node {
            value: Value::Param(i),
            op: Op::Leaf,
            needs_grad: !store.is_frozen(i),
        });
        Var(self.nodes.len() - 1)
    }

    /// `x(m x k) * w(k x n) + b(n)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.value(x).dims2();
        let ws = &self.value(w).shape;
        if ws.len() != 2 || ws[0] != k {
            return shape_err(format!("linear: input {m}x{k} vs weight {ws:?}"));
        }
        let n = ws[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n {
                return shape_err(format!("linear: bias {} vs {n}", bv.len()));
            }
            for i in 0..m {
                out[i * n..(i + 1) * n].copy_from_slice(&bv.data);
            }
        }
        gemm(m, k, n, 1.0, View::rows(&self.value(x).data, k), View::rows(&self.value(w).data, n), 1.0, &mut out, n);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Linear { x, w, b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return shape_err(format!("matmul: {m}x{k} by {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(&self.value(a).data, k), View::rows(&self.value(b).data, n), 0.0, &mut out, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return shape_err(format!("add: {:?} vs {:?}", ta.shape, tb.shape));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|v| v * s).collect(),
        };
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, s }, ng)
    }

    /// Normalizes each row, then applies `g` and `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(g).len() != n || self.value(b).len() != n {
            return shape_err(format!("layer_norm: width {n}"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(g), self.value(b));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &tx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        let shape = tx.shape.clone();
        let ng = self.ng(x) || self.ng(g) || self.ng(b);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, g, b, xhat, rstd }, ng))
    }

    /// Multi-head scaled dot-product self-attention over packed `[q | k | v]` rows.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let (m, w3) = self.value(qkv).dims2();
        if heads == 0 || w3 % (3 * heads) != 0 {
            return shape_err(format!("attention: width {w3} with {heads} heads"));
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let data = &self.value(qkv).data;
        let mut probs = vec![0.0; heads * m * m];
        let mut out = vec![0.0; m * d];
        for h in 0..heads {
            let p = &mut probs[h * m * m..(h + 1) * m * m];
            let q = View::strided(&data[h * dh..], w3, 1);
            let kt = View::strided(&data[d + h * dh..], 1, w3);
            gemm(m, dh, m, scale, q, kt, 0.0, p, m);
            for i in 0..m {
                let row = &mut p[i * m..(i + 1) * m];
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            let v = View::strided(&data[2 * d + h * dh..], w3, 1);
            gemm(m, m, dh, 1.0, View::rows(p, m), v, 0.0, &mut out[h * dh..], d);
        }
        let ng = self.ng(qkv);
        Ok(self.push(Tensor { shape: vec![m, d], data: out }, Op::Attention { qkv, heads, probs }, ng))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().map(|&v| f(v)).collect(),
        };
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus { x })
    }

    /// Multiplies by a precomputed mask (already scaled by `1 / keep`).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return shape_err(format!("dropout: mask {} vs {}", mask.len(), tx.len()));
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data: tx.data.iter().zip(&mask).map(|(a, b)| a * b).collect(),
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Cuts an `h x w x t` volume into non-overlapping `(ph, pw, pt)` patches,
    /// one token row each, patches and voxels both in row-major order.
    pub fn patchify(&mut self, x: Var, patch: [usize; 3]) -> Result<Var> {
        let tx = self.value(x);
        let [h, w, t] = match tx.shape.as_slice() {
            [h, w, t] => [*h, *w, *t],
            s => return shape_err(format!("patchify: need a 3D volume, got {s:?}")),
        };
        let index = patch_index([h, w, t], patch)?;
        let p = patch[0] * patch[1] * patch[2];
        let data = index.iter().map(|&i| tx.data[i]).collect();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: vec![index.len() / p, p],
                data,
            },
            Op::Patchify { x, index },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if rows.iter().any(|&r| r >= m) {
            return shape_err(format!("gather_rows: index out of {m} rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(tx.row(r));
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::GatherRows { x, rows: rows.to_vec() },
            ng,
        ))
    }

    /// Full token sequence: slot `i` takes row `slots[i]` of `x`, or `token` when `None`.
    pub fn assemble(&mut self, x: Var, token: Var, slots: &[Option<usize>]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(token).len() != n {
            return shape_err(format!("assemble: token width {} vs {n}", self.value(token).len()));
        }
        let mut used = vec![false; m];
        for s in slots.iter().flatten() {
            if *s >= m || std::mem::replace(&mut used[*s], true) {
                return Err(NnError::Index(format!("assemble: row {s} missing or reused")));
            }
        }
        let (tx, tt) = (self.value(x), self.value(token));
        let mut data = Vec::with_capacity(slots.len() * n);
        for s in slots {
            match s {
                Some(r) => data.extend_from_slice(tx.row(*r)),
                None => data.extend_from_slice(&tt.data),
            }
        }
        let ng = self.ng(x) || self.ng(token);
        Ok(self.push(
            Tensor {
                shape: vec![slots.len(), n],
                data,
            },
            Op::Assemble {
                x,
                token,
                slots: slots.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax over consecutive groups of `group` entries.
    pub fn softmax_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        if group == 0 || tx.len() % group != 0 {
            return shape_err(format!("softmax_groups: {} values in groups of {group}", tx.len()));
        }
        let mut data = tx.data.clone();
        for g in data.chunks_mut(group) {
            let mx = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in g.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in g.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor {
            shape: tx.shape.clone(),
            data,
        };
        let ng = self.ng(x);
        Ok(self.push(t, Op::SoftmaxGroups { x, group }, ng))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() || target.is_empty() {
            return shape_err(format!("mse: {} vs {}", tp.len(), target.len()));
        }
        let l = tp.data.iter().zip(&target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / target.len() as f64;
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(l), Op::Mse { pred, target }, ng))
    }

    /// `sum(w * |pred - target|) / sum(w)`; zero when every weight is zero.
    pub fn l1(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() || tp.len() != weight.len() {
            return shape_err(format!("l1: {} vs {} vs {}", tp.len(), target.len(), weight.len()));
        }
        let wsum: f64 = weight.iter().sum();
        let l = if wsum > 0.0 {
            tp.data
                .iter()
                .zip(&target)
                .zip(&weight)
                .map(|((p, t), w)| w * (p - t).abs())
                .sum::<f64>()
                / wsum
        } else {
            0.0
        };
        let ng = self.ng(pred);
        Ok(self.push(Tensor::scalar(l), Op::L1 { pred, target, weight }, ng))
    }

    /// Mean over labelled voxels of `-alpha_c (1 - p_c)^gamma ln p_c`.
    ///
    /// `probs` holds `classes` consecutive probabilities per voxel; voxels with
    /// label `None` are ignored. `p_c` is floored at 1e-12.
    pub fn focal(&mut self, probs: Var, labels: Vec<Option<usize>>, alpha: Vec<f64>, gamma: f64) -> Result<Var> {
        let classes = alpha.len();
        let tp = self.value(probs);
        if classes == 0 || tp.len() != labels.len() * classes {
            return shape_err(format!("focal: {} probabilities for {} voxels", tp.len(), labels.len()));
        }
        if labels.iter().flatten().any(|&c| c >= classes) {
            return Err(NnError::Index("focal: label out of range".into()));
        }
        let l = focal_value(&tp.data, &labels, &alpha, gamma);
        let ng = self.ng(probs);
        Ok(self.push(
            Tensor::scalar(l),
            Op::Focal {
                probs,
                labels,
                alpha,
                gamma,
                classes,
            },
            ng,
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return shape_err("weighted_sum: terms must be scalars".into());
            }
            s += w * t.data[0];
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { terms: terms.to_vec() }, ng))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        let n_params = self.params.map_or(0, |p| p.len());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&self.value(loss).shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_op(&node.op, Var(i), &gy, &mut grads);
            if let Value::Param(p) = node.value {
                accumulate(&mut pgrads[p], gy.clone());
            }
            grads[i] = Some(gy);
        }
        Grads {
            nodes: grads,
            params: pgrads,
        }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.ng(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn backward_op(&self, op: &Op, y: Var, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let like = |v: Var, data: Vec<f64>| Tensor {
            shape: self.value(v).shape.clone(),
            data,
        };
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (m, k) = self.value(*x).dims2();
                let n = self.value(*w).shape[1];
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, View::rows(&gy.data, n), View::t(&self.value(*w).data, n), 0.0, &mut dx, k);
                    self.send(grads, *x, like(*x, dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, View::t(&self.value(*x).data, k), View::rows(&gy.data, n), 0.0, &mut dw, n);
                    self.send(grads, *w, like(*w, dw));
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    let mut db = vec![0.0; n];
                    for r in gy.data.chunks(n) {
                        for (d, g) in db.iter_mut().zip(r) {
                            *d += g;
                        }
                    }
                    self.send(grads, b, like(b, db));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                if self.ng(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, View::rows(&gy.data, n), View::t(&self.value(*b).data, n), 0.0, &mut da, k);
                    self.send(grads, *a, like(*a, da));
                }
                if self.ng(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, View::t(&self.value(*a).data, k), View::rows(&gy.data, n), 0.0, &mut db, n);
                    self.send(grads, *b, like(*b, db));
                }
            }
            Op::Add { a, b } => {
                self.send(grads, *a, gy.clone());
                self.send(grads, *b, gy.clone());
            }
            Op::Scale { x, s } => {
                self.send(grads, *x, like(*x, gy.data.iter().map(|g| g * s).collect()));
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let (m, n) = self.value(*x).dims2();
                let gam = &self.value(*g).data;
                if self.ng(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let gyr = &gy.data[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            let d = gyr[j] * gam[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            dx[i * n + j] = rstd[i] * (gyr[j] * gam[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.send(grads, *x, like(*x, dx));
                }
                if self.ng(*g) || self.ng(*b) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gy.data[i * n + j] * xhat[i * n + j];
                            db[j] += gy.data[i * n + j];
                        }
                    }
                    self.send(grads, *g, like(*g, dg));
                    self.send(grads, *b, like(*b, db));
                }
            }
            Op::Attention { qkv, heads, probs } => {
                let (m, w3) = self.value(*qkv).dims2();
                let d = w3 / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let data = &self.value(*qkv).data;
                let mut dqkv = vec![0.0; m * w3];
                let mut dp = vec![0.0; m * m];
                for h in 0..*heads {
                    let p = &probs[h * m * m..(h + 1) * m * m];
                    let go = View::strided(&gy.data[h * dh..], d, 1);
                    // dV = P^T dO
                    gemm(m, m, dh, 1.0, View::t(p, m), go, 0.0, &mut dqkv[2 * d + h * dh..], w3);
                    // dP = dO V^T
                    let vt = View::strided(&data[2 * d + h * dh..], 1, w3);
                    gemm(m, dh, m, 1.0, go, vt, 0.0, &mut dp, m);
                    // dS = P * (dP - rowsum(dP * P)), scaled
                    for i in 0..m {
                        let pr = &p[i * m..(i + 1) * m];
                        let dr = &mut dp[i * m..(i + 1) * m];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (dv, pv) in dr.iter_mut().zip(pr) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dQ = dS K ; dK = dS^T Q
                    let k = View::strided(&data[d + h * dh..], w3, 1);
                    gemm(m, m, dh, 1.0, View::rows(&dp, m), k, 0.0, &mut dqkv[h * dh..], w3);
                    let q = View::strided(&data[h * dh..], w3, 1);
                    gemm(m, m, dh, 1.0, View::t(&dp, m), q, 0.0, &mut dqkv[d + h * dh..], w3);
                }
                self.send(grads, *qkv, like(*qkv, dqkv));
            }
            Op::Gelu { x } => {
                let tx = self.value(*x);
                let d = tx.data.iter().zip(&gy.data).map(|(v, g)| g * gelu_grad(*v)).collect();
                self.send(grads, *x, like(*x, d));
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                let d = tx.data.iter().zip(&gy.data).map(|(v, g)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.send(grads, *x, like(*x, d));
            }
            Op::Sigmoid { x } => {
                let ty = self.value(y);
                let d = ty.data.iter().zip(&gy.data).map(|(s, g)| g * s * (1.0 - s)).collect();
                self.send(grads, *x, like(*x, d));
            }
            Op::Softplus { x } => {
                let tx = self.value(*x);
                let d = tx.data.iter().zip(&gy.data).map(|(v, g)| g * sigmoid(*v)).collect();
                self.send(grads, *x, like(*x, d));
            }
            Op::Dropout { x, mask } => {
                let d = gy.data.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.send(grads, *x, like(*x, d));
            }
            Op::Patchify { x, index } => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (g, &i) in gy.data.iter().zip(index) {
                    d[i] += g;
                }
                self.send(grads, *x, like(*x, d));
            }
            Op::GatherRows { x, rows } => {
                let (m, n) = self.value(*x).dims2();
                let mut d = vec![0.0; m * n];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        d[r * n + j] += gy.data[k * n + j];
                    }
                }
                self.send(grads, *x, like(*x, d));
            }
            Op::Assemble { x, token, slots } => {
                let (m, n) = self.value(*x).dims2();
                let mut dx = vec![0.0; m * n];
                let mut dt = vec![0.0; n];
                for (k, s) in slots.iter().enumerate() {
                    let g = &gy.data[k * n..(k + 1) * n];
                    let dst = match s {
                        Some(r) => &mut dx[r * n..(r + 1) * n],
                        None => &mut dt[..],
                    };
                    for (a, b) in dst.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                self.send(grads, *x, like(*x, dx));
                self.send(grads, *token, like(*token, dt));
            }
            Op::SoftmaxGroups { x, group } => {
                let ty = self.value(y);
                let mut d = vec![0.0; ty.len()];
                for ((dg, yg), gg) in d.chunks_mut(*group).zip(ty.data.chunks(*group)).zip(gy.data.chunks(*group)) {
                    let dot: f64 = yg.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dg.iter_mut().zip(yg).zip(gg) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.send(grads, *x, like(*x, d));
            }
            Op::Mse { pred, target } => {
                let tp = self.value(*pred);
                let c = 2.0 * gy.data[0] / target.len() as f64;
                let d = tp.data.iter().zip(target).map(|(p, t)| c * (p - t)).collect();
                self.send(grads, *pred, like(*pred, d));
            }
            Op::L1 { pred, target, weight } => {
                let tp = self.value(*pred);
                let wsum: f64 = weight.iter().sum();
                let c = if wsum > 0.0 { gy.data[0] / wsum } else { 0.0 };
                let d = tp
                    .data
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((p, t), w)| c * w * sign(p - t))
                    .collect();
                self.send(grads, *pred, like(*pred, d));
            }
            Op::Focal {
                probs,
                labels,
                alpha,
                gamma,
                classes,
            } => {
                let tp = self.value(*probs);
                let count = labels.iter().flatten().count();
                let mut d = vec![0.0; tp.len()];
                if count > 0 {
                    let c = gy.data[0] / count as f64;
                    for (v, lab) in labels.iter().enumerate() {
                        let Some(k) = *lab else { continue };
                        let p = tp.data[v * classes + k];
                        if p < PROB_FLOOR {
                            continue;
                        }
                        let one = 1.0 - p;
                        let mut dl = one.powf(*gamma) / p;
                        if *gamma != 0.0 {
                            dl -= gamma * one.powf(gamma - 1.0) * p.ln();
                        }
                        d[v * classes + k] = -c * alpha[k] * dl;
                    }
                }
                self.send(grads, *probs, like(*probs, d));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    self.send(grads, v, Tensor::scalar(w * gy.data[0]));
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Focal loss value; see [`Graph::focal`].
pub fn focal_value(probs: &[f64], labels: &[Option<usize>], alpha: &[f64], gamma: f64) -> f64 {
    let classes = alpha.len();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, lab) in labels.iter().enumerate() {
        let Some(k) = *lab else { continue };
        let p = probs[v * classes + k].max(PROB_FLOOR);
        sum += -alpha[k] * (1.0 - p).powf(gamma) * p.ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Flat gather index of [`Graph::patchify`].
pub fn patch_index(dims: [usize; 3], patch: [usize; 3]) -> Result<Vec<usize>> {
    let [h, w, t] = dims;
    let [ph, pw, pt] = patch;
    if ph == 0 || pw == 0 || pt == 0 || h % ph != 0 || w % pw != 0 || t % pt != 0 {
        return shape_err(format!("volume {h}x{w}x{t} is not divisible by patch {ph}x{pw}x{pt}"));
    }
    let mut index = Vec::with_capacity(h * w * t);
    for a in 0..h / ph {
        for b in 0..w / pw {
            for c in 0..t / pt {
                for i in 0..ph {
                    for j in 0..pw {
                        let base = ((a * ph + i) * w + b * pw + j) * t + c * pt;
                        index.extend(base..base + pt);
                    }
                }
            }
        }
    }
    Ok(index)
}
