//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so every parent has a smaller
//! index than its child and `backward` is a single reverse sweep.

use rand::Rng;

use super::gemm::{gemm, View, ViewMut};
use super::{ParamSet, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SelectRow {
        x: Var,
        row: usize,
    },
    WeightedSse {
        pred: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `dx = y ⊙ (g − Σ g⊙y)` for one softmax row.
fn softmax_row_backward(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *d = yi * (gi - dot);
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`; empty
    /// when no gradient reached the node.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "input",
                a: (rows, cols),
                b: (data.len(), 1),
            });
        }
        Ok(self.push(rows, cols, data, false, Op::Input))
    }

    /// A differentiable input with tracked gradient (used by gradient checks).
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, TensorError> {
        let v = self.input(rows, cols, data)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// Copy parameter block `idx` of `set` into the graph as a leaf.
    pub fn param(&mut self, set: &ParamSet, idx: usize) -> Var {
        let b = &set.blocks[idx];
        self.push(b.rows, b.cols, b.data.clone(), b.requires_grad, Op::Param(idx))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                a: (m, k),
                b: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::new(self.value(a), m, k),
            View::new(self.value(b), k, n),
            0.0,
            ViewMut::new(&mut out, m, n),
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::MatMul(a, b)))
    }

    /// `x + b` with the `1 × n` row `b` broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        if self.shape(b) != (1, n) {
            return Err(TensorError::Shape {
                op: "add_bias",
                a: (m, n),
                b: self.shape(b),
            });
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, bi) in row.iter_mut().zip(bias) {
                *o += bi;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op: "add",
                a: self.shape(a),
                b: self.shape(b),
            });
        }
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, ng, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(m, n, out, ng, Op::Relu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_row(row);
        }
        let ng = self.needs(x);
        self.push(m, n, out, ng, Op::SoftmaxRows(x))
    }

    /// Per-row normalization followed by the affine `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, n) {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    a: (m, n),
                    b: self.shape(p),
                });
            }
        }
        let xs = self.value(x);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                xhat[r * n + c] = (row[c] - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, xh)| g[i % n] * xh + b[i % n])
            .collect();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            m,
            n,
            out,
            ng,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale the
    /// rest by `1 / (1 − p)`. `p = 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let (m, n) = self.shape(x);
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..m * n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, k)| v * k).collect();
        let ng = self.needs(x);
        Ok(self.push(m, n, out, ng, Op::Dropout { x, mask }))
    }

    /// Multi-head scaled dot-product attention without masking.
    /// `q` is `m × d`, `k` and `v` are `n × d`; heads split the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
        let (m, d) = self.shape(q);
        let (n, dk_) = self.shape(k);
        if dk_ != d || self.shape(v) != (n, d) {
            return Err(TensorError::Shape {
                op: "attention",
                a: (m, d),
                b: if dk_ != d { (n, dk_) } else { self.shape(v) },
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("{heads} heads do not divide width {d}")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for h in 0..heads {
            let p = &mut probs[h * m * n..(h + 1) * m * n];
            gemm(
                scale,
                View::cols_of(qv, m, d, h * hd, hd),
                View::cols_of(kv, n, d, h * hd, hd).t(),
                0.0,
                ViewMut::new(p, m, n),
            );
            for row in p.chunks_mut(n.max(1)) {
                softmax_row(row);
            }
            gemm(
                1.0,
                View::new(p, m, n),
                View::cols_of(vv, n, d, h * hd, hd),
                0.0,
                ViewMut::cols_of(&mut out, m, d, h * hd, hd),
            );
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            m,
            d,
            out,
            ng,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Row `row` of `x` as a `1 × n` tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var, TensorError> {
        let (m, n) = self.shape(x);
        if row >= m {
            return Err(TensorError::Shape {
                op: "select_row",
                a: (m, n),
                b: (row, n),
            });
        }
        let out = self.value(x)[row * n..(row + 1) * n].to_vec();
        let ng = self.needs(x);
        Ok(self.push(1, n, out, ng, Op::SelectRow { x, row }))
    }

    /// Scalar `Σ wᵢ (predᵢ − targetᵢ)² / norm` over the flattened `pred`.
    pub fn weighted_sse(
        &mut self,
        pred: Var,
        target: &[f64],
        weights: &[f64],
        norm: f64,
    ) -> Result<Var, TensorError> {
        let len = self.value(pred).len();
        if target.len() != len || weights.len() != len {
            return Err(TensorError::Shape {
                op: "weighted_sse",
                a: self.shape(pred),
                b: (target.len(), weights.len()),
            });
        }
        if !(norm > 0.0) {
            return Err(TensorError::Invalid(format!("loss normalizer {norm} must be > 0")));
        }
        let loss = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((p, t), w)| w * (p - t) * (p - t))
            .sum::<f64>()
            / norm;
        let ng = self.needs(pred);
        Ok(self.push(
            1,
            1,
            vec![loss],
            ng,
            Op::WeightedSse {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                norm,
            },
        ))
    }

    /// Reverse sweep from the scalar node `loss`. Gradients from a previous
    /// call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.shape(loss) != (1, 1) {
            return Err(TensorError::Shape {
                op: "backward",
                a: self.shape(loss),
                b: (1, 1),
            });
        }
        for node in &mut self.nodes {
            node.grad.clear();
        }
        self.nodes[loss.0].grad = vec![1.0];
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if node.grad.is_empty() || !node.needs_grad {
                continue;
            }
            let g = std::mem::take(&mut node.grad);
            backprop(before, node, &g);
            rest[0].grad = g;
        }
        Ok(())
    }

    /// Add the gradients of all parameter leaves into `set`'s grad buffers.
    pub fn accumulate_into(&self, set: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Param(idx) = node.op {
                if !node.grad.is_empty() {
                    set.blocks[idx].accumulate_grad(&node.grad);
                }
            }
        }
    }
}

/// Add `delta` into the gradient of `v`, allocating it on first use.
fn acc(nodes: &mut [Node], v: Var, delta: &[f64]) {
    let node = &mut nodes[v.0];
    if !node.needs_grad {
        return;
    }
    if node.grad.is_empty() {
        node.grad = delta.to_vec();
    } else {
        for (g, d) in node.grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

fn backprop(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let (m, n) = (node.rows, node.cols);
    match &node.op {
        Op::Input | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let k = nodes[a.0].cols;
            if nodes[a.0].needs_grad {
                let mut da = vec![0.0; m * k];
                gemm(
                    1.0,
                    View::new(g, m, n),
                    View::new(&nodes[b.0].value, k, n).t(),
                    0.0,
                    ViewMut::new(&mut da, m, k),
                );
                acc(nodes, a, &da);
            }
            if nodes[b.0].needs_grad {
                let mut db = vec![0.0; k * n];
                gemm(
                    1.0,
                    View::new(&nodes[a.0].value, m, k).t(),
                    View::new(g, m, n),
                    0.0,
                    ViewMut::new(&mut db, k, n),
                );
                acc(nodes, b, &db);
            }
        }
        Op::AddBias(x, b) => {
            acc(nodes, *x, g);
            if nodes[b.0].needs_grad {
                let mut db = vec![0.0; n];
                for row in g.chunks(n.max(1)) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                acc(nodes, *b, &db);
            }
        }
        Op::Add(a, b) => {
            acc(nodes, *a, g);
            acc(nodes, *b, g);
        }
        Op::Relu(x) => {
            let dx: Vec<f64> = node
                .value
                .iter()
                .zip(g)
                .map(|(y, gi)| if *y > 0.0 { *gi } else { 0.0 })
                .collect();
            acc(nodes, *x, &dx);
        }
        Op::SoftmaxRows(x) => {
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                let s = r * n..(r + 1) * n;
                softmax_row_backward(&node.value[s.clone()], &g[s.clone()], &mut dx[s]);
            }
            acc(nodes, *x, &dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            if nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad {
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for i in 0..m * n {
                    dg[i % n] += g[i] * xhat[i];
                    db[i % n] += g[i];
                }
                acc(nodes, gamma, &dg);
                acc(nodes, beta, &db);
            }
            if nodes[x.0].needs_grad {
                let gam = &nodes[gamma.0].value;
                let mut dx = vec![0.0; m * n];
                let nf = n as f64;
                for r in 0..m {
                    let s = r * n;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..n {
                        let d = g[s + c] * gam[c];
                        sum_d += d;
                        sum_dx += d * xhat[s + c];
                    }
                    for c in 0..n {
                        let d = g[s + c] * gam[c];
                        dx[s + c] = inv_std[r] / nf * (nf * d - sum_d - xhat[s + c] * sum_dx);
                    }
                }
                acc(nodes, x, &dx);
            }
        }
        Op::Dropout { x, mask } => {
            let dx: Vec<f64> = g.iter().zip(mask).map(|(a, b)| a * b).collect();
            acc(nodes, *x, &dx);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (q, k, v, heads) = (*q, *k, *v, *heads);
            let d = n;
            let nk = nodes[k.0].rows;
            let hd = d / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let mut dq = vec![0.0; m * d];
            let mut dk = vec![0.0; nk * d];
            let mut dv = vec![0.0; nk * d];
            let mut dp = vec![0.0; m * nk];
            let mut ds = vec![0.0; m * nk];
            for h in 0..heads {
                let p = &probs[h * m * nk..(h + 1) * m * nk];
                let go = View::cols_of(g, m, d, h * hd, hd);
                gemm(
                    1.0,
                    View::new(p, m, nk).t(),
                    go,
                    0.0,
                    ViewMut::cols_of(&mut dv, nk, d, h * hd, hd),
                );
                gemm(
                    1.0,
                    go,
                    View::cols_of(&nodes[v.0].value, nk, d, h * hd, hd).t(),
                    0.0,
                    ViewMut::new(&mut dp, m, nk),
                );
                for r in 0..m {
                    let s = r * nk..(r + 1) * nk;
                    softmax_row_backward(&p[s.clone()], &dp[s.clone()], &mut ds[s]);
                }
                gemm(
                    scale,
                    View::new(&ds, m, nk),
                    View::cols_of(&nodes[k.0].value, nk, d, h * hd, hd),
                    0.0,
                    ViewMut::cols_of(&mut dq, m, d, h * hd, hd),
                );
                gemm(
                    scale,
                    View::new(&ds, m, nk).t(),
                    View::cols_of(&nodes[q.0].value, m, d, h * hd, hd),
                    0.0,
                    ViewMut::cols_of(&mut dk, nk, d, h * hd, hd),
                );
            }
            acc(nodes, q, &dq);
            acc(nodes, k, &dk);
            acc(nodes, v, &dv);
        }
        Op::SelectRow { x, row } => {
            let (xm, xn) = (nodes[x.0].rows, nodes[x.0].cols);
            if nodes[x.0].needs_grad {
                let mut dx = vec![0.0; xm * xn];
                dx[row * xn..(row + 1) * xn].copy_from_slice(g);
                acc(nodes, *x, &dx);
            }
        }
        Op::WeightedSse {
            pred,
            target,
            weights,
            norm,
        } => {
            let pv = &nodes[pred.0].value;
            let dp: Vec<f64> = pv
                .iter()
                .zip(target)
                .zip(weights)
                .map(|((p, t), w)| g[0] * 2.0 * w * (p - t) / norm)
                .collect();
            acc(nodes, *pred, &dp);
        }
    }
}
