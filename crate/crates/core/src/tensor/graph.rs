use rand::Rng;

use super::kernels::{self, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, split_axis};
use super::{inverse_permutation, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics of one BatchNorm layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Softmax { a: Var, axis: usize },
    Gelu { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Reshape { a: Var },
    BatchNorm { x: Var, gamma: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool, beta: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var },
    Mean { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Tape of recorded ops. Nodes are appended in evaluation order, so every
/// node's inputs precede it and reverse index order is a valid reverse
/// topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, Debug)]
enum MatLayout {
    /// Both operands carry the same batch axes.
    Batched { batch: usize, r: usize, k: usize, c: usize },
    /// Rank-2 right operand shared across the left operand's batch.
    SharedRhs { rows: usize, k: usize, c: usize },
    /// Rank-2 left operand shared across the right operand's batch.
    SharedLhs { batch: usize, r: usize, k: usize, c: usize },
}

fn mat_layout(a: &[usize], b: &[usize]) -> Result<(MatLayout, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (ra, rb) = (a.len(), b.len());
    let (r, k) = (a[ra - 2], a[ra - 1]);
    let (k2, c) = (b[rb - 2], b[rb - 1]);
    if k != k2 {
        return Err(Error::shape("matmul", a, b));
    }
    let (a_batch, b_batch) = (&a[..ra - 2], &b[..rb - 2]);
    let mut out: Vec<usize>;
    let layout = if a_batch == b_batch {
        out = a_batch.to_vec();
        MatLayout::Batched {
            batch: a_batch.iter().product(),
            r,
            k,
            c,
        }
    } else if b_batch.is_empty() {
        out = a_batch.to_vec();
        MatLayout::SharedRhs {
            rows: a_batch.iter().product::<usize>() * r,
            k,
            c,
        }
    } else if a_batch.is_empty() {
        out = b_batch.to_vec();
        MatLayout::SharedLhs {
            batch: b_batch.iter().product(),
            r,
            k,
            c,
        }
    } else {
        return Err(Error::shape("matmul", a, b));
    };
    out.extend([r, c]);
    Ok((layout, out))
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Approximate bytes held by recorded values and saved intermediates.
    pub fn memory_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| {
                let saved = match &n.op {
                    Op::BatchNorm { xhat, inv_std, .. } | Op::LayerNorm { xhat, inv_std, .. } => {
                        xhat.len() + inv_std.len()
                    }
                    Op::Dropout { mask, .. } => mask.len(),
                    _ => 0,
                };
                (n.value.numel() + saved) * std::mem::size_of::<f64>()
            })
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (layout, out_shape) = mat_layout(av.shape(), bv.shape())?;
        let mut out = vec![0.0; out_shape.iter().product()];
        let (ad, bd) = (av.data(), bv.data());
        match layout {
            MatLayout::Batched { batch, r, k, c } => {
                for i in 0..batch {
                    gemm_acc(
                        &ad[i * r * k..(i + 1) * r * k],
                        &bd[i * k * c..(i + 1) * k * c],
                        &mut out[i * r * c..(i + 1) * r * c],
                        r,
                        k,
                        c,
                    );
                }
            }
            MatLayout::SharedRhs { rows, k, c } => gemm_acc(ad, bd, &mut out, rows, k, c),
            MatLayout::SharedLhs { batch, r, k, c } => {
                for i in 0..batch {
                    gemm_acc(
                        ad,
                        &bd[i * k * c..(i + 1) * k * c],
                        &mut out[i * r * c..(i + 1) * r * c],
                        r,
                        k,
                        c,
                    );
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, rg))
    }

    /// Elementwise sum; `b` may have a shape equal to a trailing suffix of
    /// `a`'s shape and is then broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
            return Err(Error::shape("add", ash, bsh));
        }
        let bd = bv.data();
        let n = bd.len();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        let value = Tensor::new(ash.to_vec(), out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] * factor);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", av.shape()),
            ));
        }
        if av.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                msg: "NaN in input".into(),
            });
        }
        let (outer, len, inner) = split_axis(av.shape(), axis);
        let x = av.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax { a, axis }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor::from_fn(av.shape(), |i| gelu_scalar(av.data()[i]));
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let rg = self.needs(&[a]);
        Ok(self.push(
            value,
            Op::Permute {
                a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    /// BatchNorm over the last axis: every other axis is a sample axis.
    /// Training mode uses batch statistics and updates `state`; inference
    /// mode uses the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("batch_norm", xv.shape(), self.shape(p)));
            }
        }
        if state.running_mean.len() != d {
            return Err(Error::shape("batch_norm", xv.shape(), &[state.running_mean.len()]));
        }
        let rows = xv.numel() / d;
        let data = xv.data();
        let (mean, inv_std) = if training {
            let mut mean = vec![0.0; d];
            for row in data.chunks_exact(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; d];
            for row in data.chunks_exact(d) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= rows as f64);
            let unbias = if rows > 1 {
                rows as f64 / (rows as f64 - 1.0)
            } else {
                1.0
            };
            for j in 0..d {
                state.running_mean[j] =
                    (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
                state.running_var[j] =
                    (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j] * unbias;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
            (mean, inv_std)
        } else {
            let inv_std = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.eps).sqrt())
                .collect();
            (state.running_mean.clone(), inv_std)
        };
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(data.len());
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks_exact(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    /// LayerNorm over the last axis of every row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", xv.shape(), self.shape(p)));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut inv_std = Vec::with_capacity(xv.numel() / d);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Rate 0 records nothing and returns `a`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let value = Tensor::from_fn(av.shape(), |i| av.data()[i] * mask[i]);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the `grad` of
    /// every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(Error::invalid(
                "backward",
                "loss does not depend on any leaf that requires grad",
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        index: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => leaf_grads.push((index, g)),
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (layout, _) = mat_layout(av.shape(), bv.shape()).expect("validated in forward");
                let (ad, bd) = (av.data(), bv.data());
                if rg(*a) {
                    let da = slot(grads, *a, ad.len());
                    match layout {
                        MatLayout::Batched { batch, r, k, c } => {
                            for i in 0..batch {
                                gemm_a_bt_acc(
                                    &g[i * r * c..(i + 1) * r * c],
                                    &bd[i * k * c..(i + 1) * k * c],
                                    &mut da[i * r * k..(i + 1) * r * k],
                                    r,
                                    k,
                                    c,
                                );
                            }
                        }
                        MatLayout::SharedRhs { rows, k, c } => gemm_a_bt_acc(&g, bd, da, rows, k, c),
                        MatLayout::SharedLhs { batch, r, k, c } => {
                            for i in 0..batch {
                                gemm_a_bt_acc(
                                    &g[i * r * c..(i + 1) * r * c],
                                    &bd[i * k * c..(i + 1) * k * c],
                                    da,
                                    r,
                                    k,
                                    c,
                                );
                            }
                        }
                    }
                }
                if rg(*b) {
                    let db = slot(grads, *b, bd.len());
                    match layout {
                        MatLayout::Batched { batch, r, k, c } => {
                            for i in 0..batch {
                                gemm_at_b_acc(
                                    &ad[i * r * k..(i + 1) * r * k],
                                    &g[i * r * c..(i + 1) * r * c],
                                    &mut db[i * k * c..(i + 1) * k * c],
                                    r,
                                    k,
                                    c,
                                );
                            }
                        }
                        MatLayout::SharedRhs { rows, k, c } => gemm_at_b_acc(ad, &g, db, rows, k, c),
                        MatLayout::SharedLhs { batch, r, k, c } => {
                            for i in 0..batch {
                                gemm_at_b_acc(
                                    ad,
                                    &g[i * r * c..(i + 1) * r * c],
                                    &mut db[i * k * c..(i + 1) * k * c],
                                    r,
                                    k,
                                    c,
                                );
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if rg(*b) {
                    let n = numel(*b);
                    let db = slot(grads, *b, n);
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                }
                if rg(*a) {
                    let da = slot(grads, *a, g.len());
                    da.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    let da = slot(grads, *a, g.len());
                    da.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
                if rg(*b) {
                    let db = slot(grads, *b, g.len());
                    db.iter_mut().zip(&g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let da = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if rg(*b) {
                    let db = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(&g).for_each(|(d, v)| *d += v * factor);
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let da = slot(grads, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            da[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * gelu_grad_scalar(x[i]);
                }
            }
            Op::Permute { a, axes } => {
                let inv = inverse_permutation(axes);
                let (_, back) = kernels::permute(node.value.shape(), &g, &inv);
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(&back).for_each(|(d, v)| *d += v);
            }
            Op::Reshape { a } => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let d = inv_std.len();
                let rows = g.len() / d;
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if rg(*x) {
                    let gam = self.value(*gamma).data();
                    let dx = slot(grads, *x, g.len());
                    let n = rows as f64;
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            let scale = gam[j] * inv_std[j];
                            dx[r * d + j] += if *training {
                                scale / n * (n * gr[j] - sum_g[j] - hr[j] * sum_gx[j])
                            } else {
                                scale * gr[j]
                            };
                        }
                    }
                }
                if rg(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    dg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if rg(*beta) {
                    let db = slot(grads, *beta, d);
                    db.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if rg(*x) {
                    let dx = slot(grads, *x, g.len());
                    let n = d as f64;
                    let mut dxhat = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s: f64 = dxhat.iter().sum();
                        let sx: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] += inv_std[r] / n * (n * dxhat[j] - s - hr[j] * sx);
                        }
                    }
                }
                if rg(*gamma) {
                    let dg = slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if rg(*beta) {
                    let db = slot(grads, *beta, d);
                    for gr in g.chunks_exact(d) {
                        db.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Dropout { a, mask } => {
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * mask[i];
                }
            }
            Op::Sum { a } => {
                let n = numel(*a);
                let da = slot(grads, *a, n);
                da.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let n = numel(*a);
                let da = slot(grads, *a, n);
                let v = g[0] / n as f64;
                da.iter_mut().for_each(|d| *d += v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let any = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5));
        let out = g.matmul(z, any).unwrap();
        assert_eq!(g.shape(out), &[2, 4]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));

        let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = g.matmul(m, b).unwrap();
        assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_broadcasts_shared_operand() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let w = g.constant(t(&[2, 1], &[1.0, -1.0]));
        let out = g.matmul(a, w).unwrap();
        assert_eq!(g.shape(out), &[2, 3, 1]);
        assert!(g.value(out).data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).all_finite());
        assert_abs_diff_eq!(g.value(y).data()[0], 1.0, epsilon = 1e-12);

        let base = [0.3, -1.2, 2.5, 0.0];
        let x = g.constant(t(&[4], &base));
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.25).collect();
        let xs = g.constant(t(&[4], &shifted));
        let (y, ys) = (g.softmax(x, 0).unwrap(), g.softmax(xs, 0).unwrap());
        assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-15);
    }

    #[test]
    fn softmax_rows_along_inner_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 3.0));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v.get(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        let x: f64 = 1.0;
        let want = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        assert_abs_diff_eq!(gelu_scalar(1.0), want, epsilon = 1e-15);
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.841_191_990_608_276_8, epsilon = 1e-12);
    }

    #[test]
    fn batch_norm_examples() {
        let mut g = Graph::new();
        let mut st = BnState::new(2);
        let gamma = g.param(Tensor::ones(&[2]));
        let beta = g.param(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::full(&[3, 2], 4.0));
        let y = g.batch_norm(x, gamma, beta, &mut st, true).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(t(&[2, 1], &[1.0, 3.0]));
        let gamma1 = g.param(Tensor::ones(&[1]));
        let beta1 = g.param(Tensor::zeros(&[1]));
        let mut st1 = BnState::new(1);
        let y = g.batch_norm(x, gamma1, beta1, &mut st1, true).unwrap();
        let s = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert_abs_diff_eq!(g.value(y).data()[0], -s, epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(y).data()[1], s, epsilon = 1e-15);
        // running stats: mean 0.9*0 + 0.1*2, var 0.9*1 + 0.1*2 (unbiased var of [1,3] is 2)
        assert_abs_diff_eq!(st1.running_mean[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(st1.running_var[0], 1.1, epsilon = 1e-15);

        let zero = g.param(Tensor::zeros(&[2]));
        let b = g.param(t(&[2], &[0.5, -2.0]));
        let x = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 * 1.7 - 3.0));
        let y = g.batch_norm(x, zero, b, &mut st, true).unwrap();
        for row in g.value(y).data().chunks(2) {
            assert_eq!(row, &[0.5, -2.0]);
        }
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let mut g = Graph::new();
        let mut st = BnState::new(1);
        st.running_mean = vec![2.0];
        st.running_var = vec![4.0 - 1e-5];
        let gamma = g.param(Tensor::ones(&[1]));
        let beta = g.param(Tensor::zeros(&[1]));
        let x = g.constant(t(&[2, 1], &[2.0, 6.0]));
        let y = g.batch_norm(x, gamma, beta, &mut st, false).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[1], 2.0, epsilon = 1e-12);
        assert_eq!(st.running_mean, vec![2.0]);
    }

    #[test]
    fn backward_simple_rules() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 2.0);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_nonzero_rescales() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[1000]));
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.2, &mut rng).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || (e - 1.25).abs() < 1e-15));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((700..900).contains(&kept));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }
}
