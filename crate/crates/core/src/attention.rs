//! Multi-head attention, the post-norm encoder layer, and its application
//! along either axis of the `[B × M × N × D]` token grid.
//!
//! Horizontal layers attend among the `M` patch tokens of one variate;
//! vertical layers attend among the `N` variate tokens of one patch step.
//! Vertical application is implemented as horizontal application on the
//! grid with its `M` and `N` axes swapped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BnState, Graph, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Across patch steps of one variate.
    Horizontal,
    /// Across variates at one patch step.
    Vertical,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Horizontal => "horizontal",
            Direction::Vertical => "vertical",
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalization used inside encoder layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// BatchNorm over `D` with statistics over every (sequence, token) row.
    #[default]
    Batch,
    /// LayerNorm over `D` per token.
    Layer,
}

/// Weights of one encoder layer. Head `h` owns columns
/// `h·d_k .. (h+1)·d_k` of the query, key and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub norm1_gamma: Tensor,
    pub norm1_beta: Tensor,
    pub norm2_gamma: Tensor,
    pub norm2_beta: Tensor,
    pub bn1: BnState,
    pub bn2: BnState,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d_model: usize, heads: usize, d_ff: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(
                "model.heads",
                format!("{heads} heads do not divide d_model {d_model}"),
            ));
        }
        let d = d_model;
        let mut sq = || Tensor::xavier_uniform(&[d, d], d, d, rng);
        let (w_q, w_k, w_v, w_o) = (sq(), sq(), sq(), sq());
        Ok(Self {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: Tensor::zeros(&[d]),
            b_k: Tensor::zeros(&[d]),
            b_v: Tensor::zeros(&[d]),
            b_o: Tensor::zeros(&[d]),
            ff_w1: Tensor::xavier_uniform(&[d, d_ff], d, d_ff, rng),
            ff_b1: Tensor::zeros(&[d_ff]),
            ff_w2: Tensor::xavier_uniform(&[d_ff, d], d_ff, d, rng),
            ff_b2: Tensor::zeros(&[d]),
            norm1_gamma: Tensor::ones(&[d]),
            norm1_beta: Tensor::zeros(&[d]),
            norm2_gamma: Tensor::ones(&[d]),
            norm2_beta: Tensor::zeros(&[d]),
            bn1: BnState::new(d),
            bn2: BnState::new(d),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.ff_w1.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    /// Trainable tensors with stable names, in registration order.
    pub fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
            ("norm1_gamma", &self.norm1_gamma),
            ("norm1_beta", &self.norm1_beta),
            ("norm2_gamma", &self.norm2_gamma),
            ("norm2_beta", &self.norm2_beta),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
            ("norm1_gamma", &mut self.norm1_gamma),
            ("norm1_beta", &mut self.norm1_beta),
            ("norm2_gamma", &mut self.norm2_gamma),
            ("norm2_beta", &mut self.norm2_beta),
        ]
    }

    /// Records every trainable tensor on `g` as a leaf.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> LayerVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        LayerVars {
            w_q: leaf(&self.w_q),
            b_q: leaf(&self.b_q),
            w_k: leaf(&self.w_k),
            b_k: leaf(&self.b_k),
            w_v: leaf(&self.w_v),
            b_v: leaf(&self.b_v),
            w_o: leaf(&self.w_o),
            b_o: leaf(&self.b_o),
            ff_w1: leaf(&self.ff_w1),
            ff_b1: leaf(&self.ff_b1),
            ff_w2: leaf(&self.ff_w2),
            ff_b2: leaf(&self.ff_b2),
            norm1_gamma: leaf(&self.norm1_gamma),
            norm1_beta: leaf(&self.norm1_beta),
            norm2_gamma: leaf(&self.norm2_gamma),
            norm2_beta: leaf(&self.norm2_beta),
        }
    }
}

/// Graph handles for one layer's weights, in the order of
/// [`AttentionParams::tensors`].
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
    pub ff_w1: Var,
    pub ff_b1: Var,
    pub ff_w2: Var,
    pub ff_b2: Var,
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 16] {
        [
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
            self.norm1_gamma,
            self.norm1_beta,
            self.norm2_gamma,
            self.norm2_beta,
        ]
    }
}

/// Per-call settings shared by every layer of one forward pass.
pub struct LayerCtx<'r, R: Rng + ?Sized> {
    pub training: bool,
    pub dropout: f64,
    pub norm: NormKind,
    pub rng: &'r mut R,
}

impl<R: Rng + ?Sized> LayerCtx<'_, R> {
    fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.training {
            g.dropout(x, self.dropout, self.rng)
        } else {
            Ok(x)
        }
    }
}

fn swap_last_two(rank: usize) -> Vec<usize> {
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 1, rank - 2);
    axes
}

/// `softmax(Q·Kᵀ / √d_k)·V` over the last two axes, without masking.
/// Returns `(output, weights)`.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = *g.shape(q).last().unwrap();
    if g.shape(q) != g.shape(k) {
        return Err(Error::shape("scaled_dot_attention", g.shape(q), g.shape(k)));
    }
    let kt = g.permute(k, &swap_last_two(g.shape(k).len()))?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let rank = g.shape(scores).len();
    let weights = g.softmax(scores, rank - 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// Multi-head self-attention over `x: [S × L × D]`. Returns the projected
/// output `[S × L × D]` and the attention weights `[S × H × L × L]`.
pub fn multi_head(g: &mut Graph, x: Var, p: &LayerVars, heads: usize) -> Result<(Var, Var)> {
    let shape = g.shape(x).to_vec();
    let [s, l, d] = shape[..] else {
        return Err(Error::invalid("multi_head", format!("expected [S × L × D], got {shape:?}")));
    };
    if heads == 0 || d % heads != 0 {
        return Err(Error::config("model.heads", format!("{heads} heads do not divide d_model {d}")));
    }
    let dk = d / heads;
    let split = |g: &mut Graph, w: Var, b: Var| -> Result<Var> {
        let y = linear(g, x, w, b)?;
        let y = g.reshape(y, &[s, l, heads, dk])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, p.w_q, p.b_q)?;
    let k = split(g, p.w_k, p.b_k)?;
    let v = split(g, p.w_v, p.b_v)?;
    let (ctx, weights) = scaled_dot_attention(g, q, k, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[s, l, d])?;
    let out = linear(g, ctx, p.w_o, p.b_o)?;
    Ok((out, weights))
}

fn norm<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BnState,
    ctx: &LayerCtx<'_, R>,
) -> Result<Var> {
    match ctx.norm {
        NormKind::Batch => g.batch_norm(x, gamma, beta, state, ctx.training),
        NormKind::Layer => g.layer_norm(x, gamma, beta, LAYER_NORM_EPS),
    }
}

/// Post-norm encoder layer on `x: [S × L × D]`:
/// `y₁ = Norm(x + Dropout(MHA(x)))`, `y = Norm(y₁ + Dropout(FFN(y₁)))`
/// with `FFN = Linear → GELU → Linear`. Returns `(y, attention weights)`.
pub fn encoder_layer<R: Rng + ?Sized>(
    g: &mut Graph,
    x: Var,
    p: &LayerVars,
    heads: usize,
    bn: (&mut BnState, &mut BnState),
    ctx: &mut LayerCtx<'_, R>,
) -> Result<(Var, Var)> {
    let (attn, weights) = multi_head(g, x, p, heads)?;
    let attn = ctx.dropout(g, attn)?;
    let res = g.add(x, attn)?;
    let y1 = norm(g, res, p.norm1_gamma, p.norm1_beta, bn.0, ctx)?;

    let h = linear(g, y1, p.ff_w1, p.ff_b1)?;
    let h = g.gelu(h);
    let ff = linear(g, h, p.ff_w2, p.ff_b2)?;
    let ff = ctx.dropout(g, ff)?;
    let res = g.add(y1, ff)?;
    let y = norm(g, res, p.norm2_gamma, p.norm2_beta, bn.1, ctx)?;
    Ok((y, weights))
}

/// Swaps the `M` and `N` axes of a `[B × M × N × D]` grid.
pub fn grid_transpose(g: &mut Graph, grid: Var) -> Result<Var> {
    if g.shape(grid).len() != 4 {
        return Err(Error::invalid(
            "grid_transpose",
            format!("expected [B × M × N × D], got {:?}", g.shape(grid)),
        ));
    }
    g.permute(grid, &[0, 2, 1, 3])
}

/// Runs the layer over every variate's length-`M` token sequence. Weights
/// are `[B·N × H × M × M]`, sequence index `b·N + n`.
pub fn apply_horizontal<R: Rng + ?Sized>(
    g: &mut Graph,
    grid: Var,
    p: &LayerVars,
    heads: usize,
    bn: (&mut BnState, &mut BnState),
    ctx: &mut LayerCtx<'_, R>,
) -> Result<(Var, Var)> {
    let shape = g.shape(grid).to_vec();
    let [b, m, n, d] = shape[..] else {
        return Err(Error::invalid("apply_horizontal", format!("expected [B × M × N × D], got {shape:?}")));
    };
    let seqs = grid_transpose(g, grid)?;
    let seqs = g.reshape(seqs, &[b * n, m, d])?;
    let (out, weights) = encoder_layer(g, seqs, p, heads, bn, ctx)?;
    let out = g.reshape(out, &[b, n, m, d])?;
    Ok((grid_transpose(g, out)?, weights))
}

/// Runs the layer over every patch step's length-`N` variate set, as
/// `transpose ∘ apply_horizontal ∘ transpose`. Weights are
/// `[B·M × H × N × N]`, sequence index `b·M + t`.
pub fn apply_vertical<R: Rng + ?Sized>(
    g: &mut Graph,
    grid: Var,
    p: &LayerVars,
    heads: usize,
    bn: (&mut BnState, &mut BnState),
    ctx: &mut LayerCtx<'_, R>,
) -> Result<(Var, Var)> {
    let swapped = grid_transpose(g, grid)?;
    let (out, weights) = apply_horizontal(g, swapped, p, heads, bn, ctx)?;
    Ok((grid_transpose(g, out)?, weights))
}

/// Exact attention-score work for one window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    pub horizontal_layers: usize,
    pub vertical_layers: usize,
    /// Entries of the (head-averaged) score matrices: `N·M²` per horizontal
    /// layer, `M·N²` per vertical layer.
    pub score_entries: u64,
    /// Multiply-accumulates of `Q·Kᵀ` and `weights·V` over all heads:
    /// `2·D` per score entry.
    pub score_macs: u64,
}

/// Attention-score cost of a layer stack on an `M × N` grid of width `D`.
pub fn count_attention_cost(m: usize, n: usize, d: usize, layers: &[Direction]) -> AttentionCost {
    let (m, n, d) = (m as u64, n as u64, d as u64);
    let mut cost = AttentionCost::default();
    for dir in layers {
        let entries = match dir {
            Direction::Horizontal => {
                cost.horizontal_layers += 1;
                n * m * m
            }
            Direction::Vertical => {
                cost.vertical_layers += 1;
                m * n * n
            }
        };
        cost.score_entries += entries;
        cost.score_macs += 2 * d * entries;
    }
    cost
}

/// Head-averaged attention matrix of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub direction: Direction,
    /// Window within the batch.
    pub window: usize,
    /// Variate index for horizontal maps, patch step for vertical maps.
    pub sequence: usize,
    /// `[L × L]`, rows sum to one.
    pub weights: Tensor,
}

/// Averages `[S × H × L × L]` weights over heads; sequence `s` maps to
/// window `s / per_window` and sequence `s % per_window`.
pub fn head_average(
    weights: &Tensor,
    layer: usize,
    direction: Direction,
    per_window: usize,
) -> Result<Vec<AttentionMap>> {
    let [s, h, l, l2] = weights.shape()[..] else {
        return Err(Error::invalid("head_average", format!("expected [S × H × L × L], got {:?}", weights.shape())));
    };
    if l != l2 || per_window == 0 || s % per_window != 0 {
        return Err(Error::invalid("head_average", format!("bad weights {:?} for {per_window} sequences per window", weights.shape())));
    }
    let block = l * l;
    let mut maps = Vec::with_capacity(s);
    for seq in 0..s {
        let mut avg = vec![0.0; block];
        for head in 0..h {
            let off = (seq * h + head) * block;
            avg.iter_mut()
                .zip(&weights.data()[off..off + block])
                .for_each(|(a, w)| *a += w);
        }
        avg.iter_mut().for_each(|a| *a /= h as f64);
        maps.push(AttentionMap {
            layer,
            direction,
            window: seq / per_window,
            sequence: seq % per_window,
            weights: Tensor::new(vec![l, l], avg)?,
        });
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn eval_ctx(r: &mut ChaCha8Rng) -> LayerCtx<'_, ChaCha8Rng> {
        LayerCtx {
            training: false,
            dropout: 0.0,
            norm: NormKind::Batch,
            rng: r,
        }
    }

    #[test]
    fn zero_keys_give_uniform_weights() {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.constant(random(&[4, 3], &mut r));
        let k = g.constant(Tensor::zeros(&[4, 3]));
        let v = g.constant(random(&[4, 2], &mut r));
        let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!(g.value(w).data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let vv = g.value(v).clone();
        for c in 0..2 {
            let mean = (0..4).map(|i| vv.get(&[i, c])).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((g.value(out).get(&[i, c]) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut r = rng();
        let mut g = Graph::new();
        let q = g.constant(random(&[1, 3], &mut r));
        let k = g.constant(random(&[1, 3], &mut r));
        let v = g.constant(random(&[1, 2], &mut r));
        let (out, w) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        assert_eq!(g.value(out), g.value(v));
    }

    #[test]
    fn attention_matches_double_loop() {
        let mut r = rng();
        let (l, dk) = (3, 2);
        let (qt, kt, vt) = (random(&[l, dk], &mut r), random(&[l, dk], &mut r), random(&[l, dk], &mut r));
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
        let (out, _) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dk).map(|c| qt.get(&[i, c]) * kt.get(&[j, c])).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..dk {
                let want: f64 = (0..l).map(|j| scores[j].exp() / z * vt.get(&[j, c])).sum();
                assert!((g.value(out).get(&[i, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_heads_not_dividing_width() {
        assert!(AttentionParams::init(6, 4, 8, &mut rng()).is_err());
        assert!(AttentionParams::init(8, 0, 8, &mut rng()).is_err());
        let p = AttentionParams::init(16, 4, 32, &mut rng()).unwrap();
        assert_eq!(p.head_dim(), 4);
    }

    #[test]
    fn zero_value_and_output_projections_give_zero() {
        let mut r = rng();
        let mut p = AttentionParams::init(4, 2, 8, &mut r).unwrap();
        p.w_v = Tensor::zeros(&[4, 4]);
        p.w_o = Tensor::zeros(&[4, 4]);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(random(&[2, 3, 4], &mut r));
        let (out, _) = multi_head(&mut g, x, &vars, 2).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_with_identity_output_is_plain_attention() {
        let mut r = rng();
        let mut p = AttentionParams::init(3, 1, 4, &mut r).unwrap();
        p.w_o = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let xt = random(&[1, 5, 3], &mut r);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(xt);
        let (out, _) = multi_head(&mut g, x, &vars, 1).unwrap();
        let q = g.matmul(x, vars.w_q).unwrap();
        let k = g.matmul(x, vars.w_k).unwrap();
        let v = g.matmul(x, vars.w_v).unwrap();
        let (want, _) = scaled_dot_attention(&mut g, q, k, v).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(want)) < 1e-14);
    }

    #[test]
    fn two_heads_match_concatenated_single_head_calls() {
        let mut r = rng();
        let p = AttentionParams::init(4, 2, 8, &mut r).unwrap();
        let xt = random(&[1, 3, 4], &mut r);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(xt.clone());
        let (out, _) = multi_head(&mut g, x, &vars, 2).unwrap();

        // oracle: slice per-head projection columns, attend, concatenate, project
        let cols = |w: &Tensor, h: usize| Tensor::from_fn(&[4, 2], |i| w.get(&[i / 2, h * 2 + i % 2]));
        let x2 = xt.reshape(&[3, 4]).unwrap();
        let mut concat = Tensor::zeros(&[3, 4]);
        for h in 0..2 {
            let mut og = Graph::new();
            let xv = og.constant(x2.clone());
            let wq = og.constant(cols(&p.w_q, h));
            let wk = og.constant(cols(&p.w_k, h));
            let wv = og.constant(cols(&p.w_v, h));
            let (q, k, v) = (og.matmul(xv, wq).unwrap(), og.matmul(xv, wk).unwrap(), og.matmul(xv, wv).unwrap());
            let (o, _) = scaled_dot_attention(&mut og, q, k, v).unwrap();
            for i in 0..3 {
                for c in 0..2 {
                    concat.set(&[i, h * 2 + c], og.value(o).get(&[i, c]));
                }
            }
        }
        let mut og = Graph::new();
        let c = og.constant(concat);
        let wo = og.constant(p.w_o.clone());
        let want = og.matmul(c, wo).unwrap();
        let got = g.value(out).reshape(&[3, 4]).unwrap();
        assert!(got.max_abs_diff(og.value(want)) < 1e-13);
    }

    #[test]
    fn passthrough_skeleton_is_double_norm() {
        let mut r = rng();
        let mut p = AttentionParams::init(8, 2, 16, &mut r).unwrap();
        for (name, t) in p.tensors_mut() {
            if !name.starts_with("norm") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let xt = random(&[2, 3, 8], &mut r);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(xt);
        let mut ctx = LayerCtx {
            training: true,
            dropout: 0.0,
            norm: NormKind::Batch,
            rng: &mut r,
        };
        let (y, _) = encoder_layer(&mut g, x, &vars, 2, (&mut p.bn1, &mut p.bn2), &mut ctx).unwrap();
        let mut s1 = BnState::new(8);
        let mut s2 = BnState::new(8);
        let once = g.batch_norm(x, vars.norm1_gamma, vars.norm1_beta, &mut s1, true).unwrap();
        let twice = g.batch_norm(once, vars.norm2_gamma, vars.norm2_beta, &mut s2, true).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 8]);
        assert!(g.value(y).max_abs_diff(g.value(twice)) < 1e-12);
    }

    #[test]
    fn layer_preserves_shape() {
        let mut r = rng();
        for (l, d) in [(3, 8), (5, 16)] {
            let mut p = AttentionParams::init(d, 4, 2 * d, &mut r).unwrap();
            let mut g = Graph::new();
            let vars = p.register(&mut g, true);
            let x = g.constant(random(&[2, l, d], &mut r));
            let mut ctx = LayerCtx {
                training: true,
                dropout: 0.2,
                norm: NormKind::Batch,
                rng: &mut r,
            };
            let (y, w) = encoder_layer(&mut g, x, &vars, 4, (&mut p.bn1, &mut p.bn2), &mut ctx).unwrap();
            assert_eq!(g.shape(y), &[2, l, d]);
            assert_eq!(g.shape(w), &[2, 4, l, l]);
        }
    }

    #[test]
    fn vertical_is_transposed_horizontal_bitwise() {
        let mut r = rng();
        let mut p = AttentionParams::init(4, 2, 8, &mut r).unwrap();
        let mut q = p.clone();
        let grid = random(&[1, 2, 3, 4], &mut r);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(grid);
        let mut r1 = rng();
        let mut ctx = LayerCtx { training: true, dropout: 0.0, norm: NormKind::Batch, rng: &mut r1 };
        let (v, _) = apply_vertical(&mut g, x, &vars, 2, (&mut p.bn1, &mut p.bn2), &mut ctx).unwrap();
        let xt = grid_transpose(&mut g, x).unwrap();
        let (h, _) = apply_horizontal(&mut g, xt, &vars, 2, (&mut q.bn1, &mut q.bn2), &mut ctx).unwrap();
        let back = grid_transpose(&mut g, h).unwrap();
        assert_eq!(g.value(v), g.value(back));
        assert_eq!(p.bn1, q.bn1);
    }

    #[test]
    fn horizontal_equals_per_variate_loop() {
        let mut r = rng();
        let mut p = AttentionParams::init(4, 2, 8, &mut r).unwrap();
        p.bn1.running_mean = (0..4).map(|i| i as f64 * 0.1).collect();
        p.bn2.running_var = vec![0.5, 2.0, 1.5, 0.9];
        let (m, n, d) = (3, 2, 4);
        let gt = random(&[1, m, n, d], &mut r);
        let mut g = Graph::new();
        let vars = p.register(&mut g, false);
        let x = g.constant(gt.clone());
        let mut r2 = rng();
        let mut ctx = eval_ctx(&mut r2);
        let mut bn = (p.bn1.clone(), p.bn2.clone());
        let (out, _) = apply_horizontal(&mut g, x, &vars, 2, (&mut bn.0, &mut bn.1), &mut ctx).unwrap();
        for v in 0..n {
            let seq = Tensor::from_fn(&[1, m, d], |i| gt.get(&[0, i / d, v, i % d]));
            let s = g.constant(seq);
            let (y, _) = encoder_layer(&mut g, s, &vars, 2, (&mut bn.0, &mut bn.1), &mut ctx).unwrap();
            for t in 0..m {
                for c in 0..d {
                    assert!((g.value(out).get(&[0, t, v, c]) - g.value(y).get(&[0, t, c])).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn cost_counts() {
        use Direction::*;
        let h = count_attention_cost(5, 5, 8, &[Horizontal]);
        let v = count_attention_cost(5, 5, 8, &[Vertical]);
        assert_eq!(h.score_entries, v.score_entries);
        let single = count_attention_cost(12, 1, 8, &[Vertical]);
        assert_eq!(single.score_entries, 12);
        let mixed = count_attention_cost(42, 7, 16, &[Vertical, Vertical, Horizontal, Horizontal]);
        let flat = count_attention_cost(42, 7, 16, &[Horizontal; 4]);
        assert_eq!(mixed.score_entries, 2 * 7 * 42 * 42 + 2 * 42 * 7 * 7);
        assert_eq!(flat.score_entries, 4 * 7 * 42 * 42);
        assert!(mixed.score_macs < flat.score_macs);
        assert_eq!(mixed.score_macs, 2 * 16 * mixed.score_entries);
    }

    #[test]
    fn head_average_of_two_heads() {
        let w = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 0.0, 0.25, 0.75, 0.0, 1.0, 0.75, 0.25]).unwrap();
        let maps = head_average(&w, 3, Direction::Vertical, 1).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].weights.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!((maps[0].layer, maps[0].window, maps[0].sequence), (3, 0, 0));
    }
}
