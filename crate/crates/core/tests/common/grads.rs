//! Finite-difference checks for every differentiable op and the full model.

use gridtst::attention::{
    apply_horizontal, apply_vertical, encoder_layer, multi_head, scaled_dot_attention, AttentionParams, LayerCtx, LayerVars, NormKind,
};
use gridtst::model::{GridTst, ParamVars, SequencingMode};
use gridtst::tensor::{grad_check, BnState, Graph, Tensor, Var};
use gridtst::train::mse_loss;
use gridtst::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{random, rng, tiny_config, window};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(out), &mut rng(seed)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn check(inputs: Vec<Tensor>, mut f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    grad_check(
        |g, v| {
            let out = f(g, v)?;
            if g.shape(out) == [1] {
                Ok(out)
            } else {
                project(g, out, 99)
            }
        },
        &inputs,
        STEP,
    )
    .expect("grad check runs")
    .max_rel_error
}

fn layer_inputs(p: &AttentionParams) -> Vec<Tensor> {
    p.tensors().iter().map(|(_, t)| (*t).clone()).collect()
}

fn layer_vars(v: &[Var]) -> LayerVars {
    LayerVars {
        w_q: v[0],
        b_q: v[1],
        w_k: v[2],
        b_k: v[3],
        w_v: v[4],
        b_v: v[5],
        w_o: v[6],
        b_o: v[7],
        ff_w1: v[8],
        ff_b1: v[9],
        ff_w2: v[10],
        ff_b2: v[11],
        norm1_gamma: v[12],
        norm1_beta: v[13],
        norm2_gamma: v[14],
        norm2_beta: v[15],
    }
}

fn layer_params(d: usize, heads: usize, seed: u64) -> AttentionParams {
    let mut r = rng(seed);
    let mut p = AttentionParams::init(d, heads, 2 * d, &mut r).unwrap();
    for (_, t) in p.tensors_mut() {
        let noise = random(t.shape(), &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += 0.1 * n);
    }
    p
}

/// `(name, max relative error)` for every check.
pub fn suite() -> Vec<(String, f64)> {
    let mut r = rng(1);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| out.push((name.to_string(), err));

    let a = random(&[2, 3, 4], &mut r);
    let b = random(&[2, 4, 2], &mut r);
    push("matmul batched", check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1])));
    let w = random(&[4, 2], &mut r);
    push("matmul shared rhs", check(vec![a.clone(), w.clone()], |g, v| g.matmul(v[0], v[1])));
    let lhs = random(&[3, 4], &mut r);
    push("matmul shared lhs", check(vec![lhs, b.clone()], |g, v| g.matmul(v[0], v[1])));
    let bias = random(&[4], &mut r);
    push("add broadcast", check(vec![a.clone(), bias.clone()], |g, v| g.add(v[0], v[1])));
    let a2 = random(&[2, 3, 4], &mut r);
    push("add", check(vec![a.clone(), a2.clone()], |g, v| g.add(v[0], v[1])));
    push("sub", check(vec![a.clone(), a2.clone()], |g, v| g.sub(v[0], v[1])));
    push("mul", check(vec![a.clone(), a2.clone()], |g, v| g.mul(v[0], v[1])));
    push("scale", check(vec![a.clone()], |g, v| Ok(g.scale(v[0], -1.7))));
    for axis in 0..3 {
        push(&format!("softmax axis {axis}"), check(vec![a.clone()], |g, v| g.softmax(v[0], axis)));
    }
    let wide = Tensor::from_fn(&[3, 5], |i| -3.0 + 0.4 * i as f64);
    push("gelu", check(vec![wide], |g, v| Ok(g.gelu(v[0]))));
    push("permute", check(vec![a.clone()], |g, v| g.permute(v[0], &[2, 0, 1])));
    push("reshape", check(vec![a.clone()], |g, v| g.reshape(v[0], &[6, 4])));
    let x = random(&[3, 4, 5], &mut r);
    let gamma = Tensor::from_fn(&[5], |i| 0.5 + 0.3 * i as f64);
    let beta = random(&[5], &mut r);
    push(
        "batch_norm training",
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let mut s = BnState::new(5);
            g.batch_norm(v[0], v[1], v[2], &mut s, true)
        }),
    );
    push(
        "batch_norm inference",
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| {
            let mut s = BnState::new(5);
            s.running_mean = vec![0.1, -0.2, 0.3, 0.0, 0.5];
            s.running_var = vec![0.5, 1.5, 2.0, 0.8, 1.1];
            g.batch_norm(v[0], v[1], v[2], &mut s, false)
        }),
    );
    push(
        "layer_norm",
        check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
    );
    push(
        "dropout",
        check(vec![a.clone()], |g, v| g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(4))),
    );
    push("sum", check(vec![a.clone()], |g, v| Ok(g.sum(v[0]))));
    push("mean", check(vec![a.clone()], |g, v| Ok(g.mean(v[0]))));

    let (q, k, vv) = (random(&[2, 5, 3], &mut r), random(&[2, 5, 3], &mut r), random(&[2, 5, 2], &mut r));
    push(
        "scaled_dot_attention",
        check(vec![q, k, vv], |g, v| Ok(scaled_dot_attention(g, v[0], v[1], v[2])?.0)),
    );

    let p = layer_params(4, 2, 7);
    let seq = random(&[2, 3, 4], &mut r);
    let mut inputs = vec![seq.clone()];
    inputs.extend(layer_inputs(&p));
    push(
        "multi_head",
        check(inputs.clone(), |g, v| Ok(multi_head(g, v[0], &layer_vars(&v[1..]), 2)?.0)),
    );
    for norm in [NormKind::Batch, NormKind::Layer] {
        let target = random(&[2, 3, 4], &mut rng(8));
        push(
            &format!("encoder_layer mse ({norm:?})"),
            check(inputs.clone(), |g, v| {
                let (mut s1, mut s2) = (BnState::new(4), BnState::new(4));
                let mut rr = rng(0);
                let mut ctx = LayerCtx { training: true, dropout: 0.0, norm, rng: &mut rr };
                let (y, _) = encoder_layer(g, v[0], &layer_vars(&v[1..]), 2, (&mut s1, &mut s2), &mut ctx)?;
                mse_loss(g, y, &target)
            }),
        );
    }
    let grid = random(&[1, 3, 2, 4], &mut r);
    let mut inputs = vec![grid];
    inputs.extend(layer_inputs(&p));
    for vertical in [false, true] {
        push(
            if vertical { "apply_vertical" } else { "apply_horizontal" },
            check(inputs.clone(), |g, v| {
                let (mut s1, mut s2) = (BnState::new(4), BnState::new(4));
                let mut rr = rng(0);
                let mut ctx = LayerCtx { training: true, dropout: 0.0, norm: NormKind::Batch, rng: &mut rr };
                let lv = layer_vars(&v[1..]);
                let (y, _) = if vertical {
                    apply_vertical(g, v[0], &lv, 2, (&mut s1, &mut s2), &mut ctx)?
                } else {
                    apply_horizontal(g, v[0], &lv, 2, (&mut s1, &mut s2), &mut ctx)?
                };
                Ok(y)
            }),
        );
    }

    push("full model mse", full_model_error());
    out
}

/// Two-layer alternate model, one 2-variate 32-step window, MSE against a
/// random target; gradients with respect to every parameter.
pub fn full_model_error() -> f64 {
    let mut model = GridTst::new(tiny_config(SequencingMode::Alternate, 2)).unwrap();
    super::scramble(&mut model, 3);
    let x = window(1, 32, 2, 5);
    let target = random(&[1, 4, 2], &mut rng(6));
    let inputs: Vec<Tensor> = model.tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let layers = model.blocks.len();
    let report = grad_check(
        |g, v| {
            let vars = ParamVars::from_flat(v, layers)?;
            let mut rr = rng(0);
            let mut ctx = LayerCtx { training: true, dropout: 0.0, norm: NormKind::Batch, rng: &mut rr };
            let mut m = model.clone();
            let out = m.forward_on(g, &vars, &x, &mut ctx, false)?;
            mse_loss(g, out.prediction, &target)
        },
        &inputs,
        STEP,
    )
    .expect("grad check runs");
    report.max_rel_error
}
