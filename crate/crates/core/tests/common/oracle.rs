//! Straight-line forward pass with explicit loops, written against the
//! public parameter tensors only. Inference mode, BatchNorm layers.

use gridtst::attention::{AttentionParams, Direction};
use gridtst::model::GridTst;
use gridtst::tensor::Tensor;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `rows · w + b` for `rows: [L][I]`, `w: [I × O]`.
fn affine(rows: &[Vec<f64>], w: &Tensor, b: Option<&Tensor>) -> Vec<Vec<f64>> {
    let (i_dim, o_dim) = (w.shape()[0], w.shape()[1]);
    rows.iter()
        .map(|r| {
            (0..o_dim)
                .map(|o| {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..i_dim {
                        s += r[i] * w.get(&[i, o]);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn batch_norm_inference(rows: &[Vec<f64>], gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64], eps: f64) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(d, v)| (v - mean[d]) / (var[d] + eps).sqrt() * gamma.data()[d] + beta.data()[d])
                .collect()
        })
        .collect()
}

/// One encoder layer over a single token sequence `[L][D]`.
pub fn encoder_layer(seq: &[Vec<f64>], p: &AttentionParams) -> Vec<Vec<f64>> {
    let l = seq.len();
    let d = p.d_model();
    let dk = d / p.heads;
    let q = affine(seq, &p.w_q, Some(&p.b_q));
    let k = affine(seq, &p.w_k, Some(&p.b_k));
    let v = affine(seq, &p.w_v, Some(&p.b_v));
    let mut ctx = vec![vec![0.0; d]; l];
    for h in 0..p.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = (0..l).map(|j| exps[j] / z * v[j][c]).sum();
            }
        }
    }
    let attn = affine(&ctx, &p.w_o, Some(&p.b_o));
    let res: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|c| seq[i][c] + attn[i][c]).collect()).collect();
    let y1 = batch_norm_inference(&res, &p.norm1_gamma, &p.norm1_beta, &p.bn1.running_mean, &p.bn1.running_var, p.bn1.eps);
    let hidden: Vec<Vec<f64>> = affine(&y1, &p.ff_w1, Some(&p.ff_b1))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let ff = affine(&hidden, &p.ff_w2, Some(&p.ff_b2));
    let res: Vec<Vec<f64>> = (0..l).map(|i| (0..d).map(|c| y1[i][c] + ff[i][c]).collect()).collect();
    batch_norm_inference(&res, &p.norm2_gamma, &p.norm2_beta, &p.bn2.running_mean, &p.bn2.running_var, p.bn2.eps)
}

/// Prediction `[B × F × N]` for `x: [B × T × N]`.
pub fn forward(model: &GridTst, x: &Tensor) -> Tensor {
    let cfg = model.config();
    let (bsz, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (p, s, d, f) = (cfg.patch_len, cfg.stride, cfg.d_model, cfg.horizon);
    let m = (t - p).div_ceil(s) + 2;
    let mut out = Tensor::zeros(&[bsz, f, n]);
    for b in 0..bsz {
        let mut means = vec![0.0; n];
        let mut stds = vec![0.0; n];
        // grid[m][n][d]
        let mut grid = vec![vec![vec![0.0; d]; n]; m];
        for v in 0..n {
            let series: Vec<f64> = (0..t).map(|i| x.get(&[b, i, v])).collect();
            let mean = series.iter().sum::<f64>() / t as f64;
            let var = series.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / t as f64;
            let std = var.sqrt().max(1e-5);
            means[v] = mean;
            stds[v] = std;
            let mut z: Vec<f64> = series.iter().map(|v| (v - mean) / std).collect();
            let last = z[t - 1];
            z.resize((m - 1) * s + p, last);
            for (k, cell) in grid.iter_mut().enumerate() {
                for c in 0..d {
                    let mut acc = model.w_pos.get(&[k, c]);
                    for j in 0..p {
                        acc += z[k * s + j] * model.w_p.get(&[j, c]);
                    }
                    cell[v][c] = acc;
                }
            }
        }
        for block in &model.blocks {
            match block.direction {
                Direction::Horizontal => {
                    for v in 0..n {
                        let seq: Vec<Vec<f64>> = (0..m).map(|k| grid[k][v].clone()).collect();
                        let y = encoder_layer(&seq, &block.params);
                        for k in 0..m {
                            grid[k][v] = y[k].clone();
                        }
                    }
                }
                Direction::Vertical => {
                    for row in grid.iter_mut() {
                        *row = encoder_layer(row, &block.params);
                    }
                }
            }
        }
        for v in 0..n {
            for h in 0..f {
                let mut acc = model.head_b.data()[h];
                for k in 0..m {
                    for c in 0..d {
                        acc += grid[k][v][c] * model.head_w.get(&[k * d + c, h]);
                    }
                }
                out.set(&[b, h, v], acc * stds[v] + means[v]);
            }
        }
    }
    out
}
