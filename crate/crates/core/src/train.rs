//! MSE training with Adam, evaluation metrics, the persistence baseline and
//! per-batch variate sampling.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LayerCtx;
use crate::data::{Splits, TimeSeriesDataset, WindowBatch, WindowSampler};
use crate::error::{Error, Result};
use crate::model::GridTst;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Fraction of variates kept in each training batch.
    pub variate_ratio: f64,
    /// Caps optimizer steps per epoch; 0 means a full pass.
    pub max_steps_per_epoch: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 10,
            patience: 5,
            clip_norm: 5.0,
            variate_ratio: 1.0,
            max_steps_per_epoch: 0,
            eval_batch_size: 256,
            seed: 2024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if !(self.variate_ratio > 0.0 && self.variate_ratio <= 1.0) {
            return Err(Error::config("train.variate_ratio", format!("{} is outside (0, 1]", self.variate_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

fn check_same(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, pred.shape(), target.shape()));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / pred.numel() as f64)
}

/// Mean absolute error over every element.
pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("mae", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Running sums that give the exact element mean over many batches.
#[derive(Clone, Copy, Debug, Default)]
struct MetricSums {
    sq: f64,
    abs: f64,
    count: usize,
}

impl MetricSums {
    fn add(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        check_same("metrics", pred, target)?;
        for (a, b) in pred.data().iter().zip(target.data()) {
            self.sq += (a - b) * (a - b);
            self.abs += (a - b).abs();
        }
        self.count += pred.numel();
        Ok(())
    }

    fn finish(self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            mse: self.sq / n,
            mae: self.abs / n,
        }
    }
}

/// Adam moments, step counter and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay: 0.0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            weight_decay: cfg.weight_decay,
            ..Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        }
    }

    /// One bias-corrected update. `grads[i]` belongs to `params[i]`; a
    /// `None` entry is reported by name.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::invalid("adam", format!("{} grads for {} params", grads.len(), params.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            match g {
                None => return Err(Error::MissingGrad(name.clone())),
                Some(g) if g.shape() != p.shape() => return Err(Error::shape("adam", p.shape(), g.shape())),
                Some(_) => {}
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::invalid("adam", "parameter set changed between steps"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let g = g.as_ref().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] + self.weight_decay * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Sorted uniform subset of `0..n` of size `max(1, round(ratio·n))`.
pub fn sample_variates<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config("train.variate_ratio", format!("{ratio} is outside (0, 1]")));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n.max(1));
    if k >= n {
        return Ok((0..n).collect());
    }
    let mut idx = index::sample(rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Repeat-last-value forecast scored on every window of `ds`.
pub fn persistence_baseline(ds: &TimeSeriesDataset, lookback: usize, horizon: usize) -> Result<Metrics> {
    let w = WindowSampler::new(ds, lookback, horizon)?;
    let n = ds.channels();
    let mut sums = MetricSums::default();
    for s in 0..w.len() {
        let last = ds.row(s + lookback - 1);
        let pred = Tensor::from_fn(&[horizon, n], |i| last[i % n]);
        let target = ds.slice_rows(s + lookback, s + lookback + horizon)?;
        sums.add(&pred, &target.values().reshape(&[horizon, n])?)?;
    }
    Ok(sums.finish())
}

/// Inference-mode metrics of `model` over every window of `ds`, in time order.
pub fn evaluate(model: &GridTst, ds: &TimeSeriesDataset, batch_size: usize) -> Result<Metrics> {
    let cfg = model.config();
    let w = WindowSampler::new(ds, cfg.lookback, cfg.horizon)?;
    let order = w.order::<ChaCha8Rng>(None);
    let mut sums = MetricSums::default();
    for batch in w.batches(&order, batch_size) {
        let batch = batch?;
        let pred = model.predict(&batch.inputs)?;
        sums.add(&pred, &batch.targets)?;
    }
    Ok(sums.finish())
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Training-mode loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub graph_bytes: usize,
    pub vertical_entries: usize,
}

/// Forward, backward, clip and Adam update on one batch.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut GridTst,
    opt: &mut Adam,
    batch: &WindowBatch,
    clip_norm: f64,
    rng: &mut R,
) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let (dropout, norm) = (model.config().dropout, model.config().norm);
    let mut ctx = LayerCtx {
        training: true,
        dropout,
        norm,
        rng,
    };
    let out = model.forward_on(&mut g, &vars, &batch.inputs, &mut ctx, false)?;
    let loss = mse_loss(&mut g, out.prediction, &batch.targets)?;
    let value = g.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss is {value}")));
    }
    g.backward(loss)?;
    let mut grads: Vec<Option<Tensor>> = vars.all().iter().map(|&v| g.grad(v).cloned()).collect();
    let grad_norm = clip_grad_norm(&mut grads, clip_norm);
    if !grad_norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {grad_norm} at loss {value}")));
    }
    let graph_bytes = g.memory_bytes();
    opt.step(model.tensors_mut(), &grads)?;
    Ok(StepOutcome {
        loss: value,
        grad_norm,
        graph_bytes,
        vertical_entries: out.vertical_entries(),
    })
}

/// `mean((pred − target)²)` recorded on `g`.
pub fn mse_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test: Metrics,
    pub variate_ratio: f64,
    pub steps: usize,
    pub parameters: usize,
    /// Largest autodiff tape seen during training, in bytes of tensor data.
    pub peak_graph_bytes: usize,
    /// Vertical score entries for one window, summed over vertical layers.
    pub vertical_entries_per_window: usize,
    /// Same count for a full batch of `batch_size` windows.
    pub vertical_entries_per_batch: usize,
    pub wall_s: f64,
}

/// Trains on standardized splits, keeps the parameters with the best
/// validation MSE and reports test metrics for them.
pub fn train(model: &mut GridTst, splits: &Splits, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, splits, cfg, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut GridTst,
    splits: &Splits,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (lookback, horizon) = (model.config().lookback, model.config().horizon);
    let train_ds = splits.train()?;
    let (val_ds, test_ds) = (splits.val()?, splits.test()?);
    let sampler = WindowSampler::new(train_ds, lookback, horizon)?;
    WindowSampler::new(val_ds, lookback, horizon)?;
    WindowSampler::new(test_ds, lookback, horizon)?;
    let n = train_ds.channels();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::from_config(cfg);
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut steps = 0;
    let mut peak = 0;
    let mut per_window = None;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let mut order = sampler.order(Some(&mut rng));
        if cfg.max_steps_per_epoch > 0 {
            order.truncate(cfg.max_steps_per_epoch * cfg.batch_size);
        }
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let subset = if cfg.variate_ratio < 1.0 {
                Some(sample_variates(n, cfg.variate_ratio, &mut rng)?)
            } else {
                None
            };
            let batch = sampler.batch(chunk, subset.as_deref())?;
            let out = train_step(model, &mut opt, &batch, cfg.clip_norm, &mut rng).map_err(|e| match e {
                Error::Divergence(msg) | Error::Numeric { msg, .. } => {
                    Error::Divergence(format!("epoch {epoch}, step {}: {msg}", steps + 1))
                }
                e => e,
            })?;
            let w = out.vertical_entries / chunk.len();
            match per_window {
                None => per_window = Some(w),
                Some(prev) if prev != w => {
                    return Err(Error::invalid("train", format!("vertical score entries per window changed from {prev} to {w}")))
                }
                Some(_) => {}
            }
            peak = peak.max(out.graph_bytes);
            loss_sum += out.loss;
            epoch_steps += 1;
            steps += 1;
        }
        let val = evaluate(model, val_ds, cfg.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            steps: epoch_steps,
            train_loss: loss_sum / epoch_steps.max(1) as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            wall_s: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.5} val mse {:.5} mae {:.5}",
            record.train_loss,
            record.val_mse,
            record.val_mae
        );
        on_epoch(&record);
        epochs.push(record);
        if !val.mse.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation MSE is {}", val.mse)));
        }
        if val.mse < best_val {
            best_val = val.mse;
            best_epoch = epoch;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    *model = best;
    let test = evaluate(model, test_ds, cfg.eval_batch_size)?;
    let per_window = per_window.unwrap_or(0);
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_mse: best_val,
        test,
        variate_ratio: cfg.variate_ratio,
        steps,
        parameters: model.parameter_count(),
        peak_graph_bytes: peak,
        vertical_entries_per_window: per_window,
        vertical_entries_per_batch: per_window * cfg.batch_size,
        wall_s: start.elapsed().as_secs_f64(),
    })
}
