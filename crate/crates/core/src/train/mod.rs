//! Optimisation: centralized-gradient Adam, the adaptive robust loss,
//! metrics, and the training loop.
//!
//! Batches are differentiated sample-by-sample (each sample owns a small
//! graph), in parallel, then merged in sample order so results do not
//! depend on thread scheduling. The loss's shape parameter is itself
//! trained: `beta = 2 - 10 * sigmoid(beta_raw)` keeps it in (-8, 2), and
//! `beta_raw` rides along in the model's parameter store for the duration
//! of the fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::window::WindowedDataset;
use crate::model::{Forecaster, SampleView};
use crate::tensor::checkpoint::ParamStore;
use crate::tensor::rng::stream;
use crate::tensor::{Graph, Shape, Var};
use crate::{Error, Result};

/// Key under which the loss shape parameter travels with the model params
/// during training.
pub const BETA_RAW_KEY: &str = "loss.beta_raw";

/// `sigmoid(x) = 0.356...` here: maps to `beta = 1`, a robust midpoint
/// between squared error (2) and heavy tails.
pub const BETA_RAW_INIT: f64 = -2.197224577336220; // ln(1/9)

/// Width of the closed-form windows around the special cases `beta = 2`
/// and `beta = 0` of the general loss.
pub const BETA_BRANCH_DELTA: f64 = 1e-4;

// ---------------------------------------------------------------------------
// gradient centralization
// ---------------------------------------------------------------------------

/// Centralize a gradient in place: for tensors of rank >= 2, subtract from
/// each column (last-axis index) its mean over all leading axes, so every
/// output unit's incoming gradient sums to zero. Rank-1 tensors (biases,
/// norm gains) are left alone.
pub fn centralize_gradient(dims: &[usize], grad: &mut [f64]) {
    if dims.len() < 2 {
        return;
    }
    let cols = dims[dims.len() - 1];
    let rows = grad.len() / cols;
    for j in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += grad[r * cols + j];
        }
        mean /= rows as f64;
        for r in 0..rows {
            grad[r * cols + j] -= mean;
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

fn default_loss_c() -> f64 {
    1.0
}

fn default_loss_penalty() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied after centralization, before Adam.
    pub clip_norm: Option<f64>,
    /// Enable gradient centralization (the `no_gc` ablation turns it off).
    pub centralize: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            centralize: true,
        }
    }
}

/// Adam with optional gradient centralization and global-norm clipping.
pub struct GcAdam {
    cfg: OptimConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    names: Vec<String>,
}

impl GcAdam {
    /// The optimizer is bound to a fixed parameter layout (name order).
    pub fn new(cfg: OptimConfig, store: &ParamStore) -> GcAdam {
        let names: Vec<String> = store.names().map(String::from).collect();
        let m = names.iter().map(|n| vec![0.0; store.get(n).shape.numel()]).collect();
        let v = names.iter().map(|n| vec![0.0; store.get(n).shape.numel()]).collect();
        GcAdam { cfg, t: 0, m, v, names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// One update from per-parameter gradients aligned with `names()`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Vec<f64>]) -> Result<()> {
        assert_eq!(grads.len(), self.names.len(), "gradient/parameter layout mismatch");
        for (name, g) in self.names.iter().zip(grads.iter()) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("non-finite gradient for {name}")));
            }
        }
        if self.cfg.centralize {
            for (name, g) in self.names.iter().zip(grads.iter_mut()) {
                centralize_gradient(&store.get(name).shape.0, g);
            }
        }
        if let Some(limit) = self.cfg.clip_norm {
            let norm: f64 =
                grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > limit {
                let s = limit / norm;
                for g in grads.iter_mut() {
                    for v in g.iter_mut() {
                        *v *= s;
                    }
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, name) in self.names.iter().enumerate() {
            let w = store.values_mut(name);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..w.len() {
                let g = grads[i][k];
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                w[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// adaptive robust loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Adaptive robust loss with trainable shape parameter.
    Robust {
        /// Residual scale `c`.
        #[serde(default = "default_loss_c")]
        c: f64,
        /// Coefficient of the `-penalty * beta` regulariser (0 disables);
        /// it nudges the shape toward the light-tailed end so the loss
        /// only goes heavy-tailed when the data insists.
        #[serde(default = "default_loss_penalty")]
        penalty: f64,
    },
    /// Plain mean-squared error (ablation).
    Mse,
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Robust { c: 1.0, penalty: 0.01 }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shape parameter from its unconstrained form: `2 - 10 * sigmoid(raw)`,
/// an open interval (-8, 2).
pub fn beta_from_raw(raw: f64) -> f64 {
    2.0 - 10.0 * sigmoid(raw)
}

/// Reference (scalar) robust loss for residual `z`, shape `beta`, scale `c`.
///
/// General form `(|b-2|/b) * ((t/|b-2| + 1)^(b/2) - 1)` with `t = (z/c)^2`,
/// switching to the exact limits `t/2` at `beta = 2` and `ln(t/2 + 1)` at
/// `beta = 0` inside a `BETA_BRANCH_DELTA` window.
pub fn robust_loss_scalar(z: f64, beta: f64, c: f64) -> f64 {
    let t = (z / c) * (z / c);
    if (beta - 2.0).abs() <= BETA_BRANCH_DELTA {
        0.5 * t
    } else if beta.abs() <= BETA_BRANCH_DELTA {
        (0.5 * t + 1.0).ln()
    } else {
        let am = (beta - 2.0).abs();
        am / beta * ((t / am + 1.0).powf(0.5 * beta) - 1.0)
    }
}

/// Graph form of the robust loss: mean over the residual vector, minus the
/// shape penalty. Gradients flow into the residuals and, on the general
/// branch, into `beta_raw`. Inside the closed-form windows the shape is
/// treated as locally constant (its gradient there is numerically ~1e-4
/// anyway, bounded by the window width).
pub fn robust_loss_graph(
    g: &Graph,
    residual: &Var,
    beta_raw: &Var,
    c: f64,
    penalty: f64,
) -> Var {
    assert!(c > 0.0, "loss scale must be positive");
    let raw_val = beta_raw.values()[0];
    let beta_val = beta_from_raw(raw_val);
    let t = residual.scale(1.0 / c).mul(&residual.scale(1.0 / c));

    let mean = if (beta_val - 2.0).abs() <= BETA_BRANCH_DELTA {
        t.scale(0.5).mean_all()
    } else if beta_val.abs() <= BETA_BRANCH_DELTA {
        t.scale(0.5).add_scalar(1.0).ln().mean_all()
    } else {
        // beta as a differentiable function of beta_raw
        let sig = beta_raw.neg().exp().add_scalar(1.0).recip();
        let beta = sig.scale(-10.0).add_scalar(2.0);
        let am = beta.add_scalar(-2.0).neg(); // |beta - 2| = 2 - beta here
        let a = t.mul_scalar_var(&am.recip()).add_scalar(1.0);
        // a^(beta/2) = exp(ln(a) * beta/2); a >= 1 so ln is safe
        let powed = a.ln().mul_scalar_var(&beta.scale(0.5)).exp();
        let factor = am.mul(&beta.recip());
        powed.add_scalar(-1.0).mul_scalar_var(&factor).mean_all()
    };
    if penalty != 0.0 {
        // -penalty * beta, recomputed differentiably so the regulariser
        // also steers beta_raw
        let sig = beta_raw.neg().exp().add_scalar(1.0).recip();
        let beta = sig.scale(-10.0).add_scalar(2.0);
        mean.sub(&beta.scale(penalty))
    } else {
        let _ = g;
        mean
    }
}

/// Graph MSE: `mean(z^2)`.
pub fn mse_loss_graph(residual: &Var) -> Var {
    residual.mul(residual).mean_all()
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    /// `None` when the truth is constant (undefined variance ratio).
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Metrics {
    assert_eq!(pred.len(), truth.len(), "metrics: length mismatch");
    assert!(!pred.is_empty(), "metrics: empty input");
    let n = pred.len();
    let mut mae = 0.0;
    let mut mse = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        mae += (p - t).abs();
        mse += (p - t) * (p - t);
    }
    mae /= n as f64;
    mse /= n as f64;
    let mean_t: f64 = truth.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let r2 = if ss_tot > 0.0 { Some(1.0 - mse * n as f64 / ss_tot) } else { None };
    Metrics { mae, mse, rmse: mse.sqrt(), r2, n }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossKind,
    /// Early stopping: stop after this many epochs without the monitored
    /// loss improving by more than `min_delta`. 0 disables.
    pub patience: usize,
    pub min_delta: f64,
    /// Chronological tail fraction of the training windows held out for
    /// validation (0 disables; training loss is monitored instead).
    pub val_fraction: f64,
    /// Optional cap on optimizer steps per epoch (keeps small-machine runs
    /// bounded; the shuffled prefix is used).
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            optim: OptimConfig::default(),
            loss: LossKind::default(),
            patience: 3,
            min_delta: 1e-5,
            val_fraction: 0.1,
            max_steps_per_epoch: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub beta: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_monitored: f64,
    pub stopped_early: bool,
    pub diverged: bool,
    pub final_beta: Option<f64>,
}

fn batch_loss_and_grads(
    model: &Forecaster,
    data: &WindowedDataset,
    idxs: &[usize],
    names: &[String],
    loss: &LossKind,
    epoch: usize,
    seed: u64,
) -> (f64, Vec<Vec<f64>>) {
    // per-sample graphs in parallel; merge in sample order for determinism
    let per_sample: Vec<(f64, Vec<Option<Vec<f64>>>)> = idxs
        .par_iter()
        .map(|&s| {
            let g = Graph::new();
            let view = SampleView::from_dataset(data, s);
            let mut drop_rng = stream(seed, &format!("dropout/e{epoch}/s{s}"));
            let pred = model.forward(&g, &view, Some(&mut drop_rng));
            let target = g.constant(Shape::of(&[data.l_y]), view.target.to_vec());
            let residual = pred.sub(&target);
            let loss_var = match loss {
                LossKind::Robust { c, penalty } => {
                    let braw = model.params.var(&g, BETA_RAW_KEY);
                    robust_loss_graph(&g, &residual, &braw, *c, *penalty)
                }
                LossKind::Mse => mse_loss_graph(&residual),
            };
            let grads = loss_var.backward();
            let per_param: Vec<Option<Vec<f64>>> = names
                .iter()
                .map(|n| g.named_node(n).and_then(|id| grads.by_id(id)).map(|s| s.to_vec()))
                .collect();
            (loss_var.item(), per_param)
        })
        .collect();

    let inv = 1.0 / idxs.len() as f64;
    let mut total = 0.0;
    let mut merged: Vec<Vec<f64>> = names
        .iter()
        .map(|n| vec![0.0; model.params.get(n).shape.numel()])
        .collect();
    for (l, per_param) in per_sample {
        total += l;
        for (acc, g) in merged.iter_mut().zip(per_param) {
            if let Some(g) = g {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v * inv;
                }
            }
        }
    }
    (total * inv, merged)
}

fn eval_loss(
    model: &Forecaster,
    data: &WindowedDataset,
    idxs: &[usize],
    loss: &LossKind,
) -> f64 {
    let total: f64 = idxs
        .par_iter()
        .map(|&s| {
            let g = Graph::new();
            let view = SampleView::from_dataset(data, s);
            let pred = model.forward(&g, &view, None);
            let target = g.constant(Shape::of(&[data.l_y]), view.target.to_vec());
            let residual = pred.sub(&target);
            match loss {
                LossKind::Robust { c, penalty } => {
                    let braw = model.params.var(&g, BETA_RAW_KEY);
                    robust_loss_graph(&g, &residual, &braw, *c, *penalty).item()
                }
                LossKind::Mse => mse_loss_graph(&residual).item(),
            }
        })
        .sum();
    total / idxs.len() as f64
}

/// Fit `model` on `data`. Returns per-epoch statistics; on completion the
/// model holds the parameters of the best monitored epoch.
pub fn train(model: &mut Forecaster, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    use rand::seq::SliceRandom;

    if data.n_samples == 0 {
        return Err(Error::Sizing("train: empty dataset".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("train: epochs and batch_size must be positive".into()));
    }
    if !(0.0..0.9).contains(&cfg.val_fraction) {
        return Err(Error::Config(format!("val_fraction {} outside [0, 0.9)", cfg.val_fraction)));
    }

    let robust = matches!(cfg.loss, LossKind::Robust { .. });
    if robust {
        model.params.insert(BETA_RAW_KEY, Shape::of(&[1]), vec![BETA_RAW_INIT]);
    }

    let n_val = ((data.n_samples as f64) * cfg.val_fraction).floor() as usize;
    let n_train = data.n_samples - n_val;
    if n_train == 0 {
        if robust {
            model.params.remove(BETA_RAW_KEY);
        }
        return Err(Error::Sizing("train: no training samples left after validation split".into()));
    }
    // validation is the chronological tail: windows are ordered by start row
    let train_idx: Vec<usize> = (0..n_train).collect();
    let val_idx: Vec<usize> = (n_train..data.n_samples).collect();

    let names: Vec<String> = model.params.names().map(String::from).collect();
    let mut opt = GcAdam::new(cfg.optim.clone(), &model.params);

    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: 0,
        best_monitored: f64::INFINITY,
        stopped_early: false,
        diverged: false,
        final_beta: None,
    };
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = stream(cfg.seed, &format!("shuffle/e{epoch}"));
        order.shuffle(&mut shuffle_rng);

        let mut steps = 0usize;
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(cap) = cfg.max_steps_per_epoch {
                if steps >= cap {
                    break;
                }
            }
            let (loss, mut grads) =
                batch_loss_and_grads(model, data, chunk, &names, &cfg.loss, epoch, cfg.seed);
            if !loss.is_finite() {
                report.diverged = true;
                break 'epochs;
            }
            if let Err(e) = opt.step(&mut model.params, &mut grads) {
                // non-finite gradients: record divergence instead of failing
                let _ = e;
                report.diverged = true;
                break 'epochs;
            }
            epoch_loss += loss;
            steps += 1;
        }
        if steps == 0 {
            break;
        }
        epoch_loss /= steps as f64;

        let val_loss =
            if val_idx.is_empty() { None } else { Some(eval_loss(model, data, &val_idx, &cfg.loss)) };
        let beta = robust.then(|| beta_from_raw(model.params.get(BETA_RAW_KEY).values[0]));
        report.history.push(EpochStats { epoch, train_loss: epoch_loss, val_loss, beta, steps });

        let monitored = val_loss.unwrap_or(epoch_loss);
        if monitored < report.best_monitored - cfg.min_delta {
            report.best_monitored = monitored;
            report.best_epoch = epoch;
            best_params = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.params = best;
    }
    if robust {
        report.final_beta =
            Some(beta_from_raw(model.params.get(BETA_RAW_KEY).values[0]));
        model.params.remove(BETA_RAW_KEY);
    }
    Ok(report)
}

/// Predictions for every sample of `data` (flat, sample-major) plus metrics
/// against the windowed targets.
pub fn evaluate(model: &Forecaster, data: &WindowedDataset) -> (Vec<f64>, Metrics) {
    let preds: Vec<Vec<f64>> = (0..data.n_samples)
        .into_par_iter()
        .map(|s| model.predict(&SampleView::from_dataset(data, s)))
        .collect();
    let flat: Vec<f64> = preds.into_iter().flatten().collect();
    let m = metrics(&flat, &data.targets);
    (flat, m)
}

/// Persistence baseline: repeat the last observed target value across the
/// horizon. Any trained model should beat this.
pub fn persistence_metrics(data: &WindowedDataset) -> Metrics {
    let mut preds = Vec::with_capacity(data.n_samples * data.l_y);
    for s in 0..data.n_samples {
        let last = *SampleView::from_dataset(data, s).dec_start.last().unwrap();
        preds.extend(std::iter::repeat(last).take(data.l_y));
    }
    metrics(&preds, &data.targets)
}
