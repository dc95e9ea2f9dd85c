//! Minibatch Adam fitting of set networks with early stopping.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Predictor, Regressor, Scratch, SetSamples};
use crate::deepsets::{ArchKind, Architecture, SetAdam, SetGrads, SetModel, Workspace};
use crate::error::{config_err, Error, Result};
use crate::nn::AdamConfig;
use crate::rng::{rng_from_seed, sub_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    /// Fraction of training days held out for early stopping.
    pub val_frac: f64,
    pub seed: u64,
    pub kind: ArchKind,
    pub arch: Architecture,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 300,
            batch: 64,
            lr: 1e-3,
            patience: 20,
            val_frac: 0.1,
            seed: 0,
            kind: ArchKind::Pie,
            arch: Architecture::default(),
        }
    }
}

impl TrainHyper {
    pub fn with_kind(kind: ArchKind) -> Self {
        TrainHyper {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.patience == 0 {
            return config_err("epochs, batch and patience must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return config_err(format!("val_frac must lie in [0, 1), got {}", self.val_frac));
        }
        if self.arch.hidden == 0 || self.arch.d_emb == 0 {
            return config_err("hidden width and embedding size must be positive");
        }
        Ok(())
    }
}

/// Per-column standardization of the confounder part of a row; the trailing
/// treatment column passes through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(row_dim: usize) -> Self {
        FeatureScaler {
            mean: vec![0.0; row_dim - 1],
            scale: vec![1.0; row_dim - 1],
        }
    }

    /// Fits on the center rows of `samples`.
    pub fn fit(samples: &SetSamples) -> Self {
        let m = samples.row_dim - 1;
        let n = samples.len().max(1) as f64;
        let mut mean = vec![0.0; m];
        for k in 0..samples.len() {
            for (acc, v) in mean.iter_mut().zip(samples.center(k)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for k in 0..samples.len() {
            for ((acc, v), mu) in var.iter_mut().zip(samples.center(k)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        FeatureScaler { mean, scale }
    }

    pub fn apply(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
            *v = (*v - m) / s;
        }
    }

    /// Scales every row of a flat buffer into `out`.
    pub fn apply_flat(&self, rows: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(rows);
        let d = self.mean.len() + 1;
        out.chunks_exact_mut(d).for_each(|r| self.apply(r));
    }
}

/// A trained set network with its input and target standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel {
    pub model: SetModel,
    pub scaler: FeatureScaler,
    pub y_mean: f64,
    pub y_scale: f64,
    /// Mean squared error on the training days, in target units.
    pub train_loss: f64,
    pub epochs_run: usize,
}

impl FittedModel {
    /// Raw network output on scaled rows already in `scratch`.
    fn net(&self, scratch: &mut Scratch) -> f64 {
        self.model.forward_rows(&scratch.center, &scratch.neighbors, &mut scratch.set)
    }

    fn load(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) {
        scratch.center.clear();
        scratch.center.extend_from_slice(center);
        self.scaler.apply(&mut scratch.center);
        self.scaler.apply_flat(neighbors, &mut scratch.neighbors);
    }

    /// Interference summary of the scaled neighbor rows.
    pub fn summary(&self, neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        self.scaler.apply_flat(neighbors, &mut scratch.neighbors);
        self.model.summary_rows(&scratch.neighbors, &mut scratch.set).to_vec()
    }

    /// Scaled center row followed by the interference summary.
    pub fn features(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        self.load(center, neighbors, scratch);
        let mut out = scratch.center.clone();
        out.extend_from_slice(self.model.summary_rows(&scratch.neighbors, &mut scratch.set));
        out
    }
}

impl Predictor for FittedModel {
    fn predict(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64 {
        self.load(center, neighbors, scratch);
        self.y_mean + self.y_scale * self.net(scratch)
    }

    fn train_loss(&self) -> Option<f64> {
        Some(self.train_loss)
    }
}

/// Fits PIE or mean-field networks.
#[derive(Clone, Debug, PartialEq)]
pub struct NetRegressor {
    pub hyper: TrainHyper,
}

impl Regressor for NetRegressor {
    type Model = FittedModel;

    fn fit(&self, samples: &SetSamples, seed: u64) -> Result<FittedModel> {
        fit_set_model(samples, &self.hyper, seed)
    }
}

/// Splits the distinct days of `groups` into (train, validation) sample indices.
fn split_by_day(groups: &[usize], val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut days: Vec<usize> = groups.to_vec();
    days.sort_unstable();
    days.dedup();
    let n_val = if days.len() >= 2 && val_frac > 0.0 {
        ((val_frac * days.len() as f64).round() as usize).clamp(1, days.len() - 1)
    } else {
        0
    };
    days.shuffle(&mut rng_from_seed(seed));
    let val_days = &days[..n_val];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (k, g) in groups.iter().enumerate() {
        if val_days.contains(g) {
            val.push(k);
        } else {
            train.push(k);
        }
    }
    (train, val)
}

fn mse(model: &SetModel, samples: &SetSamples, targets: &[f64], idx: &[usize], ws: &mut Workspace) -> f64 {
    let mut acc = 0.0;
    for &k in idx {
        let e = model.forward_rows(samples.center(k), samples.neighbors(k), ws) - targets[k];
        acc += e * e;
    }
    acc / idx.len().max(1) as f64
}

/// Minimizes the mean squared error of a fresh network on `samples` with
/// minibatch Adam. Early stopping watches a held-out set of days and the
/// best parameters seen are returned.
pub fn fit_set_model(samples: &SetSamples, hyper: &TrainHyper, seed: u64) -> Result<FittedModel> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training samples".into()));
    }
    if samples.targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression target".into()));
    }
    let scaler = FeatureScaler::fit(samples);
    let scaled = samples.map_rows(|r| scaler.apply(r));
    let n = samples.len() as f64;
    let y_mean = samples.targets.iter().sum::<f64>() / n;
    let y_sd = (samples.targets.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n).sqrt();
    if y_sd <= 1e-12 * y_mean.abs().max(1.0) {
        // A constant target is fitted exactly by the output offset alone.
        let model = SetModel::new(hyper.kind, samples.row_dim - 1, hyper.arch, sub_seed(seed, 0))?;
        return Ok(FittedModel {
            model,
            scaler,
            y_mean,
            y_scale: 0.0,
            train_loss: 0.0,
            epochs_run: 0,
        });
    }
    let y_scale = y_sd;
    let targets: Vec<f64> = samples.targets.iter().map(|y| (y - y_mean) / y_scale).collect();

    let (mut train, val) = split_by_day(&samples.groups, hyper.val_frac, sub_seed(seed, 2));
    let mut model = SetModel::new(hyper.kind, samples.row_dim - 1, hyper.arch, sub_seed(seed, 0))?;
    let mut adam = SetAdam::new(
        &model,
        AdamConfig {
            lr: hyper.lr,
            ..Default::default()
        },
    );
    let mut grads = SetGrads::zeros_like(&model);
    let mut ws = Workspace::default();
    let mut rng = rng_from_seed(sub_seed(seed, 1));

    let mut best = (f64::INFINITY, model.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    for _ in 0..hyper.epochs {
        epochs_run += 1;
        train.shuffle(&mut rng);
        for batch in train.chunks(hyper.batch) {
            grads.fill_zero();
            let scale = 2.0 / batch.len() as f64;
            for &k in batch {
                let out = model.forward_rows(scaled.center(k), scaled.neighbors(k), &mut ws);
                model.backward_rows(scaled.neighbors(k), scale * (out - targets[k]), &mut ws, &mut grads);
            }
            adam.update(&mut model, &grads)?;
        }
        if val.is_empty() {
            continue;
        }
        let v = mse(&model, &scaled, &targets, &val, &mut ws);
        if v < best.0 {
            best = (v, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    if !val.is_empty() {
        model = best.1;
    }
    if !model.psi().is_finite() {
        return Err(Error::InvalidInput("training diverged to non-finite parameters".into()));
    }
    let train_loss = mse(&model, &scaled, &targets, &train, &mut ws) * y_scale * y_scale;
    Ok(FittedModel {
        model,
        scaler,
        y_mean,
        y_scale,
        train_loss,
        epochs_run,
    })
}
