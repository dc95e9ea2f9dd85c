//! Off-policy value estimators.
//!
//! The estimators are written against small traits so that fitted networks,
//! exact response functions, and degenerate stand-ins can be swapped in:
//!
//! * [`Predictor`]: a scalar function of a center row and its neighbor rows.
//! * [`Regressor`]: something that fits a [`Predictor`] to [`SetSamples`].
//! * [`TargetPolicy`]: the evaluated policy.

use serde::{Deserialize, Serialize};

use crate::deepsets::{ArchKind, Workspace};
use crate::error::{config_err, Error, Result};
use crate::policy::PolicySpec;

pub mod dynamic;
pub mod nondynamic;
pub mod ratio;
pub mod train;

pub use train::{FeatureScaler, FittedModel, NetRegressor, TrainHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Vb,
    Is,
    Dr,
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vb" => Ok(EstimatorKind::Vb),
            "is" => Ok(EstimatorKind::Is),
            "dr" => Ok(EstimatorKind::Dr),
            other => config_err(format!("unknown estimator '{other}'")),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EstimatorKind::Vb => "vb",
            EstimatorKind::Is => "is",
            EstimatorKind::Dr => "dr",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Final training loss of each fold's outcome or Q model, in target units.
    #[serde(default)]
    pub train_loss: Vec<f64>,
    /// Fraction of cells with a nonzero importance numerator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_fraction: Option<f64>,
    /// Cells whose numerator was nonzero but whose denominator vanished.
    #[serde(default)]
    pub zero_denominator: usize,
    /// Ratio-model kernel bandwidth per fold.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bandwidth: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchKind>,
    pub estimate: f64,
    /// Contribution of each day; the estimate is their mean.
    pub per_day: Vec<f64>,
    /// Mean of the per-day contributions within each batch.
    pub per_fold: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    pub(crate) fn from_days(estimator: EstimatorKind, per_day: Vec<f64>, folds: &FoldPlan) -> Self {
        let mut per_fold = vec![0.0; folds.m()];
        let mut counts = vec![0usize; folds.m()];
        for (j, v) in per_day.iter().enumerate() {
            per_fold[folds.batch_of(j)] += v;
            counts[folds.batch_of(j)] += 1;
        }
        for (f, n) in per_fold.iter_mut().zip(counts) {
            *f /= n.max(1) as f64;
        }
        let estimate = per_day.iter().sum::<f64>() / per_day.len() as f64;
        EstimateReport {
            estimator,
            arch: None,
            estimate,
            per_day,
            per_fold,
            diagnostics: Diagnostics::default(),
        }
    }
}

/// Partition of days into `m` cross-fitting batches (day `j` goes to batch `j mod m`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    m: usize,
    assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn new(n_days: usize, m: usize) -> Result<Self> {
        if m < 2 {
            return config_err(format!("cross-fitting needs at least 2 batches, got {m}"));
        }
        if n_days < m {
            return config_err(format!("{m} batches need at least {m} days, got {n_days}"));
        }
        Ok(FoldPlan {
            m,
            assignment: (0..n_days).map(|j| j % m).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n_days(&self) -> usize {
        self.assignment.len()
    }

    pub fn batch_of(&self, day: usize) -> usize {
        self.assignment[day]
    }

    pub fn eval_days(&self, b: usize) -> Vec<usize> {
        (0..self.n_days()).filter(|&j| self.assignment[j] == b).collect()
    }

    /// Days used to fit the model applied to batch `b`.
    pub fn train_days(&self, b: usize) -> Vec<usize> {
        (0..self.n_days()).filter(|&j| self.assignment[j] != b).collect()
    }
}

/// Position of a decision: region, time step (0 in the one-shot setting), day.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub region: usize,
    pub t: usize,
    pub day: usize,
}

pub trait TargetPolicy: Sync {
    fn act(&self, at: Cell, x: &[f64]) -> u8;
}

impl TargetPolicy for PolicySpec {
    fn act(&self, at: Cell, x: &[f64]) -> u8 {
        self.action(at.region, x)
    }
}

/// Scratch buffers reused across predictions.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    pub set: Workspace,
    pub center: Vec<f64>,
    pub neighbors: Vec<f64>,
}

pub trait Predictor: Sync {
    /// Value at a center row and its flat neighbor rows, both in raw units.
    fn predict(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64;

    /// Final training loss, when the predictor was fitted.
    fn train_loss(&self) -> Option<f64> {
        None
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn predict(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64 {
        (**self).predict(center, neighbors, scratch)
    }

    fn train_loss(&self) -> Option<f64> {
        (**self).train_loss()
    }
}

/// The zero function.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn predict(&self, _: &[f64], _: &[f64], _: &mut Scratch) -> f64 {
        0.0
    }
}

/// Wraps a closure of `(center, neighbors)`.
pub struct FnPredictor<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> Predictor for FnPredictor<F> {
    fn predict(&self, center: &[f64], neighbors: &[f64], _: &mut Scratch) -> f64 {
        (self.0)(center, neighbors)
    }
}

pub trait Regressor: Sync {
    type Model: Predictor + Send;

    fn fit(&self, samples: &SetSamples, seed: u64) -> Result<Self::Model>;
}

/// Constant predictor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPredictor(pub f64);

impl Predictor for ConstantPredictor {
    fn predict(&self, _: &[f64], _: &[f64], _: &mut Scratch) -> f64 {
        self.0
    }
}

/// Fits the sample mean of the targets; exact for constant targets.
#[derive(Clone, Copy, Debug, Default)]
pub struct MeanRegressor;

impl Regressor for MeanRegressor {
    type Model = ConstantPredictor;

    fn fit(&self, samples: &SetSamples, _seed: u64) -> Result<ConstantPredictor> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        Ok(ConstantPredictor(samples.targets.iter().sum::<f64>() / samples.len() as f64))
    }
}

/// Regression samples on variable-size neighbor sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SetSamples {
    pub row_dim: usize,
    centers: Vec<f64>,
    nb_start: Vec<usize>,
    nbs: Vec<f64>,
    pub targets: Vec<f64>,
    /// Day each sample came from.
    pub groups: Vec<usize>,
}

impl SetSamples {
    pub fn new(row_dim: usize) -> Self {
        SetSamples {
            row_dim,
            nb_start: vec![0],
            ..Default::default()
        }
    }

    pub fn push(&mut self, center: &[f64], neighbors: &[f64], target: f64, group: usize) {
        debug_assert_eq!(center.len(), self.row_dim);
        debug_assert_eq!(neighbors.len() % self.row_dim, 0);
        self.centers.extend_from_slice(center);
        self.nbs.extend_from_slice(neighbors);
        self.nb_start.push(self.nbs.len());
        self.targets.push(target);
        self.groups.push(group);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.row_dim..(k + 1) * self.row_dim]
    }

    pub fn neighbors(&self, k: usize) -> &[f64] {
        &self.nbs[self.nb_start[k]..self.nb_start[k + 1]]
    }

    /// Copy with every row mapped through `f`.
    pub fn map_rows(&self, mut f: impl FnMut(&mut [f64])) -> SetSamples {
        let mut out = self.clone();
        out.centers.chunks_exact_mut(self.row_dim).for_each(&mut f);
        out.nbs.chunks_exact_mut(self.row_dim).for_each(&mut f);
        out
    }
}

/// Appends the neighbor rows of region `i` from per-region rows.
pub(crate) fn gather_neighbors(neighbors: &[usize], rows: &[Vec<f64>], out: &mut Vec<f64>) {
    out.clear();
    for &k in neighbors {
        out.extend_from_slice(&rows[k]);
    }
}

/// Per-region rows `x ++ a`.
pub(crate) fn rows_with_actions<'a>(x: impl Iterator<Item = &'a [f64]>, a: impl Iterator<Item = u8>) -> Vec<Vec<f64>> {
    x.zip(a)
        .map(|(x, a)| {
            let mut r = x.to_vec();
            r.push(a as f64);
            r
        })
        .collect()
}

pub(crate) fn check_fold_plan(folds: &FoldPlan, n_days: usize) -> Result<()> {
    if folds.n_days() != n_days {
        return config_err(format!("fold plan covers {} days, data has {n_days}", folds.n_days()));
    }
    for b in 0..folds.m() {
        if folds.train_days(b).is_empty() {
            return config_err(format!("batch {b} leaves no training days"));
        }
    }
    Ok(())
}
