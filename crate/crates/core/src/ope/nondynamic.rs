//! Value-based, relaxed importance sampling, and doubly robust estimators
//! for one-shot spatial data.

use rand::Rng as _;
use rayon::prelude::*;

use super::{
    check_fold_plan, gather_neighbors, rows_with_actions, Cell, EstimateReport, EstimatorKind, FittedModel, FoldPlan,
    NetRegressor, Predictor, Regressor, Scratch, SetSamples, TargetPolicy, TrainHyper,
};
use crate::error::{config_err, Error, Result};
use crate::rng::{rng_from_seed, sub_seed, sub_seed_path};
use crate::sim_nondynamic::{NondynamicDataset, Setting};

/// Neighbor configurations are enumerated exactly up to this many; beyond
/// it the joint probability is estimated from this many resamples.
pub const MAX_ENUMERATED: usize = 256;
pub const DEFAULT_QUANTILE: f64 = 0.2;

/// Interference summary `m(neighbors)` used by the relaxed indicator.
pub trait InterferenceMap: Sync {
    fn summary(&self, neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64>;
}

impl InterferenceMap for FittedModel {
    fn summary(&self, neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        FittedModel::summary(self, neighbors, scratch)
    }
}

/// A summary that ignores its input, i.e. no interference.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantMap;

impl InterferenceMap for ConstantMap {
    fn summary(&self, _: &[f64], _: &mut Scratch) -> Vec<f64> {
        Vec::new()
    }
}

/// Probability that the behavior policy treats a region.
pub trait BehaviorModel: Sync {
    fn prob_treat(&self, at: Cell, x: &[f64]) -> f64;
}

/// Known randomized behavior.
#[derive(Clone, Copy, Debug)]
pub struct KnownBernoulli(pub f64);

impl BehaviorModel for KnownBernoulli {
    fn prob_treat(&self, _: Cell, _: &[f64]) -> f64 {
        self.0
    }
}

/// Exact noiseless response of a simulated setting, as a [`Predictor`] on
/// `(U, V, A)` rows with neighbors in canonical order.
#[derive(Clone, Copy, Debug)]
pub struct TrueResponse(pub Setting);

impl Predictor for TrueResponse {
    fn predict(&self, center: &[f64], neighbors: &[f64], _: &mut Scratch) -> f64 {
        let nb = neighbors.chunks_exact(3).map(|r| (&r[..2], r[2]));
        self.0.response(&center[..2], center[2], nb)
    }
}

fn observed_rows(data: &NondynamicDataset, day: usize) -> Vec<Vec<f64>> {
    rows_with_actions(data.x.iter().map(|r| r[day].as_slice()), data.a.iter().map(|r| r[day]))
}

fn policy_actions<P: TargetPolicy + ?Sized>(data: &NondynamicDataset, policy: &P, day: usize) -> Vec<u8> {
    (0..data.n_regions())
        .map(|i| policy.act(Cell { region: i, t: 0, day }, &data.x[i][day]))
        .collect()
}

fn policy_rows<P: TargetPolicy + ?Sized>(data: &NondynamicDataset, policy: &P, day: usize) -> Vec<Vec<f64>> {
    let a = policy_actions(data, policy, day);
    rows_with_actions(data.x.iter().map(|r| r[day].as_slice()), a.into_iter())
}

/// Regression samples `(X, A, neighbors) -> Y` at observed actions.
pub fn outcome_samples(data: &NondynamicDataset, days: &[usize]) -> SetSamples {
    let mut s = SetSamples::new(data.confounder_dim() + 1);
    let mut nb = Vec::new();
    for &j in days {
        let rows = observed_rows(data, j);
        for i in 0..data.n_regions() {
            gather_neighbors(&data.grid.neighbors[i], &rows, &mut nb);
            s.push(&rows[i], &nb, data.y[i][j], j);
        }
    }
    s
}

pub fn fit_outcome_model<R: Regressor>(data: &NondynamicDataset, days: &[usize], reg: &R, seed: u64) -> Result<R::Model> {
    if days.is_empty() {
        return Err(Error::InvalidInput("no training days".into()));
    }
    reg.fit(&outcome_samples(data, days), seed)
}

/// One model per batch, each fitted on the days outside that batch.
pub fn cross_fit<R: Regressor>(data: &NondynamicDataset, folds: &FoldPlan, reg: &R, seed: u64) -> Result<Vec<R::Model>> {
    check_fold_plan(folds, data.n_days())?;
    (0..folds.m())
        .into_par_iter()
        .map(|b| fit_outcome_model(data, &folds.train_days(b), reg, sub_seed(seed, b as u64)))
        .collect()
}

fn check_models<T>(folds: &FoldPlan, models: &[T]) -> Result<()> {
    if models.len() != folds.m() {
        return Err(Error::InvalidInput(format!(
            "{} models supplied for {} batches",
            models.len(),
            folds.m()
        )));
    }
    Ok(())
}

/// `S^-1 sum_j sum_i f^(-b(j))(X_ij, pi(X_ij), neighbors at pi)`.
pub fn vb_from_models<P: Predictor, T: TargetPolicy + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    models: &[P],
) -> Result<EstimateReport> {
    check_fold_plan(folds, data.n_days())?;
    check_models(folds, models)?;
    let per_day = (0..data.n_days())
        .into_par_iter()
        .map_init(
            || (Scratch::default(), Vec::new()),
            |(sc, nb), j| {
                let model = &models[folds.batch_of(j)];
                let rows = policy_rows(data, policy, j);
                (0..data.n_regions())
                    .map(|i| {
                        gather_neighbors(&data.grid.neighbors[i], &rows, nb);
                        model.predict(&rows[i], nb, sc)
                    })
                    .sum::<f64>()
            },
        )
        .collect();
    let mut r = EstimateReport::from_days(EstimatorKind::Vb, per_day, folds);
    r.diagnostics.train_loss = models.iter().filter_map(|m| m.train_loss()).collect();
    Ok(r)
}

/// Importance weights indexed `[region][day]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsWeights {
    pub w: Vec<Vec<f64>>,
    pub nonzero_fraction: f64,
    pub zero_denominator: usize,
}

impl IsWeights {
    pub fn zeros(r: usize, s: usize) -> Self {
        IsWeights {
            w: vec![vec![0.0; s]; r],
            nonzero_fraction: 0.0,
            zero_denominator: 0,
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Relaxed importance weights
/// `1{A_i = pi_i} 1{gap_i <= tau_i} / P_b(A_i = pi_i, gap_i <= tau_i)`,
/// where `gap_i = |m(neighbors at A) - m(neighbors at pi)|` and `tau_i` is the
/// `q`-quantile of region `i`'s gaps over days. The probability is taken
/// under the behavior model with neighbor treatments drawn independently.
pub fn is_weights<M: InterferenceMap, T: TargetPolicy + ?Sized, B: BehaviorModel + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    maps: &[M],
    q: f64,
    behavior: &B,
    seed: u64,
) -> Result<IsWeights> {
    if !(q > 0.0 && q < 1.0) {
        return config_err(format!("quantile q must lie in (0, 1), got {q}"));
    }
    check_fold_plan(folds, data.n_days())?;
    check_models(folds, maps)?;
    let (r, s) = (data.n_regions(), data.n_days());
    let m = data.confounder_dim();

    struct DayCells {
        pi: Vec<u8>,
        pi_summary: Vec<Vec<f64>>,
        gap: Vec<f64>,
    }
    let days: Vec<DayCells> = (0..s)
        .into_par_iter()
        .map_init(
            || (Scratch::default(), Vec::new()),
            |(sc, nb), j| {
                let map = &maps[folds.batch_of(j)];
                let obs = observed_rows(data, j);
                let pi = policy_actions(data, policy, j);
                let pol = rows_with_actions(data.x.iter().map(|v| v[j].as_slice()), pi.iter().copied());
                let mut pi_summary = Vec::with_capacity(r);
                let mut gap = Vec::with_capacity(r);
                for i in 0..r {
                    gather_neighbors(&data.grid.neighbors[i], &pol, nb);
                    let sp = map.summary(nb, sc);
                    gather_neighbors(&data.grid.neighbors[i], &obs, nb);
                    gap.push(euclid(&map.summary(nb, sc), &sp));
                    pi_summary.push(sp);
                }
                DayCells { pi, pi_summary, gap }
            },
        )
        .collect();
    let tau: Vec<f64> = (0..r)
        .map(|i| quantile(&days.iter().map(|d| d.gap[i]).collect::<Vec<_>>(), q))
        .collect();

    let cells: Vec<(f64, bool, bool)> = (0..s)
        .into_par_iter()
        .flat_map_iter(|j| (0..r).map(move |i| (i, j)))
        .map_init(
            || (Scratch::default(), Vec::new()),
            |(sc, nb), (i, j)| {
                let day = &days[j];
                let a_match = data.a[i][j] == day.pi[i];
                if !(a_match && day.gap[i] <= tau[i]) {
                    return (0.0, false, false);
                }
                let map = &maps[folds.batch_of(j)];
                let at = Cell { region: i, t: 0, day: j };
                let p_i = behavior.prob_treat(at, &data.x[i][j]);
                let p_center = if day.pi[i] == 1 { p_i } else { 1.0 - p_i };
                let nbrs = &data.grid.neighbors[i];
                let p_nb: Vec<f64> = nbrs
                    .iter()
                    .map(|&k| behavior.prob_treat(Cell { region: k, t: 0, day: j }, &data.x[k][j]))
                    .collect();
                let fill = |acts: &mut dyn Iterator<Item = u8>, nb: &mut Vec<f64>| {
                    nb.clear();
                    for (&k, a) in nbrs.iter().zip(acts) {
                        nb.extend_from_slice(&data.x[k][j]);
                        nb.push(a as f64);
                    }
                };
                let within = |nb: &[f64], sc: &mut Scratch| euclid(&map.summary(nb, sc), &day.pi_summary[i]) <= tau[i];
                let k = nbrs.len();
                let p_gap = if k < usize::BITS as usize && (1usize << k) <= MAX_ENUMERATED {
                    let mut total = 0.0;
                    for mask in 0..(1usize << k) {
                        let prob: f64 = (0..k)
                            .map(|b| if mask >> b & 1 == 1 { p_nb[b] } else { 1.0 - p_nb[b] })
                            .product();
                        if prob == 0.0 {
                            continue;
                        }
                        fill(&mut (0..k).map(|b| (mask >> b & 1) as u8), nb);
                        debug_assert_eq!(nb.len(), k * (m + 1));
                        if within(nb, sc) {
                            total += prob;
                        }
                    }
                    total
                } else {
                    let mut rng = rng_from_seed(sub_seed_path(seed, &[i as u64, j as u64]));
                    let mut hits = 0usize;
                    for _ in 0..MAX_ENUMERATED {
                        let acts: Vec<u8> = p_nb.iter().map(|&p| rng.random_bool(p.clamp(0.0, 1.0)) as u8).collect();
                        fill(&mut acts.into_iter(), nb);
                        if within(nb, sc) {
                            hits += 1;
                        }
                    }
                    hits as f64 / MAX_ENUMERATED as f64
                };
                let den = p_center * p_gap;
                if den > 0.0 {
                    (1.0 / den, true, false)
                } else {
                    (0.0, true, true)
                }
            },
        )
        .collect();

    let mut w = IsWeights::zeros(r, s);
    let mut nonzero = 0usize;
    for (idx, (v, nz, zd)) in cells.into_iter().enumerate() {
        let (j, i) = (idx / r, idx % r);
        w.w[i][j] = v;
        nonzero += nz as usize;
        w.zero_denominator += zd as usize;
    }
    w.nonzero_fraction = nonzero as f64 / (r * s) as f64;
    Ok(w)
}

fn check_weights(data: &NondynamicDataset, w: &IsWeights) -> Result<()> {
    if w.w.len() != data.n_regions() || w.w.iter().any(|r| r.len() != data.n_days()) {
        return Err(Error::InvalidInput("weight array does not match the data".into()));
    }
    Ok(())
}

/// `S^-1 sum_j sum_i w_ij Y_ij`.
pub fn is_from_weights(data: &NondynamicDataset, folds: &FoldPlan, w: &IsWeights) -> Result<EstimateReport> {
    check_fold_plan(folds, data.n_days())?;
    check_weights(data, w)?;
    let per_day = (0..data.n_days())
        .map(|j| (0..data.n_regions()).map(|i| w.w[i][j] * data.y[i][j]).sum::<f64>())
        .collect();
    let mut r = EstimateReport::from_days(EstimatorKind::Is, per_day, folds);
    r.diagnostics.effective_fraction = Some(w.nonzero_fraction);
    r.diagnostics.zero_denominator = w.zero_denominator;
    Ok(r)
}

/// VB plus the weighted residuals `w_ij (Y_ij - f(X_ij, A_ij, neighbors at A))`.
pub fn dr_from_parts<P: Predictor, T: TargetPolicy + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    models: &[P],
    w: &IsWeights,
) -> Result<EstimateReport> {
    let vb = vb_from_models(data, policy, folds, models)?;
    check_weights(data, w)?;
    let per_day = (0..data.n_days())
        .into_par_iter()
        .map_init(
            || (Scratch::default(), Vec::new()),
            |(sc, nb), j| {
                let model = &models[folds.batch_of(j)];
                let rows = observed_rows(data, j);
                let corr = (0..data.n_regions())
                    .map(|i| {
                        let wij = w.w[i][j];
                        if wij == 0.0 {
                            return 0.0;
                        }
                        gather_neighbors(&data.grid.neighbors[i], &rows, nb);
                        wij * (data.y[i][j] - model.predict(&rows[i], nb, sc))
                    })
                    .sum::<f64>();
                vb.per_day[j] + corr
            },
        )
        .collect();
    let mut r = EstimateReport::from_days(EstimatorKind::Dr, per_day, folds);
    r.diagnostics.train_loss = vb.diagnostics.train_loss;
    r.diagnostics.effective_fraction = Some(w.nonzero_fraction);
    r.diagnostics.zero_denominator = w.zero_denominator;
    Ok(r)
}

/// Fits the cross-fitted networks once and returns the requested estimates
/// in the order asked for.
pub fn estimate_nondynamic<T: TargetPolicy + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    hyper: &TrainHyper,
    q: f64,
    estimators: &[EstimatorKind],
) -> Result<Vec<EstimateReport>> {
    let reg = NetRegressor { hyper: hyper.clone() };
    let models = cross_fit(data, folds, &reg, hyper.seed)?;
    let behavior = KnownBernoulli(data.config_behavior_p());
    let needs_w = estimators.iter().any(|e| *e != EstimatorKind::Vb);
    let w = if needs_w {
        Some(is_weights(data, policy, folds, &models, q, &behavior, sub_seed(hyper.seed, 1 << 20))?)
    } else {
        None
    };
    estimators
        .iter()
        .map(|e| {
            let mut r = match e {
                EstimatorKind::Vb => vb_from_models(data, policy, folds, &models)?,
                EstimatorKind::Is => {
                    let mut r = is_from_weights(data, folds, w.as_ref().expect("weights"))?;
                    r.diagnostics.train_loss = models.iter().map(|m| m.train_loss).collect();
                    r
                }
                EstimatorKind::Dr => dr_from_parts(data, policy, folds, &models, w.as_ref().expect("weights"))?,
            };
            r.arch = Some(hyper.kind);
            Ok(r)
        })
        .collect()
}

pub fn vb_estimate<T: TargetPolicy + ?Sized>(data: &NondynamicDataset, policy: &T, folds: &FoldPlan, hyper: &TrainHyper) -> Result<EstimateReport> {
    Ok(estimate_nondynamic(data, policy, folds, hyper, DEFAULT_QUANTILE, &[EstimatorKind::Vb])?.remove(0))
}

pub fn is_estimate<T: TargetPolicy + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    hyper: &TrainHyper,
    q: f64,
) -> Result<EstimateReport> {
    Ok(estimate_nondynamic(data, policy, folds, hyper, q, &[EstimatorKind::Is])?.remove(0))
}

pub fn dr_estimate<T: TargetPolicy + ?Sized>(
    data: &NondynamicDataset,
    policy: &T,
    folds: &FoldPlan,
    hyper: &TrainHyper,
    q: f64,
) -> Result<EstimateReport> {
    Ok(estimate_nondynamic(data, policy, folds, hyper, q, &[EstimatorKind::Dr])?.remove(0))
}

impl NondynamicDataset {
    /// Behavior treatment probability of the simulator.
    pub fn config_behavior_p(&self) -> f64 {
        crate::sim_nondynamic::BEHAVIOR_P
    }
}
