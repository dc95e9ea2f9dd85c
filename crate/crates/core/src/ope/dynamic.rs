//! Fitted-Q evaluation and the value-based, marginal importance sampling,
//! and doubly robust estimators for spatio-temporal data.
//!
//! The value is `sum_{t=1}^T gamma^(t-1) E[sum_i Y_i,t]`, so `Q^(1)` gives the
//! first reward weight one.

use rayon::prelude::*;

use super::ratio::{fit_ratio, FeatureMap, RatioHyper, RatioModel};
use super::{
    check_fold_plan, gather_neighbors, rows_with_actions, Cell, EstimateReport, EstimatorKind, FittedModel, FoldPlan,
    NetRegressor, Predictor, Regressor, Scratch, SetSamples, TargetPolicy, TrainHyper,
};
use crate::error::{config_err, Error, Result};
use crate::rng::sub_seed;
use crate::sim_dynamic::DynamicDataset;

pub(crate) fn observed_rows(data: &DynamicDataset, t: usize, j: usize) -> Vec<Vec<f64>> {
    rows_with_actions(data.x.iter().map(|r| r[t][j].as_slice()), data.a.iter().map(|r| r[t][j]))
}

pub(crate) fn policy_rows<P: TargetPolicy + ?Sized>(data: &DynamicDataset, policy: &P, t: usize, j: usize) -> Vec<Vec<f64>> {
    let acts = (0..data.n_regions()).map(|i| policy.act(Cell { region: i, t, day: j }, &data.x[i][t][j]));
    rows_with_actions(data.x.iter().map(|r| r[t][j].as_slice()), acts)
}

/// Samples at step `t` over `days` with observed actions; sample `k` is
/// region `k % R` of day `days[k / R]`.
pub fn step_samples(data: &DynamicDataset, t: usize, days: &[usize], mut target: impl FnMut(usize, usize) -> f64) -> SetSamples {
    let mut s = SetSamples::new(data.x[0][0][0].len() + 1);
    let mut nb = Vec::new();
    for (jp, &j) in days.iter().enumerate() {
        let rows = observed_rows(data, t, j);
        for i in 0..data.n_regions() {
            gather_neighbors(&data.grid.neighbors[i], &rows, &mut nb);
            s.push(&rows[i], &nb, target(i, jp), j);
        }
    }
    s
}

/// Q-functions `Q^(t)` for `t = 0..T` (0-based); `Q^(T)` is zero.
pub trait QFunction: Sync {
    fn horizon(&self) -> usize;

    fn q(&self, t: usize, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64;

    fn train_loss(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Fitted per-step models.
#[derive(Clone, Debug, PartialEq)]
pub struct QStack<M> {
    pub models: Vec<M>,
    pub gamma: f64,
}

impl<M: Predictor> QFunction for QStack<M> {
    fn horizon(&self) -> usize {
        self.models.len()
    }

    fn q(&self, t: usize, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64 {
        match self.models.get(t) {
            Some(m) => m.predict(center, neighbors, scratch),
            None => 0.0,
        }
    }

    fn train_loss(&self) -> Vec<f64> {
        self.models.iter().filter_map(|m| m.train_loss()).collect()
    }
}

/// Exact Q-function when every reward equals `c`.
#[derive(Clone, Copy, Debug)]
pub struct ConstantRewardQ {
    pub c: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl QFunction for ConstantRewardQ {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn q(&self, t: usize, _: &[f64], _: &[f64], _: &mut Scratch) -> f64 {
        (0..self.horizon.saturating_sub(t)).map(|s| self.c * self.gamma.powi(s as i32)).sum()
    }
}

/// Zero Q-function.
#[derive(Clone, Copy, Debug)]
pub struct ZeroQ(pub usize);

impl QFunction for ZeroQ {
    fn horizon(&self) -> usize {
        self.0
    }

    fn q(&self, _: usize, _: &[f64], _: &[f64], _: &mut Scratch) -> f64 {
        0.0
    }
}

/// Per-step regression seed used by [`fqe`].
pub fn fqe_step_seed(seed: u64, t: usize) -> u64 {
    sub_seed(seed, t as u64)
}

/// Backward recursion: `Q^(t)` regresses `Y_t + gamma Q^(t+1)(z+_(t+1))` on the
/// observed features at step `t`; the last step has no bootstrap term.
pub fn fqe<R: Regressor, P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    gamma: f64,
    days: &[usize],
    reg: &R,
    seed: u64,
) -> Result<QStack<R::Model>> {
    if !(0.0..=1.0).contains(&gamma) {
        return config_err(format!("gamma must lie in [0, 1], got {gamma}"));
    }
    if days.is_empty() {
        return Err(Error::InvalidInput("no training days".into()));
    }
    let (r, horizon) = (data.n_regions(), data.horizon());
    if horizon == 0 {
        return config_err("horizon T must be at least 1");
    }
    let mut models: Vec<Option<R::Model>> = (0..horizon).map(|_| None).collect();
    let mut next: Option<Vec<f64>> = None;
    let mut sc = Scratch::default();
    let mut nb = Vec::new();
    for t in (0..horizon).rev() {
        let samples = step_samples(data, t, days, |i, jp| {
            let y = data.y[i][t][days[jp]];
            match &next {
                Some(v) => y + gamma * v[jp * r + i],
                None => y,
            }
        });
        let model = reg.fit(&samples, fqe_step_seed(seed, t))?;
        if t > 0 {
            let mut v = Vec::with_capacity(days.len() * r);
            for &j in days {
                let rows = policy_rows(data, policy, t, j);
                for i in 0..r {
                    gather_neighbors(&data.grid.neighbors[i], &rows, &mut nb);
                    v.push(model.predict(&rows[i], &nb, &mut sc));
                }
            }
            next = Some(v);
        }
        models[t] = Some(model);
    }
    Ok(QStack {
        models: models.into_iter().map(|m| m.expect("every step fitted")).collect(),
        gamma,
    })
}

pub fn fqe_cross_fit<R: Regressor, P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    gamma: f64,
    folds: &FoldPlan,
    reg: &R,
    seed: u64,
) -> Result<Vec<QStack<R::Model>>>
where
    R::Model: Send,
{
    check_fold_plan(folds, data.n_days())?;
    (0..folds.m())
        .into_par_iter()
        .map(|b| fqe(data, policy, gamma, &folds.train_days(b), reg, sub_seed(seed, b as u64)))
        .collect()
}

/// Density-ratio weight of an observed center-plus-neighbors input.
pub trait RatioFn: Sync {
    fn weight(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantRatio(pub f64);

impl RatioFn for ConstantRatio {
    fn weight(&self, _: &[f64], _: &[f64], _: &mut Scratch) -> f64 {
        self.0
    }
}

fn check_parts<T>(folds: &FoldPlan, parts: &[T], what: &str) -> Result<()> {
    if parts.len() != folds.m() {
        return Err(Error::InvalidInput(format!(
            "{} {what} supplied for {} batches",
            parts.len(),
            folds.m()
        )));
    }
    Ok(())
}

/// `S^-1 sum_j sum_i Q^(1)(z+_(i,1,j))` with the batch's Q stack.
pub fn vb_dynamic_from_parts<Q: QFunction, P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    folds: &FoldPlan,
    qs: &[Q],
) -> Result<EstimateReport> {
    check_fold_plan(folds, data.n_days())?;
    check_parts(folds, qs, "Q stacks")?;
    if qs.iter().any(|q| q.horizon() != data.horizon()) {
        return Err(Error::InvalidInput("Q stack horizon does not match the data".into()));
    }
    let per_day = (0..data.n_days())
        .into_par_iter()
        .map_init(
            || (Scratch::default(), Vec::new()),
            |(sc, nb), j| {
                let q = &qs[folds.batch_of(j)];
                let rows = policy_rows(data, policy, 0, j);
                (0..data.n_regions())
                    .map(|i| {
                        gather_neighbors(&data.grid.neighbors[i], &rows, nb);
                        q.q(0, &rows[i], nb, sc)
                    })
                    .sum::<f64>()
            },
        )
        .collect();
    let mut r = EstimateReport::from_days(EstimatorKind::Vb, per_day, folds);
    r.diagnostics.train_loss = qs.iter().flat_map(|q| q.train_loss().first().copied()).collect();
    Ok(r)
}

fn is_norm(data: &DynamicDataset, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return config_err(format!("importance sampling needs gamma in [0, 1), got {gamma}"));
    }
    Ok(data.horizon() as f64 * (1.0 - gamma))
}

/// Per-day `sum_t sum_i mu(z_itj) g(i, t, j)`.
fn weighted_day_sums<W: RatioFn>(
    data: &DynamicDataset,
    folds: &FoldPlan,
    ratios: &[W],
    g: impl Fn(usize, usize, usize, &[Vec<f64>], &mut Scratch, &mut Vec<f64>) -> f64 + Sync,
) -> Vec<f64> {
    (0..data.n_days())
        .into_par_iter()
        .map_init(
            || (Scratch::default(), Vec::new(), Vec::new()),
            |(sc, nb, nb2), j| {
                let w = &ratios[folds.batch_of(j)];
                let mut acc = 0.0;
                for t in 0..data.horizon() {
                    let rows = observed_rows(data, t, j);
                    for i in 0..data.n_regions() {
                        gather_neighbors(&data.grid.neighbors[i], &rows, nb);
                        let mu = w.weight(&rows[i], nb, sc);
                        if mu == 0.0 {
                            continue;
                        }
                        acc += mu * g(i, t, j, &rows, sc, nb2);
                    }
                }
                acc
            },
        )
        .collect()
}

/// `[S T (1 - gamma)]^-1 sum mu(z_itj) Y_itj`.
pub fn is_dynamic_from_parts<W: RatioFn>(data: &DynamicDataset, folds: &FoldPlan, ratios: &[W], gamma: f64) -> Result<EstimateReport> {
    check_fold_plan(folds, data.n_days())?;
    check_parts(folds, ratios, "ratio models")?;
    let norm = is_norm(data, gamma)?;
    let per_day = weighted_day_sums(data, folds, ratios, |i, t, j, _, _, _| data.y[i][t][j])
        .into_iter()
        .map(|v| v / norm)
        .collect();
    Ok(EstimateReport::from_days(EstimatorKind::Is, per_day, folds))
}

/// VB plus `[S T (1 - gamma)]^-1 sum mu(z_itj) [Y_itj + gamma Q^(t+1)(z+) - Q^(t)(z)]`.
pub fn dr_dynamic_from_parts<Q: QFunction, W: RatioFn, P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    folds: &FoldPlan,
    qs: &[Q],
    ratios: &[W],
    gamma: f64,
) -> Result<EstimateReport> {
    let vb = vb_dynamic_from_parts(data, policy, folds, qs)?;
    check_parts(folds, ratios, "ratio models")?;
    let norm = is_norm(data, gamma)?;
    let horizon = data.horizon();
    let corr = weighted_day_sums(data, folds, ratios, |i, t, j, rows, sc, nb| {
        let q = &qs[folds.batch_of(j)];
        let next = if t + 1 < horizon {
            let prow = policy_rows(data, policy, t + 1, j);
            gather_neighbors(&data.grid.neighbors[i], &prow, nb);
            q.q(t + 1, &prow[i], nb, sc)
        } else {
            0.0
        };
        gather_neighbors(&data.grid.neighbors[i], rows, nb);
        let here = q.q(t, &rows[i], nb, sc);
        data.y[i][t][j] + gamma * next - here
    });
    let per_day = vb.per_day.iter().zip(corr).map(|(v, c)| v + c / norm).collect();
    let mut r = EstimateReport::from_days(EstimatorKind::Dr, per_day, folds);
    r.diagnostics.train_loss = vb.diagnostics.train_loss;
    Ok(r)
}

/// Fits the cross-fitted Q stacks (and ratio models when needed) once and
/// returns the requested estimates in order.
pub fn estimate_dynamic<P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    gamma: f64,
    folds: &FoldPlan,
    hyper: &TrainHyper,
    ratio_hyper: &RatioHyper,
    estimators: &[EstimatorKind],
) -> Result<Vec<EstimateReport>> {
    let reg = NetRegressor { hyper: hyper.clone() };
    let qs = fqe_cross_fit(data, policy, gamma, folds, &reg, hyper.seed)?;
    let ratios: Option<Vec<RatioModel>> = if estimators.iter().any(|e| *e != EstimatorKind::Vb) {
        Some(
            (0..folds.m())
                .into_par_iter()
                .map(|b| {
                    let feat: &FittedModel = &qs[b].models[0];
                    fit_ratio(
                        data,
                        policy,
                        gamma,
                        &folds.train_days(b),
                        feat,
                        hyper,
                        ratio_hyper,
                        sub_seed(hyper.seed, (1 << 20) + b as u64),
                    )
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    estimators
        .iter()
        .map(|e| {
            let mut r = match e {
                EstimatorKind::Vb => vb_dynamic_from_parts(data, policy, folds, &qs)?,
                EstimatorKind::Is => is_dynamic_from_parts(data, folds, ratios.as_ref().expect("ratios"), gamma)?,
                EstimatorKind::Dr => dr_dynamic_from_parts(data, policy, folds, &qs, ratios.as_ref().expect("ratios"), gamma)?,
            };
            if let Some(rs) = &ratios {
                r.diagnostics.bandwidth = rs.iter().map(|m| m.bandwidth).collect();
            }
            r.arch = Some(hyper.kind);
            Ok(r)
        })
        .collect()
}

impl FeatureMap for FittedModel {
    fn features(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64> {
        FittedModel::features(self, center, neighbors, scratch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ope::MeanRegressor;
    use crate::policy::PolicySpec;
    use crate::sim_dynamic::{gen_dynamic, EnvConfig};

    fn const_data(c: f64, l: usize, t: usize, s: usize, gamma: f64) -> DynamicDataset {
        let mut cfg = EnvConfig::new(l, t, s, gamma, 3);
        cfg.constant_reward = Some(c);
        gen_dynamic(&cfg, 4).unwrap()
    }

    #[test]
    fn fqe_mean_regressor_recovers_geometric_q() {
        let d = const_data(2.0, 2, 2, 6, 0.9);
        let p = PolicySpec::Constant { action: 1 };
        let days: Vec<usize> = (0..6).collect();
        let qs = fqe(&d, &p, 0.9, &days, &MeanRegressor, 0).unwrap();
        let mut sc = Scratch::default();
        assert!((qs.q(0, &[], &[], &mut sc) - 1.9 * 2.0).abs() < 1e-12);
        assert!((qs.q(1, &[], &[], &mut sc) - 2.0).abs() < 1e-12);
        assert_eq!(qs.q(2, &[], &[], &mut sc), 0.0);
    }

    #[test]
    fn vb_with_exact_q_matches_closed_form() {
        let (c, gamma, t) = (1.5, 0.8, 7);
        let d = const_data(c, 3, t, 4, gamma);
        let folds = FoldPlan::new(4, 2).unwrap();
        let q = ConstantRewardQ { c, gamma, horizon: t };
        let p = PolicySpec::Constant { action: 0 };
        let r = vb_dynamic_from_parts(&d, &p, &folds, &[q, q]).unwrap();
        let want = 9.0 * c * (1.0 - gamma.powi(t as i32)) / (1.0 - gamma);
        assert!((r.estimate - want).abs() < 1e-12 * want);
    }

    #[test]
    fn is_with_unit_ratio_and_constant_reward() {
        let (c, gamma) = (2.0, 0.5);
        let d = const_data(c, 2, 5, 4, gamma);
        let folds = FoldPlan::new(4, 2).unwrap();
        let r = is_dynamic_from_parts(&d, &folds, &[ConstantRatio(1.0); 2], gamma).unwrap();
        assert!((r.estimate - 4.0 * c / (1.0 - gamma)).abs() < 1e-12);
        let z = is_dynamic_from_parts(&d, &folds, &[ConstantRatio(0.0); 2], gamma).unwrap();
        assert_eq!(z.estimate, 0.0);
        assert!(is_dynamic_from_parts(&d, &folds, &[ConstantRatio(1.0); 2], 1.0).is_err());
    }

    #[test]
    fn dr_identities() {
        let cfg = EnvConfig::new(3, 4, 6, 0.9, 1);
        let d = gen_dynamic(&cfg, 2).unwrap();
        let folds = FoldPlan::new(6, 2).unwrap();
        let p = PolicySpec::Constant { action: 1 };
        let days: Vec<usize> = (0..6).collect();
        let qs = fqe(&d, &p, 0.9, &days, &MeanRegressor, 0).unwrap();
        let qs = [qs.clone(), qs];
        let vb = vb_dynamic_from_parts(&d, &p, &folds, &qs).unwrap();
        let dr = dr_dynamic_from_parts(&d, &p, &folds, &qs, &[ConstantRatio(0.0); 2], 0.9).unwrap();
        assert!((dr.estimate - vb.estimate).abs() < 1e-12);
        let w = [ConstantRatio(0.7); 2];
        let is = is_dynamic_from_parts(&d, &folds, &w, 0.9).unwrap();
        let dr = dr_dynamic_from_parts(&d, &p, &folds, &[ZeroQ(4); 2], &w, 0.9).unwrap();
        assert!((dr.estimate - is.estimate).abs() < 1e-12 * is.estimate.abs().max(1.0));
    }

    #[test]
    fn dr_with_exact_q_has_zero_residual() {
        let (c, gamma, t) = (3.0, 0.9, 5);
        let d = const_data(c, 2, t, 6, gamma);
        let folds = FoldPlan::new(6, 2).unwrap();
        let q = ConstantRewardQ { c, gamma, horizon: t };
        let p = PolicySpec::Constant { action: 1 };
        let vb = vb_dynamic_from_parts(&d, &p, &folds, &[q, q]).unwrap();
        let dr = dr_dynamic_from_parts(&d, &p, &folds, &[q, q], &[ConstantRatio(1.0); 2], gamma).unwrap();
        assert!((dr.estimate - vb.estimate).abs() < 1e-9);
    }
}
