//! Marginal density ratio by kernel minimax.
//!
//! For a candidate ratio `mu` and test function `f`,
//!
//! ```text
//! L(mu, f) = mean_n mu(z_n) [gamma f(z+_n') - f(z_n)] + (1 - gamma) mean_k f(z+_k,1)
//! ```
//!
//! where `z_n` runs over observed transitions, `z+_n'` is the next step at
//! target actions, and `z+_k,1` the first step at target actions. Over the
//! unit ball of a Gaussian RKHS, `sup_f L^2 = sum_ab c_a c_b K(p_a, p_b)` with
//! point coefficients `c = -mu_n / n` at `z_n`, `gamma mu_n / n` at `z+_n'`, and
//! `(1 - gamma) / n_1` at `z+_k,1`. `mu` is a set network with a softplus
//! output, trained on minibatches of this quadratic form and rescaled to
//! unit mean over its fit data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dynamic::{observed_rows, policy_rows, RatioFn};
use super::{gather_neighbors, FeatureScaler, Scratch, SetSamples, TargetPolicy, TrainHyper};
use crate::deepsets::{SetAdam, SetGrads, SetModel, Workspace};
use crate::error::{config_err, Error, Result};
use crate::nn::AdamConfig;
use crate::rng::{rng_from_seed, sub_seed};
use crate::sim_dynamic::DynamicDataset;

/// Kernel features of a center-plus-neighbors input.
pub trait FeatureMap: Sync {
    fn features(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> Vec<f64>;
}

/// Center row followed by the raw neighbor mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct RawFeatures;

impl FeatureMap for RawFeatures {
    fn features(&self, center: &[f64], neighbors: &[f64], _: &mut Scratch) -> Vec<f64> {
        let d = center.len();
        let mut out = center.to_vec();
        out.resize(2 * d, 0.0);
        let k = neighbors.len() / d;
        for row in neighbors.chunks_exact(d) {
            for (o, v) in out[d..].iter_mut().zip(row) {
                *o += v / k as f64;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioHyper {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for RatioHyper {
    fn default() -> Self {
        RatioHyper {
            steps: 300,
            batch: 256,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioModel {
    pub net: SetModel,
    pub scaler: FeatureScaler,
    /// Mean softplus output over the fit data; weights are divided by it.
    pub norm: f64,
    pub bandwidth: f64,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RatioModel {
    fn raw(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64 {
        scratch.center.clear();
        scratch.center.extend_from_slice(center);
        self.scaler.apply(&mut scratch.center);
        self.scaler.apply_flat(neighbors, &mut scratch.neighbors);
        self.net.forward_rows(&scratch.center, &scratch.neighbors, &mut scratch.set)
    }
}

impl RatioFn for RatioModel {
    fn weight(&self, center: &[f64], neighbors: &[f64], scratch: &mut Scratch) -> f64 {
        softplus(self.raw(center, neighbors, scratch)) / self.norm
    }
}

pub fn gaussian_kernel(a: &[f64], b: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * bandwidth * bandwidth)).exp()
}

/// Median pairwise distance over (at most the first 400 of) `points`.
pub fn median_bandwidth(points: &[Vec<f64>]) -> f64 {
    let p = &points[..points.len().min(400)];
    let mut d = Vec::with_capacity(p.len() * p.len() / 2);
    for a in 0..p.len() {
        for b in a + 1..p.len() {
            d.push(p[a].iter().zip(&p[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

/// Training points of the ratio problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioProblem {
    pub gamma: f64,
    /// Network inputs at observed transitions.
    pub inputs: SetSamples,
    /// Kernel features at the observed transitions.
    pub z: Vec<Vec<f64>>,
    /// Kernel features at the following step under the target policy.
    pub z_next: Vec<Vec<f64>>,
    /// Kernel features at the first step under the target policy.
    pub z_init: Vec<Vec<f64>>,
    /// Network inputs at every observed step, for normalization.
    pub all_inputs: SetSamples,
}

impl RatioProblem {
    pub fn build<F: FeatureMap, P: TargetPolicy + ?Sized>(
        data: &DynamicDataset,
        policy: &P,
        gamma: f64,
        days: &[usize],
        feat: &F,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return config_err(format!("ratio estimation needs gamma in [0, 1), got {gamma}"));
        }
        if days.is_empty() {
            return Err(Error::InvalidInput("no training days".into()));
        }
        let (r, horizon) = (data.n_regions(), data.horizon());
        let d = data.x[0][0][0].len() + 1;
        let mut sc = Scratch::default();
        let mut nb = Vec::new();
        let mut pb = Vec::new();
        let mut p = RatioProblem {
            gamma,
            inputs: SetSamples::new(d),
            z: Vec::new(),
            z_next: Vec::new(),
            z_init: Vec::new(),
            all_inputs: SetSamples::new(d),
        };
        for &j in days {
            let first = policy_rows(data, policy, 0, j);
            for i in 0..r {
                gather_neighbors(&data.grid.neighbors[i], &first, &mut pb);
                p.z_init.push(feat.features(&first[i], &pb, &mut sc));
            }
            for t in 0..horizon {
                let obs = observed_rows(data, t, j);
                let next = (t + 1 < horizon).then(|| policy_rows(data, policy, t + 1, j));
                for i in 0..r {
                    gather_neighbors(&data.grid.neighbors[i], &obs, &mut nb);
                    p.all_inputs.push(&obs[i], &nb, 0.0, j);
                    if let Some(next) = &next {
                        p.inputs.push(&obs[i], &nb, 0.0, j);
                        p.z.push(feat.features(&obs[i], &nb, &mut sc));
                        gather_neighbors(&data.grid.neighbors[i], next, &mut pb);
                        p.z_next.push(feat.features(&next[i], &pb, &mut sc));
                    }
                }
            }
        }
        Ok(p)
    }

    /// Exact quadratic form at per-transition ratio values `mu`.
    pub fn objective(&self, mu: &[f64], bandwidth: f64) -> f64 {
        let n = self.z.len() as f64;
        let n0 = self.z_init.len() as f64;
        let mut pts: Vec<(&[f64], f64)> = Vec::with_capacity(2 * self.z.len() + self.z_init.len());
        for (k, m) in mu.iter().enumerate() {
            if !self.z.is_empty() {
                pts.push((&self.z[k], -m / n));
                pts.push((&self.z_next[k], self.gamma * m / n));
            }
        }
        for z in &self.z_init {
            pts.push((z, (1.0 - self.gamma) / n0));
        }
        quad_form(&pts, bandwidth)
    }
}

fn quad_form(pts: &[(&[f64], f64)], bandwidth: f64) -> f64 {
    let mut acc = 0.0;
    for a in 0..pts.len() {
        acc += pts[a].1 * pts[a].1;
        for b in a + 1..pts.len() {
            acc += 2.0 * pts[a].1 * pts[b].1 * gaussian_kernel(pts[a].0, pts[b].0, bandwidth);
        }
    }
    acc
}

/// Fits the ratio network on `days`, with kernel features from `feat`.
#[allow(clippy::too_many_arguments)]
pub fn fit_ratio<F: FeatureMap, P: TargetPolicy + ?Sized>(
    data: &DynamicDataset,
    policy: &P,
    gamma: f64,
    days: &[usize],
    feat: &F,
    hyper: &TrainHyper,
    rh: &RatioHyper,
    seed: u64,
) -> Result<RatioModel> {
    let prob = RatioProblem::build(data, policy, gamma, days, feat)?;
    fit_ratio_problem(&prob, hyper, rh, seed)
}

pub fn fit_ratio_problem(prob: &RatioProblem, hyper: &TrainHyper, rh: &RatioHyper, seed: u64) -> Result<RatioModel> {
    hyper.validate()?;
    if rh.steps == 0 || rh.batch == 0 {
        return config_err("ratio steps and batch must be positive");
    }
    let gamma = prob.gamma;
    let scaler = FeatureScaler::fit(&prob.all_inputs);
    let inputs = prob.inputs.map_rows(|r| scaler.apply(r));
    let mut pool: Vec<Vec<f64>> = prob.z.iter().take(200).cloned().collect();
    pool.extend(prob.z_init.iter().take(200).cloned());
    let bandwidth = median_bandwidth(&pool);

    let mut net = SetModel::new(hyper.kind, prob.inputs.row_dim - 1, hyper.arch, sub_seed(seed, 0))?;
    // Start from the flat ratio: zero output weights and softplus(b) = 1.
    let last = net.psi().n_layers() - 1;
    net.psi_mut().weights_mut(last).iter_mut().for_each(|w| *w = 0.0);
    net.psi_mut().biases_mut(last)[0] = 1f64.exp_m1().ln();
    let mut adam = SetAdam::new(
        &net,
        AdamConfig {
            lr: rh.lr,
            ..Default::default()
        },
    );
    let mut grads = SetGrads::zeros_like(&net);
    let mut ws = Workspace::default();
    let mut rng = rng_from_seed(sub_seed(seed, 1));
    let n = inputs.len();
    if n > 0 {
        let b = rh.batch;
        let b0 = rh.batch.min(prob.z_init.len());
        let mut idx = vec![0usize; b];
        let mut raw = vec![0.0; b];
        let mut pts: Vec<(&[f64], f64)> = Vec::with_capacity(2 * b + b0);
        for _ in 0..rh.steps {
            idx.iter_mut().for_each(|k| *k = rng.random_range(0..n));
            let init: Vec<usize> = (0..b0).map(|_| rng.random_range(0..prob.z_init.len())).collect();
            for (r, &k) in raw.iter_mut().zip(&idx) {
                *r = net.forward_rows(inputs.center(k), inputs.neighbors(k), &mut ws);
            }
            pts.clear();
            for (r, &k) in raw.iter().zip(&idx) {
                let m = softplus(*r);
                pts.push((&prob.z[k], -m / b as f64));
                pts.push((&prob.z_next[k], gamma * m / b as f64));
            }
            for &k in &init {
                pts.push((&prob.z_init[k], (1.0 - gamma) / b0 as f64));
            }
            // w(x) = sum_b c_b K(p_b, x) at the 2b transition points.
            grads.fill_zero();
            for (s, &k) in idx.iter().enumerate() {
                let w_here: f64 = pts.iter().map(|(p, c)| c * gaussian_kernel(p, &prob.z[k], bandwidth)).sum();
                let w_next: f64 = pts.iter().map(|(p, c)| c * gaussian_kernel(p, &prob.z_next[k], bandwidth)).sum();
                let d_mu = 2.0 / b as f64 * (gamma * w_next - w_here);
                net.forward_rows(inputs.center(k), inputs.neighbors(k), &mut ws);
                net.backward_rows(inputs.neighbors(k), d_mu * sigmoid(raw[s]), &mut ws, &mut grads);
            }
            adam.update(&mut net, &grads)?;
        }
    }
    let all = prob.all_inputs.map_rows(|r| scaler.apply(r));
    let norm = (0..all.len())
        .map(|k| softplus(net.forward_rows(all.center(k), all.neighbors(k), &mut ws)))
        .sum::<f64>()
        / all.len().max(1) as f64;
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::InvalidInput("ratio network collapsed to zero".into()));
    }
    Ok(RatioModel {
        net,
        scaler,
        norm,
        bandwidth,
    })
}

impl RatioModel {
    /// Normalized weights at the problem's transitions.
    pub fn transition_weights(&self, prob: &RatioProblem) -> Vec<f64> {
        let mut sc = Scratch::default();
        (0..prob.inputs.len())
            .map(|k| self.weight(prob.inputs.center(k), prob.inputs.neighbors(k), &mut sc))
            .collect()
    }

    pub fn all_weights(&self, prob: &RatioProblem) -> Vec<f64> {
        let mut sc = Scratch::default();
        (0..prob.all_inputs.len())
            .map(|k| self.weight(prob.all_inputs.center(k), prob.all_inputs.neighbors(k), &mut sc))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicySpec;
    use crate::sim_dynamic::{EnvConfig, OBS_DIM};
    use crate::spatial::{Adjacency, Grid};

    /// Rows drawn i.i.d. at every step with actions from `act`.
    fn iid_chain(s: usize, t: usize, act: impl Fn(usize, usize, usize) -> u8) -> DynamicDataset {
        let grid = Grid::new(2, Adjacency::Rook).unwrap();
        let mut rng = rng_from_seed(11);
        let r = 4;
        let mut x = vec![vec![Vec::new(); t]; r];
        let mut a = vec![vec![Vec::new(); t]; r];
        let mut y = vec![vec![Vec::new(); t]; r];
        for j in 0..s {
            for k in 0..t {
                for i in 0..r {
                    let mut o = [0.0; OBS_DIM];
                    o.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
                    x[i][k].push(o);
                    a[i][k].push(act(i, k, j));
                    y[i][k].push(o[0]);
                }
            }
        }
        DynamicDataset {
            config: EnvConfig::new(2, t, s, 0.9, 0),
            data_seed: 0,
            grid,
            x,
            a,
            y,
        }
    }

    fn small_hyper() -> TrainHyper {
        TrainHyper {
            arch: crate::deepsets::Architecture {
                hidden: 8,
                depth: 1,
                d_emb: 4,
            },
            ..Default::default()
        }
    }

    #[test]
    fn stationary_on_policy_chain_gives_flat_ratio() {
        let d = iid_chain(80, 10, |_, _, _| 1);
        let p = PolicySpec::Constant { action: 1 };
        let days: Vec<usize> = (0..80).collect();
        let prob = RatioProblem::build(&d, &p, 0.9, &days, &RawFeatures).unwrap();
        let fit = fit_ratio_problem(&prob, &small_hyper(), &RatioHyper::default(), 3).unwrap();
        let w = fit.all_weights(&prob);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-9);
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!(sd / mean < 0.15, "cv {}", sd / mean);
        let ones = vec![1.0; prob.z.len()];
        let tw = fit.transition_weights(&prob);
        let (o1, of) = (prob.objective(&ones, fit.bandwidth), prob.objective(&tw, fit.bandwidth));
        assert!(o1 <= of + 1e-6, "constant {o1} fitted {of}");
    }

    #[test]
    fn gamma_zero_favors_matching_first_step() {
        let d = iid_chain(30, 4, |i, k, j| ((i + k + j) % 2) as u8);
        let p = PolicySpec::Constant { action: 1 };
        let days: Vec<usize> = (0..30).collect();
        let prob = RatioProblem::build(&d, &p, 0.0, &days, &RawFeatures).unwrap();
        let fit = fit_ratio_problem(&prob, &small_hyper(), &RatioHyper::default(), 5).unwrap();
        let w = fit.transition_weights(&prob);
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for (k, v) in w.iter().enumerate() {
            if prob.inputs.center(k)[OBS_DIM] == 1.0 {
                on.push(*v);
            } else {
                off.push(*v);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&on) > mean(&off));
    }

    #[test]
    fn kernel_and_bandwidth() {
        assert_eq!(gaussian_kernel(&[1.0, 2.0], &[1.0, 2.0], 0.5), 1.0);
        let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(median_bandwidth(&pts), 2.0);
        assert_eq!(median_bandwidth(&[vec![1.0]]), 1.0);
    }
}
