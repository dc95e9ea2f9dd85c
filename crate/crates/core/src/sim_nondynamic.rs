//! One-shot spatial bandit environment with an additive response.
//!
//! For region `i` with canonical (ascending) neighbor list `n_1, ..., n_k`:
//!
//! ```text
//! Y_i = 0.1 (A_i b1 + sum_k A_{n_k} b2_k) + g(X_i, A_i) c1 + sum_k c2_k g(X_{n_k}, A_{n_k}) + eps_i
//! ```
//!
//! with `b1 = c1 = 1.5`. The linear setting uses `g = U + V` and
//! `b2 = c2 = (-0.5, -0.5, ...)`; nonlinear setting I uses `g = A U` with the
//! same coefficients; nonlinear setting II uses `g = A U` and the alternating
//! `(-0.2, -0.8, -0.2, -0.8, ...)` pattern.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::policy::PolicySpec;
use crate::rng::{rng_from_seed, sub_seed};
use crate::spatial::{min_max_normalize, Adjacency, CarConfig, CarSampler, Grid};

pub const BETA1: f64 = 1.5;
pub const GAMMA1: f64 = 1.5;
pub const BEHAVIOR_P: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Linear,
    Nonlinear1,
    Nonlinear2,
}

impl std::str::FromStr for Setting {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Setting::Linear),
            "nonlinear1" => Ok(Setting::Nonlinear1),
            "nonlinear2" => Ok(Setting::Nonlinear2),
            other => config_err(format!("unknown setting '{other}'")),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::Linear => "linear",
            Setting::Nonlinear1 => "nonlinear1",
            Setting::Nonlinear2 => "nonlinear2",
        })
    }
}

impl Setting {
    /// `g(X, A)` for a `(U, V)` confounder.
    pub fn g(self, x: &[f64], a: f64) -> f64 {
        match self {
            Setting::Linear => x[0] + x[1],
            Setting::Nonlinear1 | Setting::Nonlinear2 => a * x[0],
        }
    }

    /// Entry `k` (0-based) of both interference coefficient vectors.
    pub fn neighbor_coef(self, k: usize) -> f64 {
        match self {
            Setting::Linear | Setting::Nonlinear1 => -0.5,
            Setting::Nonlinear2 => {
                if k.is_multiple_of(2) {
                    -0.2
                } else {
                    -0.8
                }
            }
        }
    }

    /// Noiseless response of a region given its own pair and its neighbors'
    /// pairs in the order supplied.
    pub fn response<'a>(self, x: &[f64], a: f64, neighbors: impl IntoIterator<Item = (&'a [f64], f64)>) -> f64 {
        let mut treat = a * BETA1;
        let mut inter = 0.0;
        for (k, (xn, an)) in neighbors.into_iter().enumerate() {
            let c = self.neighbor_coef(k);
            treat += an * c;
            inter += c * self.g(xn, an);
        }
        0.1 * treat + GAMMA1 * self.g(x, a) + inter
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NondynamicConfig {
    pub l: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub setting: Setting,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adjacency: Adjacency,
    #[serde(default)]
    pub car: CarConfig,
    /// When false, the response noise is suppressed.
    #[serde(default = "default_true")]
    pub noise: bool,
}

fn default_kappa() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

impl NondynamicConfig {
    pub fn new(l: usize, s: usize, setting: Setting, seed: u64) -> Self {
        NondynamicConfig {
            l,
            s,
            setting,
            kappa: 0.5,
            seed,
            adjacency: Adjacency::Rook,
            car: CarConfig::default(),
            noise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return config_err("number of days S must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return config_err(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        self.car.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.l, self.adjacency)
    }
}

/// Logged data indexed `[region][day]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondynamicDataset {
    pub config: NondynamicConfig,
    pub grid: Grid,
    #[serde(rename = "X")]
    pub x: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<u8>>,
    #[serde(rename = "Y")]
    pub y: Vec<Vec<f64>>,
}

impl NondynamicDataset {
    pub fn n_regions(&self) -> usize {
        self.x.len()
    }

    pub fn n_days(&self) -> usize {
        self.a.first().map_or(0, Vec::len)
    }

    pub fn confounder_dim(&self) -> usize {
        self.x.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.grid.n_regions();
        let s = self.n_days();
        if self.x.len() != r || self.a.len() != r || self.y.len() != r {
            return config_err("dataset arrays do not match the grid's region count");
        }
        if self.x.iter().any(|v| v.len() != s) || self.y.iter().any(|v| v.len() != s) || self.a.iter().any(|v| v.len() != s) {
            return config_err("dataset arrays have inconsistent day counts");
        }
        if self.a.iter().flatten().any(|&v| v > 1) {
            return config_err("treatments must be 0 or 1");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: NondynamicDataset = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }
}

/// Draws one day's normalized `(U, V)` confounders, indexed `[region] -> [U, V]`.
fn draw_confounders(sampler: &CarSampler, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut u = sampler.sample(rng);
    let mut v = sampler.sample(rng);
    min_max_normalize(&mut u);
    min_max_normalize(&mut v);
    u.into_iter().zip(v).map(|(a, b)| vec![a, b]).collect()
}

/// Noiseless response of every region for one day.
pub fn noiseless_day(setting: Setting, grid: &Grid, x: &[Vec<f64>], a: &[f64]) -> Vec<f64> {
    (0..grid.n_regions())
        .map(|i| {
            let nb = grid.neighbors[i].iter().map(|&j| (x[j].as_slice(), a[j]));
            setting.response(&x[i], a[i], nb)
        })
        .collect()
}

pub fn gen_nondynamic(cfg: &NondynamicConfig) -> Result<NondynamicDataset> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let sampler = CarSampler::new(&grid, &cfg.car)?;
    let r = grid.n_regions();
    let mut x = vec![Vec::with_capacity(cfg.s); r];
    let mut a = vec![Vec::with_capacity(cfg.s); r];
    let mut y = vec![Vec::with_capacity(cfg.s); r];
    for day in 0..cfg.s {
        let mut rng = rng_from_seed(sub_seed(cfg.seed, day as u64));
        let xd = draw_confounders(&sampler, &mut rng);
        let ad: Vec<f64> = (0..r).map(|_| rng.random_bool(BEHAVIOR_P) as u8 as f64).collect();
        let mean = noiseless_day(cfg.setting, &grid, &xd, &ad);
        for i in 0..r {
            let eps: f64 = if cfg.noise { StandardNormal.sample(&mut rng) } else { 0.0 };
            y[i].push(mean[i] + eps);
            a[i].push(ad[i] as u8);
            x[i].push(xd[i].clone());
        }
    }
    Ok(NondynamicDataset {
        config: cfg.clone(),
        grid,
        x,
        a,
        y,
    })
}

/// Monte-Carlo estimate with its standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub stderr_of_mean: f64,
    pub n_mc: usize,
}

impl OracleValue {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        OracleValue {
            value: mean,
            stderr_of_mean: (var / n as f64).sqrt(),
            n_mc: n,
        }
    }
}

/// Per-draw values `sum_i E[Y_i | A = pi(X)]` over fresh confounder draws.
pub fn oracle_samples_nondynamic(cfg: &NondynamicConfig, policy: &PolicySpec, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    if n_mc == 0 {
        return config_err("n_mc must be at least 1");
    }
    cfg.validate()?;
    let grid = cfg.grid()?;
    policy.check_regions(grid.n_regions())?;
    let sampler = CarSampler::new(&grid, &cfg.car)?;
    Ok((0..n_mc)
        .map(|k| {
            let mut rng = rng_from_seed(sub_seed(seed, k as u64));
            let xd = draw_confounders(&sampler, &mut rng);
            let ad: Vec<f64> = xd
                .iter()
                .enumerate()
                .map(|(i, x)| policy.action(i, x) as f64)
                .collect();
            noiseless_day(cfg.setting, &grid, &xd, &ad).iter().sum()
        })
        .collect())
}

pub fn oracle_value_nondynamic(cfg: &NondynamicConfig, policy: &PolicySpec, n_mc: usize, seed: u64) -> Result<OracleValue> {
    Ok(OracleValue::from_samples(&oracle_samples_nondynamic(cfg, policy, n_mc, seed)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isolated_region_linear_example() {
        let y = Setting::Linear.response(&[0.3, 0.2], 1.0, std::iter::empty());
        assert!((y - 0.9).abs() < 1e-15);
    }

    #[test]
    fn nonlinear1_untreated_is_zero() {
        let mut cfg = NondynamicConfig::new(3, 4, Setting::Nonlinear1, 1);
        cfg.noise = false;
        let d = gen_nondynamic(&cfg).unwrap();
        for day in 0..4 {
            let xd: Vec<Vec<f64>> = d.x.iter().map(|r| r[day].clone()).collect();
            let zero = noiseless_day(Setting::Nonlinear1, &d.grid, &xd, &[0.0; 9]);
            assert!(zero.iter().all(|&v| v == 0.0));
        }
    }

    /// Straight-line evaluation of the response formula for region `i`.
    fn reference_response(setting: Setting, grid: &Grid, x: &[Vec<f64>], a: &[f64], i: usize) -> f64 {
        let nb = &grid.neighbors[i];
        let (b2, c2): (Vec<f64>, Vec<f64>) = match setting {
            Setting::Nonlinear2 => {
                let v: Vec<f64> = (0..nb.len()).map(|k| [-0.2, -0.8][k % 2]).collect();
                (v.clone(), v)
            }
            _ => (vec![-0.5; nb.len()], vec![-0.5; nb.len()]),
        };
        let g = |j: usize| match setting {
            Setting::Linear => x[j][0] + x[j][1],
            _ => a[j] * x[j][0],
        };
        let mut lin = a[i] * 1.5;
        let mut inter = 0.0;
        for (k, &j) in nb.iter().enumerate() {
            lin += a[j] * b2[k];
            inter += c2[k] * g(j);
        }
        0.1 * lin + g(i) * 1.5 + inter
    }

    #[test]
    fn generated_responses_match_reference_formula() {
        for setting in [Setting::Linear, Setting::Nonlinear1, Setting::Nonlinear2] {
            let mut cfg = NondynamicConfig::new(3, 5, setting, 17);
            cfg.noise = false;
            let d = gen_nondynamic(&cfg).unwrap();
            for day in 0..5 {
                let xd: Vec<Vec<f64>> = d.x.iter().map(|r| r[day].clone()).collect();
                let ad: Vec<f64> = d.a.iter().map(|r| r[day] as f64).collect();
                for i in 0..9 {
                    let want = reference_response(setting, &d.grid, &xd, &ad, i);
                    assert!((d.y[i][day] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn neighbor_permutation_property() {
        let x0 = [0.4, 0.1];
        let nb = [([0.9, 0.2], 1.0), ([0.1, 0.7], 1.0), ([0.5, 0.5], 0.0), ([0.3, 0.8], 1.0)];
        let rev: Vec<_> = nb.iter().rev().cloned().collect();
        for setting in [Setting::Linear, Setting::Nonlinear1] {
            let a = setting.response(&x0, 1.0, nb.iter().map(|(x, a)| (&x[..], *a)));
            let b = setting.response(&x0, 1.0, rev.iter().map(|(x, a)| (&x[..], *a)));
            assert!((a - b).abs() < 1e-12);
        }
        let a = Setting::Nonlinear2.response(&x0, 1.0, nb.iter().map(|(x, a)| (&x[..], *a)));
        let b = Setting::Nonlinear2.response(&x0, 1.0, rev.iter().map(|(x, a)| (&x[..], *a)));
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn dataset_is_deterministic_and_binary() {
        let cfg = NondynamicConfig::new(4, 6, Setting::Nonlinear2, 99);
        let d = gen_nondynamic(&cfg).unwrap();
        assert_eq!(d, gen_nondynamic(&cfg).unwrap());
        assert!(d.a.iter().flatten().all(|&v| v <= 1));
        assert!(d.x.iter().flatten().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let back = NondynamicDataset::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn days_are_uncorrelated() {
        let cfg = NondynamicConfig::new(3, 200, Setting::Linear, 5);
        let d = gen_nondynamic(&cfg).unwrap();
        let u: Vec<f64> = d.x[4].iter().map(|v| v[0]).collect();
        let (a, b) = (&u[..199], &u[1..]);
        let ma = a.iter().sum::<f64>() / 199.0;
        let mb = b.iter().sum::<f64>() / 199.0;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((cov / (va * vb).sqrt()).abs() < 0.1);
    }

    #[test]
    fn oracle_zero_for_untreated_nonlinear1() {
        let cfg = NondynamicConfig::new(3, 1, Setting::Nonlinear1, 0);
        let p = PolicySpec::Constant { action: 0 };
        for n in [1, 7, 50] {
            assert_eq!(oracle_value_nondynamic(&cfg, &p, n, 3).unwrap().value, 0.0);
        }
        assert!(oracle_value_nondynamic(&cfg, &p, 0, 3).is_err());
    }

    #[test]
    fn oracle_single_region_closed_form() {
        // A single region's min-max normalized field is the constant 0.5, so
        // the treated value is 0.15 + 1.5 (0.5 + 0.5) on every draw.
        let cfg = NondynamicConfig::new(1, 1, Setting::Linear, 0);
        let p = PolicySpec::Constant { action: 1 };
        let o = oracle_value_nondynamic(&cfg, &p, 200, 1).unwrap();
        assert!((o.value - 1.65).abs() < 1e-12);
    }

    #[test]
    fn oracle_stderr_scales_with_n() {
        let cfg = NondynamicConfig::new(3, 1, Setting::Nonlinear1, 0);
        let p = PolicySpec::linear(0.5).unwrap();
        let a = oracle_value_nondynamic(&cfg, &p, 2_000, 11).unwrap();
        let b = oracle_value_nondynamic(&cfg, &p, 4_000, 11).unwrap();
        let ratio = b.stderr_of_mean / a.stderr_of_mean;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2);
    }
}
