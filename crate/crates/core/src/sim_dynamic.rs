//! Grid ridesharing market with driver flows between adjacent regions.
//!
//! City parameters (order means `mu_i` and connectivities `C_i`) are drawn
//! once from the config seed and stay fixed across days. Every day starts
//! from the same initial state and draws its own order noise and actions.
//!
//! One step at time `t`:
//!
//! ```text
//! O_t    ~ N(mu, 1)
//! X_t    = (O_t, C, |N(i)|, D_t, M_t)
//! O*_t   = O_t (1 + 0.3 A_t)
//! D_t+1  = transition(D_t, O*_t)
//! M_t+1  = 0.9 [1 - |D_t+1 - O*_t| / (1 + D_t+1 + O*_t)] + 0.1 M_t
//! Y_t    = M_t+1^2 min(D_t+1, O*_t) - 2 |D_t+1 - O*_t|
//! ```

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::policy::{top_q, PolicySpec, RankStat};
use crate::rng::{rng_from_seed, sub_seed, sub_seed_path, Rng};
use crate::sim_nondynamic::OracleValue;
use crate::spatial::{Adjacency, Grid};

/// Width of the per-region observation.
pub const OBS_DIM: usize = 5;

const STREAM_CITY: u64 = 0;
const STREAM_REFERENCE: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub l: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    /// Days generated by `gen_dynamic`.
    #[serde(rename = "S", default = "default_days")]
    pub days: usize,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_order_bounds")]
    pub order_mean_bounds: (f64, f64),
    #[serde(default = "default_uplift")]
    pub uplift: f64,
    #[serde(default = "default_drivers")]
    pub initial_drivers: f64,
    #[serde(default = "default_connectivity")]
    pub connectivity_bounds: (f64, f64),
    #[serde(default = "default_behavior_p")]
    pub behavior_p: f64,
    /// Seed of the city parameters.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adjacency: Adjacency,
    #[serde(default)]
    pub torus: bool,
    /// Test hook: replaces every reward with this constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_reward: Option<f64>,
}

fn default_days() -> usize {
    50
}
fn default_gamma() -> f64 {
    0.9
}
fn default_order_bounds() -> (f64, f64) {
    (40.0, 180.0)
}
fn default_uplift() -> f64 {
    0.3
}
fn default_drivers() -> f64 {
    130.0
}
fn default_connectivity() -> (f64, f64) {
    (0.1, 1.0)
}
fn default_behavior_p() -> f64 {
    0.5
}

impl EnvConfig {
    pub fn new(l: usize, horizon: usize, days: usize, gamma: f64, seed: u64) -> Self {
        EnvConfig {
            l,
            horizon,
            days,
            gamma,
            order_mean_bounds: default_order_bounds(),
            uplift: default_uplift(),
            initial_drivers: default_drivers(),
            connectivity_bounds: default_connectivity(),
            behavior_p: default_behavior_p(),
            seed,
            adjacency: Adjacency::Rook,
            torus: false,
            constant_reward: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return config_err("horizon T must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return config_err(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        let (lo, hi) = self.order_mean_bounds;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return config_err("order_mean_bounds must be positive and ordered");
        }
        let (lo, hi) = self.connectivity_bounds;
        if !(lo > 0.0 && hi >= lo && hi <= 1.0) {
            return config_err("connectivity_bounds must lie in (0, 1] and be ordered");
        }
        if !(self.uplift >= 0.0 && self.uplift.is_finite()) {
            return config_err("uplift must be non-negative");
        }
        if !(self.initial_drivers >= 0.0 && self.initial_drivers.is_finite()) {
            return config_err("initial_drivers must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.behavior_p) {
            return config_err("behavior_p must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::build(self.l, self.adjacency, self.torus)
    }

    /// `sum_{t=1}^T gamma^(t-1)`.
    pub fn discount_mass(&self) -> f64 {
        (0..self.horizon).map(|t| self.gamma.powi(t as i32)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub mu: Vec<f64>,
    pub connectivity: Vec<f64>,
    pub drivers: Vec<f64>,
    /// Actual orders of the previous step.
    pub orders_prev: Vec<f64>,
    pub mismatch: Vec<f64>,
    pub t: usize,
}

impl EnvState {
    pub fn n_regions(&self) -> usize {
        self.mu.len()
    }
}

fn mismatch_update(d_next: f64, o_star: f64, m_prev: f64) -> f64 {
    0.9 * (1.0 - (d_next - o_star).abs() / (1.0 + d_next + o_star)) + 0.1 * m_prev
}

pub fn reward(m_next: f64, d_next: f64, o_star: f64) -> f64 {
    m_next * m_next * d_next.min(o_star) - 2.0 * (d_next - o_star).abs()
}

pub fn init_dynamic_env(cfg: &EnvConfig) -> Result<EnvState> {
    cfg.validate()?;
    let r = cfg.l * cfg.l;
    let mut rng = rng_from_seed(sub_seed(cfg.seed, STREAM_CITY));
    let (olo, ohi) = cfg.order_mean_bounds;
    let (clo, chi) = cfg.connectivity_bounds;
    let mu: Vec<f64> = (0..r).map(|_| rng.random_range(olo..=ohi)).collect();
    let connectivity: Vec<f64> = (0..r).map(|_| rng.random_range(clo..=chi)).collect();
    let d0 = cfg.initial_drivers;
    // The lag term is dropped and the previous actual orders are taken as mu.
    let mismatch = mu.iter().map(|&m| mismatch_update(d0, m, 0.0)).collect();
    Ok(EnvState {
        orders_prev: mu.clone(),
        mu,
        connectivity,
        drivers: vec![d0; r],
        mismatch,
        t: 0,
    })
}

/// Net driver flow `V` into each region; sums to zero.
pub fn transition_flows(drivers: &[f64], orders: &[f64], connectivity: &[f64], grid: &Grid) -> Vec<f64> {
    let r = drivers.len();
    let surplus: Vec<f64> = drivers.iter().zip(orders).map(|(d, o)| (d - o).abs()).collect();
    let mut v = vec![0.0; r];
    for i in 0..r {
        for &k in grid.neighbors[i].iter().filter(|&&k| k > i) {
            let f = connectivity[i].min(connectivity[k]) * (surplus[i] - surplus[k]);
            v[i] -= f;
            v[k] += f;
        }
    }
    v
}

/// Drivers after one transition from `drivers` facing `orders`.
pub fn transition_drivers(drivers: &[f64], orders: &[f64], connectivity: &[f64], grid: &Grid) -> Vec<f64> {
    let v = transition_flows(drivers, orders, connectivity, grid);
    drivers
        .iter()
        .zip(&v)
        .enumerate()
        .map(|(i, (d, vi))| {
            let n = grid.degree(i);
            if n == 0 {
                *d
            } else {
                (d + vi / n as f64).max(0.0)
            }
        })
        .collect()
}

/// Applies the transition to the state's drivers against its previous actual orders.
pub fn driver_transition(state: &EnvState, grid: &Grid) -> EnvState {
    let mut next = state.clone();
    next.drivers = transition_drivers(&state.drivers, &state.orders_prev, &state.connectivity, grid);
    next
}

pub fn draw_orders(state: &EnvState, rng: &mut Rng) -> Vec<f64> {
    state
        .mu
        .iter()
        .map(|&m| {
            let z: f64 = StandardNormal.sample(rng);
            m + z
        })
        .collect()
}

/// Observation rows `(O, C, |N|, D, M)` for intrinsic orders `orders`.
pub fn observe(state: &EnvState, orders: &[f64], grid: &Grid) -> Vec<[f64; OBS_DIM]> {
    (0..state.n_regions())
        .map(|i| {
            [
                orders[i],
                state.connectivity[i],
                grid.degree(i) as f64,
                state.drivers[i],
                state.mismatch[i],
            ]
        })
        .collect()
}

/// Advances one step given intrinsic orders and actions; returns rewards.
pub fn advance(cfg: &EnvConfig, state: &EnvState, orders: &[f64], actions: &[u8], grid: &Grid) -> (EnvState, Vec<f64>) {
    let o_star: Vec<f64> = orders
        .iter()
        .zip(actions)
        .map(|(&o, &a)| o + cfg.uplift * a as f64 * o)
        .collect();
    let d_next = transition_drivers(&state.drivers, &o_star, &state.connectivity, grid);
    let m_next: Vec<f64> = (0..state.n_regions())
        .map(|i| mismatch_update(d_next[i], o_star[i], state.mismatch[i]))
        .collect();
    let rewards = match cfg.constant_reward {
        Some(c) => vec![c; state.n_regions()],
        None => (0..state.n_regions()).map(|i| reward(m_next[i], d_next[i], o_star[i])).collect(),
    };
    let next = EnvState {
        mu: state.mu.clone(),
        connectivity: state.connectivity.clone(),
        drivers: d_next,
        orders_prev: o_star,
        mismatch: m_next,
        t: state.t + 1,
    };
    (next, rewards)
}

pub fn env_step(cfg: &EnvConfig, state: &EnvState, actions: &[u8], grid: &Grid, rng: &mut Rng) -> (EnvState, Vec<f64>) {
    let orders = draw_orders(state, rng);
    advance(cfg, state, &orders, actions, grid)
}

/// Who picks actions during a rollout.
#[derive(Clone, Copy, Debug)]
pub enum Actor<'a> {
    /// I.i.d. Bernoulli(`behavior_p`) treatments.
    Behavior,
    Policy(&'a PolicySpec),
}

/// One day, indexed `[region][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: Vec<Vec<[f64; OBS_DIM]>>,
    pub a: Vec<Vec<u8>>,
    pub y: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.y
            .iter()
            .map(|row| row.iter().enumerate().map(|(t, y)| gamma.powi(t as i32) * y).sum::<f64>())
            .sum()
    }
}

pub fn rollout_from(cfg: &EnvConfig, init: &EnvState, grid: &Grid, actor: Actor<'_>, seed: u64) -> Trajectory {
    let r = init.n_regions();
    let mut rng = rng_from_seed(seed);
    let mut state = init.clone();
    let mut traj = Trajectory {
        x: vec![Vec::with_capacity(cfg.horizon); r],
        a: vec![Vec::with_capacity(cfg.horizon); r],
        y: vec![Vec::with_capacity(cfg.horizon); r],
    };
    let bern = cfg.behavior_p;
    for _ in 0..cfg.horizon {
        let orders = draw_orders(&state, &mut rng);
        let obs = observe(&state, &orders, grid);
        let actions: Vec<u8> = match actor {
            Actor::Behavior => (0..r).map(|_| rng.random_bool(bern) as u8).collect(),
            Actor::Policy(p) => obs.iter().enumerate().map(|(i, x)| p.action(i, x)).collect(),
        };
        let (next, rewards) = advance(cfg, &state, &orders, &actions, grid);
        for i in 0..r {
            traj.x[i].push(obs[i]);
            traj.a[i].push(actions[i]);
            traj.y[i].push(rewards[i]);
        }
        state = next;
    }
    traj
}

pub fn rollout(cfg: &EnvConfig, actor: Actor<'_>, seed: u64) -> Result<Trajectory> {
    let grid = cfg.grid()?;
    if let Actor::Policy(p) = actor {
        p.check_regions(grid.n_regions())?;
    }
    let init = init_dynamic_env(cfg)?;
    Ok(rollout_from(cfg, &init, &grid, actor, seed))
}

/// Logged behavior data indexed `X[region][t][day] -> obs`, `A/Y[region][t][day]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicDataset {
    pub config: EnvConfig,
    pub data_seed: u64,
    pub grid: Grid,
    #[serde(rename = "X")]
    pub x: Vec<Vec<Vec<[f64; OBS_DIM]>>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<Vec<u8>>>,
    #[serde(rename = "Y")]
    pub y: Vec<Vec<Vec<f64>>>,
}

impl DynamicDataset {
    pub fn n_regions(&self) -> usize {
        self.x.len()
    }

    pub fn horizon(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn n_days(&self) -> usize {
        self.x.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (r, t, s) = (self.grid.n_regions(), self.horizon(), self.n_days());
        if self.x.len() != r || self.a.len() != r || self.y.len() != r {
            return config_err("dataset arrays do not match the grid's region count");
        }
        let ok = |v: usize| v == s;
        for i in 0..r {
            if self.x[i].len() != t || self.a[i].len() != t || self.y[i].len() != t {
                return config_err("dataset arrays have inconsistent horizons");
            }
            for k in 0..t {
                if !ok(self.x[i][k].len()) || !ok(self.a[i][k].len()) || !ok(self.y[i][k].len()) {
                    return config_err("dataset arrays have inconsistent day counts");
                }
                if self.a[i][k].iter().any(|&v| v > 1) {
                    return config_err("treatments must be 0 or 1");
                }
            }
        }
        Ok(())
    }

    /// Empirical per-region ranking statistic over all steps and days.
    pub fn region_stat(&self, stat: RankStat) -> Vec<f64> {
        self.x
            .iter()
            .map(|region| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for obs in region.iter().flatten() {
                    sum += match stat {
                        RankStat::AvgOrders => obs[0],
                        RankStat::MismatchGap => (obs[0] - obs[3]).abs(),
                    };
                    n += 1;
                }
                sum / n.max(1) as f64
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: DynamicDataset = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }
}

/// Generates `cfg.days` behavior days; day `j` uses sub-seed `j` of `data_seed`.
pub fn gen_dynamic(cfg: &EnvConfig, data_seed: u64) -> Result<DynamicDataset> {
    if cfg.days == 0 {
        return config_err("number of days S must be at least 1");
    }
    let grid = cfg.grid()?;
    let init = init_dynamic_env(cfg)?;
    let r = grid.n_regions();
    let t = cfg.horizon;
    let mut x = vec![vec![Vec::with_capacity(cfg.days); t]; r];
    let mut a = vec![vec![Vec::with_capacity(cfg.days); t]; r];
    let mut y = vec![vec![Vec::with_capacity(cfg.days); t]; r];
    for day in 0..cfg.days {
        let traj = rollout_from(cfg, &init, &grid, Actor::Behavior, sub_seed(data_seed, day as u64));
        for i in 0..r {
            for k in 0..t {
                x[i][k].push(traj.x[i][k]);
                a[i][k].push(traj.a[i][k]);
                y[i][k].push(traj.y[i][k]);
            }
        }
    }
    Ok(DynamicDataset {
        config: cfg.clone(),
        data_seed,
        grid,
        x,
        a,
        y,
    })
}

/// Source of the ranking statistic for a top-Q policy.
#[derive(Clone, Copy, Debug)]
pub enum Reference<'a> {
    Dataset(&'a DynamicDataset),
    /// Behavior days drawn from the environment with a seed derived from its own.
    Env(&'a EnvConfig),
}

pub fn top_q_policy(stat: RankStat, q: usize, reference: Reference<'_>) -> Result<PolicySpec> {
    let scores = match reference {
        Reference::Dataset(d) => d.region_stat(stat),
        Reference::Env(cfg) => {
            let d = gen_dynamic(cfg, sub_seed(cfg.seed, STREAM_REFERENCE))?;
            d.region_stat(stat)
        }
    };
    Ok(PolicySpec::TopQ {
        stat,
        q,
        treated: top_q(&scores, q)?,
    })
}

/// Per-rollout discounted returns summed over regions.
pub fn oracle_samples_dynamic(cfg: &EnvConfig, policy: &PolicySpec, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    if n_mc == 0 {
        return config_err("n_mc must be at least 1");
    }
    let grid = cfg.grid()?;
    policy.check_regions(grid.n_regions())?;
    let init = init_dynamic_env(cfg)?;
    Ok((0..n_mc)
        .map(|k| {
            rollout_from(cfg, &init, &grid, Actor::Policy(policy), sub_seed_path(seed, &[k as u64]))
                .discounted_return(cfg.gamma)
        })
        .collect())
}

pub fn oracle_value_dynamic(cfg: &EnvConfig, policy: &PolicySpec, n_mc: usize, seed: u64) -> Result<OracleValue> {
    Ok(OracleValue::from_samples(&oracle_samples_dynamic(cfg, policy, n_mc, seed)?))
}
