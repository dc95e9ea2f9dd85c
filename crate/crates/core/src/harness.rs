//! Replicated experiments against Monte-Carlo oracles.
//!
//! A run generates `n_rep` datasets, evaluates every (estimator, arch) cell
//! on each, and compares against an oracle value computed once per policy.
//! Rows are merged in replication order so the output does not depend on
//! scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deepsets::ArchKind;
use crate::error::{config_err, Error, Result};
use crate::ope::dynamic::estimate_dynamic;
use crate::ope::nondynamic::{estimate_nondynamic, DEFAULT_QUANTILE};
use crate::ope::ratio::RatioHyper;
use crate::ope::{EstimatorKind, FoldPlan, TrainHyper};
use crate::policy::{PolicySpec, PolicyText};
use crate::rng::{sub_seed, sub_seed_path};
use crate::sim_dynamic::{gen_dynamic, oracle_value_dynamic, top_q_policy, DynamicDataset, EnvConfig, Reference};
use crate::sim_nondynamic::{gen_nondynamic, oracle_value_nondynamic, NondynamicConfig, NondynamicDataset, OracleValue};

pub const CSV_SCHEMA: &str = "pie-ope-results/v1";
pub const DEFAULT_MC_NONDYNAMIC: usize = 2_000;
pub const DEFAULT_MC_DYNAMIC: usize = 500;
pub const WORKERS_ENV: &str = "CD_WORKERS";

const STREAM_ORACLE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Nondynamic(NondynamicConfig),
    Dynamic(EnvConfig),
}

impl EnvSpec {
    pub fn label(&self) -> &'static str {
        match self {
            EnvSpec::Nondynamic(_) => "nondynamic",
            EnvSpec::Dynamic(_) => "dynamic",
        }
    }

    pub fn setting(&self) -> String {
        match self {
            EnvSpec::Nondynamic(c) => c.setting.to_string(),
            EnvSpec::Dynamic(c) => format!("gamma={}", c.gamma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorCell {
    pub estimator: EstimatorKind,
    pub arch: ArchKind,
}

/// Scaled-size overrides applied on top of the environment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub l: Option<usize>,
    #[serde(rename = "S")]
    pub s: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "Q")]
    pub q: Option<usize>,
    pub n_mc: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub policies: Vec<String>,
    pub estimators: Vec<EstimatorCell>,
    #[serde(default = "one")]
    pub n_rep: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "two")]
    pub folds: usize,
    #[serde(default)]
    pub n_mc: Option<usize>,
    /// Quantile for the relaxed importance indicator.
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default)]
    pub train: TrainHyper,
    #[serde(default)]
    pub ratio: RatioHyper,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub out: Option<String>,
}

fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn default_q() -> f64 {
    DEFAULT_QUANTILE
}

/// Error located at a key path of the configuration.
fn at(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{path}: {msg}"))
}

impl ExperimentConfig {
    /// Parses JSON, reporting the key path of the first offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::InvalidConfig(format!("{path}: {inner}"))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Environment with the overrides applied.
    pub fn resolved_env(&self) -> EnvSpec {
        let o = &self.overrides;
        match &self.env {
            EnvSpec::Nondynamic(c) => {
                let mut c = c.clone();
                c.l = o.l.unwrap_or(c.l);
                c.s = o.s.unwrap_or(c.s);
                EnvSpec::Nondynamic(c)
            }
            EnvSpec::Dynamic(c) => {
                let mut c = c.clone();
                c.l = o.l.unwrap_or(c.l);
                c.days = o.s.unwrap_or(c.days);
                c.horizon = o.t.unwrap_or(c.horizon);
                EnvSpec::Dynamic(c)
            }
        }
    }

    pub fn n_mc(&self) -> usize {
        self.overrides.n_mc.or(self.n_mc).unwrap_or(match self.env {
            EnvSpec::Nondynamic(_) => DEFAULT_MC_NONDYNAMIC,
            EnvSpec::Dynamic(_) => DEFAULT_MC_DYNAMIC,
        })
    }

    pub fn parsed_policies(&self) -> Result<Vec<PolicyText>> {
        self.policies
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let t: PolicyText = p.parse().map_err(|e: Error| at(&format!("policies[{k}]"), strip(&e)))?;
                Ok(match (t, self.overrides.q) {
                    (PolicyText::TopQ(s, _), Some(q)) => PolicyText::TopQ(s, q),
                    (t, _) => t,
                })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rep == 0 {
            return Err(at("n_rep", "must be at least 1"));
        }
        if self.estimators.is_empty() {
            return Err(at("estimators", "must list at least one estimator"));
        }
        if self.policies.is_empty() {
            return Err(at("policies", "must list at least one policy"));
        }
        if self.n_mc() == 0 {
            return Err(at("n_mc", "must be at least 1"));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(at("q", format!("must lie in (0, 1), got {}", self.q)));
        }
        self.train.validate().map_err(|e| at("train", strip(&e)))?;
        let env = self.resolved_env();
        let r = match &env {
            EnvSpec::Nondynamic(c) => {
                c.validate().map_err(|e| at("env.nondynamic", strip(&e)))?;
                c.grid().map_err(|e| at("env.nondynamic.l", strip(&e)))?;
                FoldPlan::new(c.s, self.folds).map_err(|e| at("folds", strip(&e)))?;
                c.l * c.l
            }
            EnvSpec::Dynamic(c) => {
                c.validate().map_err(|e| at("env.dynamic", strip(&e)))?;
                c.grid().map_err(|e| at("env.dynamic.l", strip(&e)))?;
                FoldPlan::new(c.days, self.folds).map_err(|e| at("folds", strip(&e)))?;
                let needs_ratio = self.estimators.iter().any(|e| e.estimator != EstimatorKind::Vb);
                if needs_ratio && c.gamma >= 1.0 {
                    return Err(at("env.dynamic.gamma", "IS and DR need gamma < 1"));
                }
                c.l * c.l
            }
        };
        for (k, p) in self.parsed_policies()?.iter().enumerate() {
            let path = format!("policies[{k}]");
            match (p, &env) {
                (PolicyText::TopQ(_, q), _) if *q == 0 || *q > r => {
                    return Err(at(&path, format!("Q must lie in 1..={r}, got {q}")))
                }
                (PolicyText::TopQ(..), EnvSpec::Nondynamic(_)) => {
                    return Err(at(&path, "top-Q policies apply to the dynamic environment"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Message of a config error without the variant prefix.
fn strip(e: &Error) -> String {
    match e {
        Error::InvalidConfig(m) | Error::InvalidInput(m) | Error::Shape(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Resolves a policy string against an environment.
pub fn resolve_policy(text: &PolicyText, env: &EnvSpec) -> Result<PolicySpec> {
    match text {
        PolicyText::Linear(k) => PolicySpec::linear(*k),
        PolicyText::Constant(a) => Ok(PolicySpec::Constant { action: *a }),
        PolicyText::TopQ(stat, q) => match env {
            EnvSpec::Dynamic(c) => top_q_policy(*stat, *q, Reference::Env(c)),
            EnvSpec::Nondynamic(_) => config_err("top-Q policies apply to the dynamic environment"),
        },
    }
}

pub fn oracle_for(env: &EnvSpec, policy: &PolicySpec, n_mc: usize, seed: u64) -> Result<OracleValue> {
    match env {
        EnvSpec::Nondynamic(c) => oracle_value_nondynamic(c, policy, n_mc, seed),
        EnvSpec::Dynamic(c) => oracle_value_dynamic(c, policy, n_mc, seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Nondynamic(NondynamicDataset),
    Dynamic(DynamicDataset),
}

/// Replication `r`'s dataset. Nondynamic data are fully seeded by the
/// replication; dynamic data keep the environment's city and vary the days.
pub fn replicate(env: &EnvSpec, seed: u64) -> Result<Dataset> {
    Ok(match env {
        EnvSpec::Nondynamic(c) => {
            let mut c = c.clone();
            c.seed = seed;
            Dataset::Nondynamic(gen_nondynamic(&c)?)
        }
        EnvSpec::Dynamic(c) => Dataset::Dynamic(gen_dynamic(c, seed)?),
    })
}

/// Everything an estimator cell needs besides the data.
pub struct CellContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub policy: &'a PolicySpec,
    pub arch: ArchKind,
    pub estimators: &'a [EstimatorKind],
    pub seed: u64,
    pub oracle: f64,
}

/// Default cell runner: the cross-fitted network estimators.
pub fn run_estimators(data: &Dataset, ctx: &CellContext<'_>) -> Result<Vec<f64>> {
    let mut hyper = ctx.cfg.train.clone();
    hyper.kind = ctx.arch;
    hyper.seed = ctx.seed;
    let reports = match data {
        Dataset::Nondynamic(d) => {
            let folds = FoldPlan::new(d.n_days(), ctx.cfg.folds)?;
            estimate_nondynamic(d, ctx.policy, &folds, &hyper, ctx.cfg.q, ctx.estimators)?
        }
        Dataset::Dynamic(d) => {
            let folds = FoldPlan::new(d.n_days(), ctx.cfg.folds)?;
            estimate_dynamic(d, ctx.policy, d.config.gamma, &folds, &hyper, &ctx.cfg.ratio, ctx.estimators)?
        }
    };
    Ok(reports.into_iter().map(|r| r.estimate).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub env: String,
    pub setting: String,
    pub policy: String,
    pub estimator: EstimatorKind,
    pub arch: ArchKind,
    pub replication: usize,
    pub estimate: Option<f64>,
    pub oracle: f64,
    pub oracle_se: f64,
    pub squared_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub setting: String,
    pub policy: String,
    pub estimator: EstimatorKind,
    pub arch: ArchKind,
    pub n_ok: usize,
    pub median_mse: Option<f64>,
    pub mean_mse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema: String,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    let key = |r: &ResultRow| (r.env.clone(), r.setting.clone(), r.policy.clone(), r.estimator, r.arch);
    let mut keys = Vec::new();
    for r in rows {
        if !keys.contains(&key(r)) {
            keys.push(key(r));
        }
    }
    for k in keys {
        let errs: Vec<f64> = rows.iter().filter(|r| key(r) == k).filter_map(|r| r.squared_error).collect();
        out.push(SummaryRow {
            env: k.0,
            setting: k.1,
            policy: k.2,
            estimator: k.3,
            arch: k.4,
            n_ok: errs.len(),
            median_mse: median(&errs),
            mean_mse: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
        });
    }
    out
}

impl ResultTable {
    pub fn summary_for(&self, policy: &str, estimator: EstimatorKind, arch: ArchKind) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.policy == policy && s.estimator == estimator && s.arch == arch)
    }

    pub const CSV_COLUMNS: [&'static str; 14] = [
        "kind",
        "env",
        "setting",
        "policy",
        "estimator",
        "arch",
        "replication",
        "estimate",
        "oracle",
        "oracle_se",
        "squared_error",
        "median_mse",
        "mean_mse",
        "message",
    ];

    /// CSV with a `#schema=` line, one line per replication and cell, then
    /// one summary line per cell.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "#schema={}", self.schema)?;
        let mut w = csv::Writer::from_writer(out);
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(Self::CSV_COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                if r.error.is_some() { "error" } else { "row" }.to_string(),
                r.env.clone(),
                r.setting.clone(),
                r.policy.clone(),
                r.estimator.to_string(),
                r.arch.to_string(),
                r.replication.to_string(),
                f(r.estimate),
                r.oracle.to_string(),
                r.oracle_se.to_string(),
                f(r.squared_error),
                String::new(),
                String::new(),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        for s in &self.summary {
            w.write_record([
                "summary".to_string(),
                s.env.clone(),
                s.setting.clone(),
                s.policy.clone(),
                s.estimator.to_string(),
                s.arch.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                f(s.median_mse),
                f(s.mean_mse),
                format!("n_ok={}", s.n_ok),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Worker count from `CD_WORKERS`, defaulting to the available cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => config_err(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    run_experiment_with(cfg, &run_estimators)
}

/// Runs the experiment with a custom cell runner returning one estimate per
/// requested estimator.
pub fn run_experiment_with<F>(cfg: &ExperimentConfig, runner: &F) -> Result<ResultTable>
where
    F: Fn(&Dataset, &CellContext<'_>) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let env = cfg.resolved_env();
    let n_mc = cfg.n_mc();
    let policies: Vec<(String, PolicySpec)> = cfg
        .parsed_policies()?
        .iter()
        .zip(&cfg.policies)
        .map(|(t, s)| Ok((s.clone(), resolve_policy(t, &env)?)))
        .collect::<Result<_>>()?;
    let oracles: Vec<OracleValue> = policies
        .iter()
        .enumerate()
        .map(|(k, (_, p))| oracle_for(&env, p, n_mc, sub_seed(cfg.seed, STREAM_ORACLE + k as u64)))
        .collect::<Result<_>>()?;

    let mut archs: Vec<ArchKind> = Vec::new();
    for c in &cfg.estimators {
        if !archs.contains(&c.arch) {
            archs.push(c.arch);
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    let per_rep: Vec<Result<Vec<ResultRow>>> = pool.install(|| {
        (0..cfg.n_rep)
            .into_par_iter()
            .map(|rep| {
                let data = replicate(&env, sub_seed(cfg.seed, rep as u64))?;
                let mut rows = Vec::new();
                for (pk, (label, policy)) in policies.iter().enumerate() {
                    let oracle = oracles[pk];
                    for (ak, &arch) in archs.iter().enumerate() {
                        let cells: Vec<EstimatorKind> = cfg
                            .estimators
                            .iter()
                            .filter(|c| c.arch == arch)
                            .map(|c| c.estimator)
                            .collect();
                        let ctx = CellContext {
                            cfg,
                            policy,
                            arch,
                            estimators: &cells,
                            seed: sub_seed_path(cfg.seed, &[rep as u64, pk as u64, ak as u64]),
                            oracle: oracle.value,
                        };
                        let result = runner(&data, &ctx);
                        for (ek, &estimator) in cells.iter().enumerate() {
                            let (estimate, error) = match &result {
                                Ok(v) => match v.get(ek) {
                                    Some(x) if x.is_finite() => (Some(*x), None),
                                    Some(x) => (None, Some(format!("non-finite estimate {x}"))),
                                    None => (None, Some("runner returned too few estimates".into())),
                                },
                                Err(e) => (None, Some(e.to_string())),
                            };
                            rows.push(ResultRow {
                                env: env.label().into(),
                                setting: env.setting(),
                                policy: label.clone(),
                                estimator,
                                arch,
                                replication: rep,
                                estimate,
                                oracle: oracle.value,
                                oracle_se: oracle.stderr_of_mean,
                                squared_error: estimate.map(|x| (x - oracle.value).powi(2)),
                                error,
                            });
                        }
                    }
                }
                Ok(rows)
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_rep {
        rows.extend(r?);
    }
    // Order rows by policy and cell, then replication, for readable output.
    let cell_rank = |r: &ResultRow| {
        let pk = policies.iter().position(|(l, _)| *l == r.policy).unwrap_or(0);
        let ck = cfg
            .estimators
            .iter()
            .position(|c| c.estimator == r.estimator && c.arch == r.arch)
            .unwrap_or(0);
        (pk, ck, r.replication)
    };
    rows.sort_by_key(cell_rank);
    let summary = summarize(&rows);
    Ok(ResultTable {
        schema: CSV_SCHEMA.into(),
        rows,
        summary,
    })
}
