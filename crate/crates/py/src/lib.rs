//! Python bindings. Rows are `[confounders..., treatment]`; reports come back
//! as plain dicts and lists.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use pie_ope::deepsets::{ArchKind, Architecture, SetModel, Workspace};
use pie_ope::harness::{run_experiment as run_exp, ExperimentConfig};
use pie_ope::ope::dynamic::estimate_dynamic;
use pie_ope::ope::nondynamic::estimate_nondynamic;
use pie_ope::ope::ratio::RatioHyper;
use pie_ope::ope::{EstimatorKind, FoldPlan, TrainHyper};
use pie_ope::policy::{PolicySpec, PolicyText};
use pie_ope::sim_dynamic::{self as dynamic, EnvConfig, Reference};
use pie_ope::sim_nondynamic::{self as nondynamic, NondynamicConfig, OracleValue, Setting};
use pie_ope::spatial::{Adjacency, Grid as CoreGrid};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => PyList::new(py, a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?)?.into_any(),
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(err)?)
}

fn parse_arch(arch: &str) -> PyResult<ArchKind> {
    arch.parse().map_err(err)
}

fn parse_estimators(names: Vec<String>) -> PyResult<Vec<EstimatorKind>> {
    names.iter().map(|n| n.parse().map_err(err)).collect()
}

/// Square grid of regions.
#[pyclass(module = "pie_ope_py", frozen)]
struct Grid(CoreGrid);

#[pymethods]
impl Grid {
    #[new]
    #[pyo3(signature = (l, adjacency = "rook", torus = false))]
    fn new(l: usize, adjacency: &str, torus: bool) -> PyResult<Self> {
        let adj: Adjacency = adjacency.parse().map_err(err)?;
        CoreGrid::build(l, adj, torus).map(Grid).map_err(err)
    }

    #[getter]
    fn n_regions(&self) -> usize {
        self.0.n_regions()
    }

    fn neighbors(&self, i: usize) -> PyResult<Vec<usize>> {
        self.0.neighbors.get(i).cloned().ok_or_else(|| err(format!("region {i} out of range")))
    }
}

/// Deepsets (`kind="pie"`) or mean-field (`kind="mf"`) outcome network.
#[pyclass(module = "pie_ope_py", frozen)]
struct Model(SetModel);

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (m, kind = "pie", hidden = 32, depth = 2, d_emb = 16, seed = 0))]
    fn new(m: usize, kind: &str, hidden: usize, depth: usize, d_emb: usize, seed: u64) -> PyResult<Self> {
        let arch = Architecture { hidden, depth, d_emb };
        SetModel::new(parse_arch(kind)?, m, arch, seed).map(Model).map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.0.kind().to_string()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.n_params()
    }

    fn forward(&self, center: Vec<f64>, neighbors: Vec<Vec<f64>>) -> PyResult<f64> {
        let d = self.0.row_dim();
        if center.len() != d || neighbors.iter().any(|r| r.len() != d) {
            return Err(err(format!("every row must have length {d}")));
        }
        if neighbors.is_empty() {
            return Err(err("at least one neighbor row is required"));
        }
        let mut ws = Workspace::default();
        Ok(self.0.forward_rows(&center, &neighbors.concat(), &mut ws))
    }

    /// The interference summary of a neighbor set.
    fn interference(&self, neighbors: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let d = self.0.row_dim();
        if neighbors.is_empty() || neighbors.iter().any(|r| r.len() != d) {
            return Err(err(format!("need at least one neighbor row of length {d}")));
        }
        let mut ws = Workspace::default();
        Ok(self.0.summary_rows(&neighbors.concat(), &mut ws).to_vec())
    }
}

/// Nondynamic dataset, arrays indexed `[region][day]`.
#[pyclass(module = "pie_ope_py", frozen)]
struct NondynamicDataset(nondynamic::NondynamicDataset);

#[pymethods]
impl NondynamicDataset {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        nondynamic::NondynamicDataset::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn n_regions(&self) -> usize {
        self.0.n_regions()
    }

    #[getter]
    fn n_days(&self) -> usize {
        self.0.n_days()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.x.clone()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<u8>> {
        self.0.a.clone()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<f64>> {
        self.0.y.clone()
    }
}

/// Dynamic dataset, arrays indexed `[region][t][day]`.
#[pyclass(module = "pie_ope_py", frozen)]
struct DynamicDataset(dynamic::DynamicDataset);

#[pymethods]
impl DynamicDataset {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        dynamic::DynamicDataset::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[getter]
    fn n_regions(&self) -> usize {
        self.0.n_regions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.0.horizon()
    }

    #[getter]
    fn n_days(&self) -> usize {
        self.0.n_days()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        self.0.x.iter().map(|r| r.iter().map(|t| t.iter().map(|o| o.to_vec()).collect()).collect()).collect()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<Vec<u8>>> {
        self.0.a.clone()
    }

    #[getter]
    fn y(&self) -> Vec<Vec<Vec<f64>>> {
        self.0.y.clone()
    }
}

fn nondynamic_config(l: usize, s: usize, setting: &str, seed: u64) -> PyResult<NondynamicConfig> {
    let setting: Setting = setting.parse().map_err(err)?;
    let cfg = NondynamicConfig::new(l, s, setting, seed);
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn dynamic_config(l: usize, horizon: usize, days: usize, gamma: f64, seed: u64, torus: bool) -> PyResult<EnvConfig> {
    let mut cfg = EnvConfig::new(l, horizon, days, gamma, seed);
    cfg.torus = torus;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyfunction]
#[pyo3(signature = (l, s, setting = "linear", seed = 0))]
fn gen_nondynamic(l: usize, s: usize, setting: &str, seed: u64) -> PyResult<NondynamicDataset> {
    let cfg = nondynamic_config(l, s, setting, seed)?;
    nondynamic::gen_nondynamic(&cfg).map(NondynamicDataset).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (l, horizon, days, gamma = 0.9, env_seed = 0, data_seed = 0, torus = false))]
fn gen_dynamic(l: usize, horizon: usize, days: usize, gamma: f64, env_seed: u64, data_seed: u64, torus: bool) -> PyResult<DynamicDataset> {
    let cfg = dynamic_config(l, horizon, days, gamma, env_seed, torus)?;
    dynamic::gen_dynamic(&cfg, data_seed).map(DynamicDataset).map_err(err)
}

fn oracle_dict<'py>(py: Python<'py>, o: OracleValue) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &o)
}

/// Monte-Carlo value of a `linear:<kappa>` or `const:<a>` policy.
#[pyfunction]
#[pyo3(signature = (l, setting, policy, n_mc = 2000, seed = 0))]
fn oracle_nondynamic<'py>(py: Python<'py>, l: usize, setting: &str, policy: &str, n_mc: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let cfg = nondynamic_config(l, 1, setting, 0)?;
    let p = nondynamic_policy(policy)?;
    let o = py.detach(|| nondynamic::oracle_value_nondynamic(&cfg, &p, n_mc, seed)).map_err(err)?;
    oracle_dict(py, o)
}

/// Monte-Carlo value of a `topq:<stat>:<Q>` or `const:<a>` policy.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (l, horizon, policy, gamma = 0.9, n_mc = 500, seed = 0, env_seed = 0))]
fn oracle_dynamic<'py>(
    py: Python<'py>,
    l: usize,
    horizon: usize,
    policy: &str,
    gamma: f64,
    n_mc: usize,
    seed: u64,
    env_seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = dynamic_config(l, horizon, 1, gamma, env_seed, false)?;
    let p = match policy.parse::<PolicyText>().map_err(err)? {
        PolicyText::TopQ(stat, q) => dynamic::top_q_policy(stat, q, Reference::Env(&cfg)).map_err(err)?,
        PolicyText::Constant(a) => PolicySpec::Constant { action: a },
        PolicyText::Linear(_) => return Err(err("linear policies apply to the nondynamic environment")),
    };
    let o = py.detach(|| dynamic::oracle_value_dynamic(&cfg, &p, n_mc, seed)).map_err(err)?;
    oracle_dict(py, o)
}

fn nondynamic_policy(policy: &str) -> PyResult<PolicySpec> {
    match policy.parse::<PolicyText>().map_err(err)? {
        PolicyText::Linear(k) => PolicySpec::linear(k).map_err(err),
        PolicyText::Constant(a) => Ok(PolicySpec::Constant { action: a }),
        PolicyText::TopQ(..) => Err(err("top-Q policies apply to the dynamic environment")),
    }
}

fn hyper(arch: &str, seed: u64, epochs: Option<usize>) -> PyResult<TrainHyper> {
    let mut h = TrainHyper::with_kind(parse_arch(arch)?);
    h.seed = seed;
    if let Some(e) = epochs {
        h.epochs = e;
    }
    h.validate().map_err(err)?;
    Ok(h)
}

/// Cross-fitted estimates on a nondynamic dataset; one dict per estimator.
#[pyfunction]
#[pyo3(signature = (data, policy, estimators = vec!["vb".to_string()], arch = "pie", folds = 2, seed = 0, epochs = None, q = 0.2))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    data: &NondynamicDataset,
    policy: &str,
    estimators: Vec<String>,
    arch: &str,
    folds: usize,
    seed: u64,
    epochs: Option<usize>,
    q: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let p = nondynamic_policy(policy)?;
    let kinds = parse_estimators(estimators)?;
    let h = hyper(arch, seed, epochs)?;
    let plan = FoldPlan::new(data.0.n_days(), folds).map_err(err)?;
    let reports = py.detach(|| estimate_nondynamic(&data.0, &p, &plan, &h, q, &kinds)).map_err(err)?;
    to_py(py, &reports)
}

/// Cross-fitted estimates on a dynamic dataset; top-Q policies rank regions
/// on the dataset itself.
#[pyfunction]
#[pyo3(signature = (data, policy, estimators = vec!["vb".to_string()], arch = "pie", folds = 2, seed = 0, epochs = None, gamma = None))]
#[allow(clippy::too_many_arguments)]
fn evaluate_dynamic<'py>(
    py: Python<'py>,
    data: &DynamicDataset,
    policy: &str,
    estimators: Vec<String>,
    arch: &str,
    folds: usize,
    seed: u64,
    epochs: Option<usize>,
    gamma: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let p = match policy.parse::<PolicyText>().map_err(err)? {
        PolicyText::TopQ(stat, q) => dynamic::top_q_policy(stat, q, Reference::Dataset(&data.0)).map_err(err)?,
        PolicyText::Constant(a) => PolicySpec::Constant { action: a },
        PolicyText::Linear(_) => return Err(err("linear policies apply to the nondynamic environment")),
    };
    let kinds = parse_estimators(estimators)?;
    let h = hyper(arch, seed, epochs)?;
    let plan = FoldPlan::new(data.0.n_days(), folds).map_err(err)?;
    let g = gamma.unwrap_or(data.0.config.gamma);
    let reports = py
        .detach(|| estimate_dynamic(&data.0, &p, g, &plan, &h, &RatioHyper::default(), &kinds))
        .map_err(err)?;
    to_py(py, &reports)
}

/// Runs an experiment from its JSON config and returns the CSV text.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let table = py.detach(|| run_exp(&cfg)).map_err(err)?;
    table.to_csv_string().map_err(err)
}

#[pymodule]
pub fn pie_ope_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Model>()?;
    m.add_class::<NondynamicDataset>()?;
    m.add_class::<DynamicDataset>()?;
    m.add_function(wrap_pyfunction!(gen_nondynamic, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_nondynamic, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_dynamic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
