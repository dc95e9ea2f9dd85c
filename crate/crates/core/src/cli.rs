//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration errors, 1 runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use crate::deepsets::ArchKind;
use crate::error::Error;
use crate::harness::{oracle_for, run_experiment, EnvSpec, ExperimentConfig};
use crate::ope::dynamic::estimate_dynamic;
use crate::ope::nondynamic::{estimate_nondynamic, DEFAULT_QUANTILE};
use crate::ope::ratio::RatioHyper;
use crate::ope::{EstimatorKind, FoldPlan, TrainHyper};
use crate::policy::{PolicySpec, PolicyText};
use crate::sim_dynamic::{gen_dynamic, top_q_policy, DynamicDataset, EnvConfig, Reference};
use crate::sim_nondynamic::{gen_nondynamic, NondynamicConfig, NondynamicDataset, Setting};

#[derive(Parser, Debug)]
#[command(name = "pie-ope", version, about = "Off-policy evaluation under spatial interference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset and write it as JSON.
    Gen(GenArgs),
    /// Monte-Carlo value of a policy in a simulated environment.
    Oracle(OracleArgs),
    /// Estimate a policy value on a nondynamic dataset.
    Evaluate(EvalArgs),
    /// Estimate a policy value on a dynamic dataset.
    EvaluateDynamic(EvalDynamicArgs),
    /// Run a replicated experiment from a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum EnvKind {
    Nondynamic,
    Dynamic,
}

/// Environment description shared by `gen` and `oracle`.
#[derive(Args, Debug)]
struct EnvArgs {
    #[arg(long, value_enum, default_value = "nondynamic")]
    env: EnvKind,
    /// JSON file with the full environment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid side length.
    #[arg(short = 'l', long = "l")]
    l: Option<usize>,
    /// Number of days.
    #[arg(short = 'S', long = "S")]
    s: Option<usize>,
    /// Steps per day (dynamic).
    #[arg(short = 'T', long = "T")]
    t: Option<usize>,
    /// Nondynamic response setting: linear, nonlinear1, nonlinear2.
    #[arg(long)]
    setting: Option<Setting>,
    /// Discount factor (dynamic).
    #[arg(long)]
    gamma: Option<f64>,
    /// Wrap-around adjacency.
    #[arg(long)]
    torus: bool,
    /// Environment seed (nondynamic data, dynamic city parameters).
    #[arg(long = "env-seed")]
    env_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// Seed of the simulated days; defaults to the environment seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[command(flatten)]
    env: EnvArgs,
    /// linear:<kappa>, topq:<orders|drivers|mismatch>:<Q> or const:<0|1>.
    #[arg(long)]
    policy: String,
    /// Monte-Carlo draws.
    #[arg(long, default_value_t = 1000)]
    mc: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct EvalCommon {
    #[arg(long)]
    data: PathBuf,
    /// One or more of vb, is, dr (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "vb")]
    estimator: Vec<EstimatorKind>,
    #[arg(long, default_value = "pie")]
    arch: ArchKind,
    #[arg(long)]
    policy: String,
    #[arg(long, default_value_t = 2)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON file with training hyperparameters.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Override the training epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Quantile of the relaxed importance indicator.
    #[arg(long, default_value_t = DEFAULT_QUANTILE)]
    q: f64,
}

#[derive(Args, Debug)]
struct EvalDynamicArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Discount factor; defaults to the one stored with the data.
    #[arg(long)]
    gamma: Option<f64>,
    /// JSON file with ratio-model hyperparameters.
    #[arg(long)]
    ratio: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// CSV path; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidArchitecture(_) | Error::Json(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::EvaluateDynamic(a) => cmd_evaluate_dynamic(a),
        Command::Experiment(a) => cmd_experiment(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {}", one_line(&m));
            2
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", one_line(&m));
            1
        }
    }
}

fn one_line(m: &str) -> String {
    m.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

/// Deserializes JSON, naming the key path of the first bad value.
fn parse_json<T: DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Failure::Usage(format!("invalid {what} at {path}: {}", e.into_inner()))
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    let mut text = text.to_string();
    if !text.ends_with('\n') {
        text.push('\n');
    }
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn build_env(a: &EnvArgs) -> CliResult<EnvSpec> {
    let base = match &a.config {
        Some(p) => Some(read_text(p)?),
        None => None,
    };
    let env = match a.env {
        EnvKind::Nondynamic => {
            let mut c: NondynamicConfig = match &base {
                Some(t) => parse_json(t, "environment config")?,
                None => NondynamicConfig::new(5, 100, Setting::Linear, 0),
            };
            if a.t.is_some() || a.gamma.is_some() || a.torus {
                return Err(Failure::Usage("--T/--gamma/--torus are dynamic-only flags".into()));
            }
            c.l = a.l.unwrap_or(c.l);
            c.s = a.s.unwrap_or(c.s);
            c.setting = a.setting.unwrap_or(c.setting);
            c.seed = a.env_seed.unwrap_or(c.seed);
            c.validate()?;
            EnvSpec::Nondynamic(c)
        }
        EnvKind::Dynamic => {
            let mut c: EnvConfig = match &base {
                Some(t) => parse_json(t, "environment config")?,
                None => EnvConfig::new(5, 20, 50, 0.9, 0),
            };
            if a.setting.is_some() {
                return Err(Failure::Usage("--setting applies to the nondynamic environment".into()));
            }
            c.l = a.l.unwrap_or(c.l);
            c.days = a.s.unwrap_or(c.days);
            c.horizon = a.t.unwrap_or(c.horizon);
            c.gamma = a.gamma.unwrap_or(c.gamma);
            c.seed = a.env_seed.unwrap_or(c.seed);
            c.torus |= a.torus;
            c.validate()?;
            EnvSpec::Dynamic(c)
        }
    };
    Ok(env)
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let json = match build_env(&a.env)? {
        EnvSpec::Nondynamic(mut c) => {
            if let Some(s) = a.seed {
                c.seed = s;
            }
            gen_nondynamic(&c)?.to_json()?
        }
        EnvSpec::Dynamic(c) => gen_dynamic(&c, a.seed.unwrap_or(c.seed))?.to_json()?,
    };
    write_text(&a.out, &json)
}

fn cmd_oracle(a: OracleArgs) -> CliResult<()> {
    let env = build_env(&a.env)?;
    if a.mc == 0 {
        return Err(Failure::Usage("--mc must be at least 1".into()));
    }
    let text: PolicyText = a.policy.parse()?;
    let policy = crate::harness::resolve_policy(&text, &env)?;
    let o = oracle_for(&env, &policy, a.mc, a.seed)?;
    println!("{}", serde_json::to_string(&o).map_err(Error::from)?);
    Ok(())
}

fn hyper_for(c: &EvalCommon) -> CliResult<TrainHyper> {
    let mut h: TrainHyper = match &c.train {
        Some(p) => parse_json(&read_text(p)?, "training config")?,
        None => TrainHyper::default(),
    };
    h.kind = c.arch;
    h.seed = c.seed;
    if let Some(e) = c.epochs {
        h.epochs = e;
    }
    h.validate()?;
    Ok(h)
}

fn report_json(reports: &[crate::ope::EstimateReport]) -> CliResult<String> {
    let s = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])
    } else {
        serde_json::to_string_pretty(reports)
    };
    Ok(s.map_err(Error::from)?)
}

fn cmd_evaluate(a: EvalArgs) -> CliResult<()> {
    let c = &a.common;
    let data = NondynamicDataset::from_json(&read_text(&c.data)?)?;
    let policy = match c.policy.parse::<PolicyText>()? {
        PolicyText::Linear(k) => PolicySpec::linear(k)?,
        PolicyText::Constant(x) => PolicySpec::Constant { action: x },
        PolicyText::TopQ(..) => return Err(Failure::Usage("top-Q policies need evaluate-dynamic".into())),
    };
    let folds = FoldPlan::new(data.n_days(), c.folds)?;
    let hyper = hyper_for(c)?;
    let reports = estimate_nondynamic(&data, &policy, &folds, &hyper, a.q, &c.estimator)?;
    emit(c.out.as_deref(), &report_json(&reports)?)
}

fn cmd_evaluate_dynamic(a: EvalDynamicArgs) -> CliResult<()> {
    let c = &a.common;
    let data = DynamicDataset::from_json(&read_text(&c.data)?)?;
    let policy = match c.policy.parse::<PolicyText>()? {
        PolicyText::TopQ(stat, q) => top_q_policy(stat, q, Reference::Dataset(&data))?,
        PolicyText::Constant(x) => PolicySpec::Constant { action: x },
        PolicyText::Linear(_) => return Err(Failure::Usage("linear policies need the nondynamic evaluate".into())),
    };
    let ratio: RatioHyper = match &a.ratio {
        Some(p) => parse_json(&read_text(p)?, "ratio config")?,
        None => RatioHyper::default(),
    };
    let gamma = a.gamma.unwrap_or(data.config.gamma);
    let folds = FoldPlan::new(data.n_days(), c.folds)?;
    let hyper = hyper_for(c)?;
    let reports = estimate_dynamic(&data, &policy, gamma, &folds, &hyper, &ratio, &c.estimator)?;
    emit(c.out.as_deref(), &report_json(&reports)?)
}

fn cmd_experiment(a: ExperimentArgs) -> CliResult<()> {
    let text = read_text(&a.config)?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let out = a.out.or_else(|| cfg.out.as_ref().map(PathBuf::from));
    let table = run_experiment(&cfg)?;
    let csv = table.to_csv_string()?;
    emit(out.as_deref(), &csv)?;
    if let Some(j) = a.json {
        write_text(&j, &serde_json::to_string_pretty(&table).map_err(Error::from)?)?;
    }
    Ok(())
}
