//! Deterministic target policies.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Statistic used to rank regions for a top-Q policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankStat {
    /// Average intrinsic order count.
    AvgOrders,
    /// Average absolute gap between order and driver counts.
    MismatchGap,
}

impl std::str::FromStr for RankStat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orders" | "avg-orders" => Ok(RankStat::AvgOrders),
            "mismatch" | "mismatch-gap" => Ok(RankStat::MismatchGap),
            other => config_err(format!("unknown ranking statistic '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PolicySpec {
    /// Treat iff `U * kappa + V * (1 - kappa) > 0.5` on a `(U, V)` confounder.
    Linear { kappa: f64 },
    /// Treat the regions flagged in `treated`, chosen as the top `q` by `stat`.
    TopQ {
        stat: RankStat,
        q: usize,
        treated: Vec<bool>,
    },
    /// Same action everywhere.
    Constant { action: u8 },
}

impl PolicySpec {
    pub fn linear(kappa: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return config_err(format!("kappa must lie in [0, 1], got {kappa}"));
        }
        Ok(PolicySpec::Linear { kappa })
    }

    /// Action for `region` observing confounder `x`.
    pub fn action(&self, region: usize, x: &[f64]) -> u8 {
        match self {
            PolicySpec::Linear { kappa } => linear_policy(*kappa, x[0], x[1]),
            PolicySpec::TopQ { treated, .. } => treated[region] as u8,
            PolicySpec::Constant { action } => *action,
        }
    }

    /// Number of regions the policy is defined for, if it is region-specific.
    pub fn n_regions(&self) -> Option<usize> {
        match self {
            PolicySpec::TopQ { treated, .. } => Some(treated.len()),
            _ => None,
        }
    }

    pub fn check_regions(&self, r: usize) -> Result<()> {
        match self.n_regions() {
            Some(n) if n != r => config_err(format!("policy covers {n} regions, data has {r}")),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Linear { kappa } => format!("linear:{kappa}"),
            PolicySpec::TopQ { stat, q, .. } => {
                let s = match stat {
                    RankStat::AvgOrders => "orders",
                    RankStat::MismatchGap => "mismatch",
                };
                format!("topq:{s}:{q}")
            }
            PolicySpec::Constant { action } => format!("const:{action}"),
        }
    }
}

pub fn linear_policy(kappa: f64, u: f64, v: f64) -> u8 {
    (u * kappa + v * (1.0 - kappa) > 0.5) as u8
}

/// Flags the `q` highest-scoring regions; ties go to the lower index.
pub fn top_q(scores: &[f64], q: usize) -> Result<Vec<bool>> {
    if q == 0 || q > scores.len() {
        return config_err(format!("Q must lie in 1..={}, got {q}", scores.len()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut treated = vec![false; scores.len()];
    for &i in &order[..q] {
        treated[i] = true;
    }
    Ok(treated)
}

/// Policy argument as written on the command line, before any reference data
/// is available to rank regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyArg {
    Spec(PolicySpec),
    Text(String),
}

/// Parsed textual policy: `linear:<kappa>`, `topq:<stat>:<Q>`, `const:<0|1>`.
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyText {
    Linear(f64),
    TopQ(RankStat, usize),
    Constant(u8),
}

impl std::str::FromStr for PolicyText {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidConfig(format!("cannot parse policy '{s}'"));
        match parts.as_slice() {
            ["linear", k] => {
                let kappa: f64 = k.parse().map_err(|_| bad())?;
                PolicySpec::linear(kappa)?;
                Ok(PolicyText::Linear(kappa))
            }
            ["topq", stat, q] => Ok(PolicyText::TopQ(stat.parse()?, q.parse().map_err(|_| bad())?)),
            ["const", a] => match *a {
                "0" => Ok(PolicyText::Constant(0)),
                "1" => Ok(PolicyText::Constant(1)),
                _ => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}
