//! Application pipelines built on the solvers: an insider-influenced market
//! and predictive recursive utility.

pub mod insider;
pub mod recursive_utility;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{Estimator, RegressionBasis, Regressor};

/// Piecewise-constant deterministic curve. `Table` holds the value
/// `values[i]` on `[times[i], times[i+1])`, the last value extending to
/// infinity; `times` starts at 0 and increases strictly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Curve {
    Constant(f64),
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl Default for Curve {
    fn default() -> Self {
        Curve::Constant(0.0)
    }
}

impl Curve {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Curve::Constant(c) => *c,
            Curve::Table { times, values } => {
                let i = times.partition_point(|&s| s <= t).max(1);
                values[i - 1]
            }
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        match self {
            Curve::Constant(c) if c.is_finite() => Ok(()),
            Curve::Constant(c) => Err(Error::InvalidParameter(format!(
                "{name}: non-finite value {c}"
            ))),
            Curve::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::InvalidParameter(format!(
                        "{name}: times and values must be non-empty and of equal length"
                    )));
                }
                if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidParameter(format!(
                        "{name}: times must start at 0 and increase strictly"
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidParameter(format!("{name}: non-finite value")));
                }
                Ok(())
            }
        }
    }

    /// Smallest value taken on `[0, horizon]`.
    pub fn min_on(&self, horizon: f64) -> f64 {
        match self {
            Curve::Constant(c) => *c,
            Curve::Table { times, values } => times
                .iter()
                .zip(values)
                .filter(|(t, _)| **t <= horizon)
                .map(|(_, v)| *v)
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Monte Carlo and regression settings shared by the pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub paths: usize,
    pub seed: u64,
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Regression variables; empty selects the pipeline's default.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regressors: Vec<Regressor>,
}

fn default_degree() -> usize {
    3
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 1,
            degree: 3,
            regressors: Vec::new(),
        }
    }
}

impl SolverSettings {
    /// Regression estimator on `regressors`, or on `defaults` plus every
    /// jump count when none are configured.
    pub fn estimator(&self, defaults: &[Regressor], atoms: usize) -> Estimator {
        let regressors = if self.regressors.is_empty() {
            let mut r = defaults.to_vec();
            r.extend((0..atoms).map(Regressor::JumpCount));
            r
        } else {
            self.regressors.clone()
        };
        Estimator::Regression(RegressionBasis::new(self.degree, regressors))
    }
}
