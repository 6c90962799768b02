//! Conditional-expectation estimators `E[ . | F_{t_n}]` on a path sample.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::NoiseBundle;
use crate::regression::Projection;

/// Observable used as a regression variable at step `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regressor {
    /// Forward state `X_n`.
    State,
    /// Reciprocal `1 / X_n` of the forward state.
    InverseState,
    /// Running Brownian level `B(t_n)`.
    BrownianLevel,
    /// Running count of one jump atom.
    JumpCount(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    pub regressors: Vec<Regressor>,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self {
            degree: 3,
            regressors: vec![Regressor::State, Regressor::BrownianLevel],
        }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, regressors: Vec<Regressor>) -> Self {
        Self { degree, regressors }
    }

    /// Default regressors plus the running count of every jump atom.
    pub fn with_jumps(degree: usize, atoms: usize) -> Self {
        let mut regressors = vec![Regressor::State, Regressor::BrownianLevel];
        regressors.extend((0..atoms).map(Regressor::JumpCount));
        Self { degree, regressors }
    }

    /// `M x R` feature matrix at node `step`.
    pub fn features(
        &self,
        step: usize,
        x: ArrayView2<'_, f64>,
        noise: &NoiseBundle,
    ) -> Array2<f64> {
        let m = noise.num_paths();
        let levels = noise.brownian_level(step);
        Array2::from_shape_fn((m, self.regressors.len()), |(path, c)| {
            match self.regressors[c] {
                Regressor::State => x[[path, step]],
                Regressor::InverseState => 1.0 / x[[path, step]],
                Regressor::BrownianLevel => levels[path],
                Regressor::JumpCount(j) => noise.jump_total(path, step, j) as f64,
            }
        })
    }
}

/// Estimator of conditional expectations given the information at a node.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// Least-squares Monte Carlo on a polynomial basis.
    Regression(RegressionBasis),
    /// Exact averaging over paths sharing the same noise history. Valid for
    /// equally weighted, fully enumerated trees.
    Tree,
}

impl Default for Estimator {
    fn default() -> Self {
        Self::Regression(RegressionBasis::default())
    }
}

impl Estimator {
    /// Projection onto `F_{t_step}`-measurable functions.
    pub fn projection(
        &self,
        step: usize,
        x: ArrayView2<'_, f64>,
        noise: &NoiseBundle,
    ) -> Result<Projection> {
        match self {
            Estimator::Regression(basis) => {
                let features = basis.features(step, x, noise);
                Projection::regression(features.view(), basis.degree).map_err(|e| match e {
                    Error::DegenerateRegression { reason, .. } => {
                        Error::DegenerateRegression { step, reason }
                    }
                    other => other,
                })
            }
            Estimator::Tree => Ok(Projection::groups(history_labels(step, noise))),
        }
    }
}

/// Group label per path: paths with identical increments before `step` share
/// a label. Labels are assigned in first-seen order.
pub fn history_labels(step: usize, noise: &NoiseBundle) -> Vec<usize> {
    let j = noise.num_atoms();
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    (0..noise.num_paths())
        .map(|m| {
            let mut key = Vec::with_capacity(step * (1 + j));
            for s in 0..step {
                key.push(noise.db(m, s).to_bits());
                for a in 0..j {
                    key.push(noise.jump_counts()[[m, s, a]] as u64);
                }
            }
            let next = seen.len();
            *seen.entry(key).or_insert(next)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::noise::JumpAtomMeasure;

    #[test]
    fn tree_labels_follow_prefixes() {
        let g = TimeGrid::new(1.0, 3, 1).unwrap();
        let noise = NoiseBundle::binary_tree(g).unwrap();
        assert_eq!(history_labels(0, &noise), vec![0; 8]);
        assert_eq!(history_labels(1, &noise), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(history_labels(3, &noise), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn step_zero_regression_is_the_mean() {
        let g = TimeGrid::new(1.0, 4, 1).unwrap();
        let noise = NoiseBundle::simulate(g, JumpAtomMeasure::empty(), 100, 1);
        let x = Array2::from_elem((100, 5), 1.0);
        let p = Estimator::default()
            .projection(0, x.view(), &noise)
            .unwrap();
        assert_eq!(p.basis_size(), 1);
    }
}
