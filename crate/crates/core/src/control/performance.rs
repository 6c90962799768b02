//! Performance functional `J(u) = E[sum f dt + phi(X_T)] + psi(Y_0)` and its
//! directional derivatives.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::adjoint::{primal_point, AdjointSolution};
use super::hamiltonian::hamiltonian_partial;
use crate::bsde::{solve_fbsde, PicardOptions, PredictiveSolution};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::model::{ControlPolicy, FbsdeSpec, Variable};
use crate::noise::NoiseBundle;

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn from_samples(samples: &Array1<f64>) -> Self {
        let m = samples.len();
        let value = samples.mean().unwrap_or(0.0);
        let std_error = if m > 1 {
            samples.std(1.0) / (m as f64).sqrt()
        } else {
            0.0
        };
        Self { value, std_error }
    }
}

/// Per-path contributions `sum_n f_n dt + phi(X_N)` (left-endpoint rule).
pub fn reward_paths(spec: &FbsdeSpec, sol: &PredictiveSolution) -> Array1<f64> {
    let n_steps = sol.grid.num_steps();
    let dt = sol.grid.dt();
    let co = &*spec.coefficients;
    Array1::from_shape_fn(sol.num_paths(), |m| {
        let mut kbuf = Vec::new();
        let mut v = co.terminal_reward(sol.x[[m, n_steps]]);
        for n in 0..n_steps {
            v += co.running_reward(&primal_point(sol, m, n, &mut kbuf)) * dt;
        }
        v
    })
}

/// Per-path linearization of `J`: rewards plus `psi'(Y_0)` times the realized
/// value of `Y_0`. Its mean differs from `J` only through the curvature of
/// `psi`; its spread gives the standard error.
pub fn performance_paths(spec: &FbsdeSpec, sol: &PredictiveSolution) -> Array1<f64> {
    let co = &*spec.coefficients;
    let y0 = sol.y0();
    let slope = co.initial_reward_deriv(y0);
    let mut v = reward_paths(spec, sol);
    if slope != 0.0 {
        v += &(sol.realized_y0() * slope);
    }
    v
}

pub fn performance(spec: &FbsdeSpec, sol: &PredictiveSolution) -> Estimate {
    let rewards = reward_paths(spec, sol);
    let value = rewards.mean().unwrap_or(0.0) + spec.coefficients.initial_reward(sol.y0());
    let se = Estimate::from_samples(&performance_paths(spec, sol)).std_error;
    Estimate {
        value,
        std_error: se,
    }
}

/// Returns the first inadmissible `(path, step)` for `n < N`.
pub fn first_inadmissible(spec: &FbsdeSpec, sol: &PredictiveSolution) -> Option<(usize, usize)> {
    let co = &*spec.coefficients;
    let n_steps = sol.grid.num_steps();
    for m in 0..sol.num_paths() {
        for n in 0..n_steps {
            if !co.admissible(sol.x[[m, n]], sol.u[[m, n]]) {
                return Some((m, n));
            }
        }
    }
    None
}

/// Solves the system under `policy` and rejects inadmissible outcomes.
pub fn solve_policy(
    spec: &FbsdeSpec,
    policy: &ControlPolicy,
    noise: &NoiseBundle,
    estimator: &Estimator,
) -> Result<PredictiveSolution> {
    let sol = solve_fbsde(spec, policy, noise, estimator, PicardOptions::default())?.solution;
    if let Some((m, n)) = first_inadmissible(spec, &sol) {
        return Err(Error::Inadmissible(format!(
            "state {} with control {} on path {m} at step {n}",
            sol.x[[m, n]],
            sol.u[[m, n]]
        )));
    }
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateauxEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Step actually used after shrinking.
    pub step: f64,
    pub shrinks: usize,
}

/// Central difference `(J(u + r beta) - J(u - r beta)) / 2r` on common
/// random numbers. The step is halved (up to 8 times) while either side is
/// inadmissible.
pub fn gateaux_derivative(
    spec: &FbsdeSpec,
    base: &ControlPolicy,
    beta: Arc<Array2<f64>>,
    step: f64,
    noise: &NoiseBundle,
    estimator: &Estimator,
) -> Result<GateauxEstimate> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "step {step} must be positive"
        )));
    }
    if beta.iter().all(|&b| b == 0.0) {
        return Ok(GateauxEstimate {
            value: 0.0,
            std_error: 0.0,
            step,
            shrinks: 0,
        });
    }
    let mut r = step;
    let mut last_err = None;
    for shrinks in 0..=8 {
        let up = solve_policy(spec, &base.shifted(beta.clone(), r), noise, estimator);
        let down = solve_policy(spec, &base.shifted(beta.clone(), -r), noise, estimator);
        match (up, down) {
            (Ok(up), Ok(down)) => {
                let ju = performance(spec, &up).value;
                let jd = performance(spec, &down).value;
                let diff =
                    (performance_paths(spec, &up) - performance_paths(spec, &down)) / (2.0 * r);
                return Ok(GateauxEstimate {
                    value: (ju - jd) / (2.0 * r),
                    std_error: Estimate::from_samples(&diff).std_error,
                    step: r,
                    shrinks,
                });
            }
            (Err(e @ Error::Inadmissible(_)), _) | (_, Err(e @ Error::Inadmissible(_))) => {
                last_err = Some(e);
                r *= 0.5;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Inadmissible("perturbation".into())))
}

/// `dH/du` at every `(path, step)` with multipliers `(p̂, q, r, lambda)`.
pub fn hamiltonian_gradient_u(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
) -> Array2<f64> {
    let (m_paths, n_steps) = sol.z.dim();
    let mut out = Array2::zeros((m_paths, n_steps));
    out.indexed_iter_mut().for_each(|((m, n), v)| {
        let mut kbuf = Vec::new();
        let mut rbuf = Vec::new();
        let point = primal_point(sol, m, n, &mut kbuf);
        *v = hamiltonian_partial(spec, &point, &adj.multipliers(m, n, &mut rbuf), Variable::U);
    });
    out
}

/// `E[sum_n dH/du_n beta_n dt]`, the adjoint form of the Gateaux derivative.
pub fn adjoint_directional(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    beta: &Array2<f64>,
) -> Estimate {
    let grad = hamiltonian_gradient_u(spec, sol, adj);
    let dt = sol.grid.dt();
    let per_path = (grad * beta).sum_axis(ndarray::Axis(1)) * dt;
    Estimate::from_samples(&per_path)
}
