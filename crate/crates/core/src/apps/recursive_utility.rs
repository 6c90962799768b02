//! Optimal relative consumption under predictive recursive utility.
//!
//! Wealth follows `dX = X[(mu - c) dt + sigma dB + gamma zeta dÑ]` and the
//! utility solves `dY = -(alpha A + ln(c X)) dt + Z dB + K dÑ`, `Y(T) = 0`,
//! with `A(t) = E[Y(t + delta) | F_t]` and `Y = 0` past the horizon. The
//! adjoint `lambda` solves the deterministic delay equation
//! `dlambda = alpha(t - delta) lambda(t - delta) dt` on `[delta, T]`,
//! `lambda(0) = 1`, and the optimal rate is `c* = lambda / R` with
//! `R(t) = int_t^T lambda ds`.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::{Curve, SolverSettings};
use crate::bsde::{step_projections, PredictiveSolution};
use crate::control::adjoint::{solve_adjoints_with, AdjointOptions, AdjointSolution};
use crate::control::checks::CheckReport;
use crate::control::performance::{solve_policy, Estimate};
use crate::error::{Error, Result};
use crate::estimator::{Estimator, Regressor};
use crate::grid::TimeGrid;
use crate::model::{
    Coefficient, Coefficients, ControlPolicy, FbsdeSpec, Point, TerminalDatum, Variable,
};
use crate::noise::{JumpAtom, JumpAtomMeasure, NoiseBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecursiveUtilityScenario {
    pub horizon: f64,
    pub steps: usize,
    pub delay: f64,
    pub x0: f64,
    #[serde(default)]
    pub mu: Curve,
    #[serde(default)]
    pub sigma: Curve,
    /// Relative jump size per unit mark.
    #[serde(default)]
    pub gamma: Curve,
    #[serde(default)]
    pub atoms: Vec<JumpAtom>,
    #[serde(default)]
    pub alpha: Curve,
    /// Cap on `c*` near the horizon.
    #[serde(default = "default_cap")]
    pub c_max: f64,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_cap() -> f64 {
    1e3
}

impl Default for RecursiveUtilityScenario {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 64,
            delay: 0.25,
            x0: 1.0,
            mu: Curve::Constant(0.05),
            sigma: Curve::Constant(0.2),
            gamma: Curve::Constant(0.0),
            atoms: Vec::new(),
            alpha: Curve::Constant(0.0),
            c_max: default_cap(),
            solver: SolverSettings::default(),
        }
    }
}

/// Coefficients of the consumption problem; the control is the rate `c`.
#[derive(Debug, Clone)]
pub struct ConsumptionCoefficients {
    pub mu: Curve,
    pub sigma: Curve,
    pub gamma: Curve,
    pub alpha: Curve,
}

impl Coefficients for ConsumptionCoefficients {
    fn drift(&self, p: &Point<'_>) -> f64 {
        p.x * (self.mu.eval(p.t) - p.u)
    }
    fn diffusion(&self, p: &Point<'_>) -> f64 {
        p.x * self.sigma.eval(p.t)
    }
    fn jump(&self, p: &Point<'_>, _atom: usize, mark: f64) -> f64 {
        p.x * self.gamma.eval(p.t) * mark
    }
    fn driver(&self, p: &Point<'_>) -> f64 {
        self.alpha.eval(p.t) * p.a + (p.u * p.x).ln()
    }
    fn initial_reward(&self, y: f64) -> f64 {
        y
    }
    fn initial_reward_deriv(&self, _y: f64) -> f64 {
        1.0
    }
    fn partial(&self, c: Coefficient, v: Variable, p: &Point<'_>) -> Option<f64> {
        let d = match (c, v) {
            (Coefficient::Drift, Variable::X) => self.mu.eval(p.t) - p.u,
            (Coefficient::Drift, Variable::U) => -p.x,
            (Coefficient::Diffusion, Variable::X) => self.sigma.eval(p.t),
            // Marks live in the measure; fall back to finite differences.
            (Coefficient::Jump(_), Variable::X) => return None,
            (Coefficient::Driver, Variable::A) => self.alpha.eval(p.t),
            (Coefficient::Driver, Variable::X) => 1.0 / p.x,
            (Coefficient::Driver, Variable::U) => 1.0 / p.u,
            _ => 0.0,
        };
        Some(d)
    }
    fn admissible(&self, x: f64, u: f64) -> bool {
        x > 0.0 && u > 0.0
    }
}

/// `lambda`, `R` and the optimal rate on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumptionResult {
    /// Length `N + 1`.
    pub lambda: Vec<f64>,
    /// `R_n = sum_{k >= n} lambda_k dt`, length `N + 1` with `R_N = 0`.
    pub remaining: Vec<f64>,
    /// `c*_n` for `n < N`.
    pub rate: Vec<f64>,
    /// Steps where the cap was applied.
    pub capped: Vec<usize>,
}

impl RecursiveUtilityScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "x0 = {} must be positive",
                self.x0
            )));
        }
        if !(self.c_max > 0.0) {
            return Err(Error::InvalidParameter("c_max must be positive".into()));
        }
        for (name, c) in [
            ("mu", &self.mu),
            ("sigma", &self.sigma),
            ("gamma", &self.gamma),
            ("alpha", &self.alpha),
        ] {
            c.validate(name)?;
        }
        if self.alpha.min_on(self.horizon) < 0.0 {
            return Err(Error::InvalidParameter("alpha must be nonnegative".into()));
        }
        self.grid()?;
        JumpAtomMeasure::new(self.atoms.clone())?;
        Ok(())
    }

    /// Regression on `(X, 1/X, B, jump counts)` by default. The adjoint
    /// satisfies `p X = R` with `R` deterministic, so `p` is linear in `1/X`.
    pub fn estimator(&self) -> Estimator {
        self.solver.estimator(
            &[
                Regressor::State,
                Regressor::InverseState,
                Regressor::BrownianLevel,
            ],
            self.atoms.len(),
        )
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_delay(self.horizon, self.steps, self.delay)
    }

    pub fn coefficients(&self) -> ConsumptionCoefficients {
        ConsumptionCoefficients {
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            gamma: self.gamma.clone(),
            alpha: self.alpha.clone(),
        }
    }

    pub fn spec(&self) -> Result<FbsdeSpec> {
        Ok(FbsdeSpec::new(
            self.coefficients(),
            self.x0,
            JumpAtomMeasure::new(self.atoms.clone())?,
            TerminalDatum::Constant(0.0),
        ))
    }

    pub fn noise(&self) -> Result<NoiseBundle> {
        Ok(NoiseBundle::simulate(
            self.grid()?,
            JumpAtomMeasure::new(self.atoms.clone())?,
            self.solver.paths,
            self.solver.seed,
        ))
    }

    /// Euler scheme for the delay equation, with the delayed term read at
    /// `n + 1 - d` (the exact adjoint of the backward scheme).
    pub fn solve_lambda(&self) -> Result<Vec<f64>> {
        let grid = self.grid()?;
        Ok(solve_lambda_on(&grid, &self.alpha))
    }

    pub fn optimal_consumption(&self, lambda: &[f64]) -> Result<ConsumptionResult> {
        let grid = self.grid()?;
        Ok(optimal_consumption(&grid, lambda, self.c_max))
    }

    /// Solves the utility under `policy`, rejecting inadmissible controls.
    pub fn solve(&self, policy: &ControlPolicy, noise: &NoiseBundle) -> Result<PredictiveSolution> {
        let spec = self.spec()?;
        solve_policy(&spec, policy, noise, &self.estimator())
    }

    /// `Y^c(0)` with the standard error of the realized utilities.
    pub fn recursive_utility(
        &self,
        policy: &ControlPolicy,
        noise: &NoiseBundle,
    ) -> Result<Estimate> {
        Ok(utility_estimate(&self.solve(policy, noise)?))
    }

    pub fn adjoints(
        &self,
        sol: &PredictiveSolution,
        noise: &NoiseBundle,
    ) -> Result<AdjointSolution> {
        let spec = self.spec()?;
        let estimator = self.estimator();
        let projections = step_projections(&estimator, &sol.x, noise)?;
        solve_adjoints_with(&spec, sol, noise, &projections, AdjointOptions::default())
    }

    /// Identities of the optimal rate: (a) `E[c X p] = lambda`, (b)
    /// `E[p X] = R`, (c) `X / x0` equals the stochastic exponential of the
    /// cash-flow dynamics. Statistics are the largest relative deviations;
    /// (a) and (b) use `tolerance`, (c) uses `wealth_tolerance`.
    pub fn verify_foc(
        &self,
        sol: &PredictiveSolution,
        adj: &AdjointSolution,
        noise: &NoiseBundle,
        tolerance: f64,
        wealth_tolerance: f64,
    ) -> Result<Vec<CheckReport>> {
        let grid = self.grid()?;
        let n_steps = grid.num_steps();
        let lambda = self.solve_lambda()?;
        let remaining = remaining_weight(&grid, &lambda);
        let mut dev_a: f64 = 0.0;
        let mut dev_b: f64 = 0.0;
        for n in 0..n_steps {
            let px = (&adj.p.column(n) * &sol.x.column(n)).mean().unwrap_or(0.0);
            let cpx = (&adj.p.column(n) * &sol.x.column(n) * &sol.u.column(n))
                .mean()
                .unwrap_or(0.0);
            dev_a = dev_a.max((cpx - lambda[n]).abs() / lambda[n]);
            dev_b = dev_b.max((px - remaining[n]).abs() / remaining[n]);
        }
        let gamma = self.exponential(sol, noise)?;
        let mut dev_c: f64 = 0.0;
        for n in 0..n_steps {
            let rel = sol
                .x
                .column(n)
                .iter()
                .zip(gamma.column(n))
                .map(|(x, g)| (x / self.x0 - g).abs() / g)
                .sum::<f64>()
                / sol.num_paths() as f64;
            dev_c = dev_c.max(rel);
        }
        Ok(vec![
            CheckReport::upper_bound("consumption first-order condition", dev_a, tolerance),
            CheckReport::upper_bound("remaining weight identity", dev_b, tolerance),
            CheckReport::upper_bound("wealth exponential", dev_c, wealth_tolerance),
        ])
    }

    /// Stochastic exponential of the cash flow along each path under the
    /// realized rate, `M x (N+1)`. The deterministic drift is compounded per
    /// step as in the Euler scheme; the Brownian and jump parts are exact.
    pub fn exponential(
        &self,
        sol: &PredictiveSolution,
        noise: &NoiseBundle,
    ) -> Result<ndarray::Array2<f64>> {
        let grid = self.grid()?;
        let dt = grid.dt();
        let atoms = self.atoms.clone();
        let paths = sol.num_paths();
        let mut out = ndarray::Array2::<f64>::ones((paths, grid.num_steps() + 1));
        for m in 0..paths {
            let mut log = 0.0;
            for n in 0..grid.num_steps() {
                let t = grid.time(n);
                let s = self.sigma.eval(t);
                let g = self.gamma.eval(t);
                log += (1.0 + (self.mu.eval(t) - sol.u[[m, n]]) * dt).ln() - 0.5 * s * s * dt
                    + s * noise.db(m, n);
                for (j, a) in atoms.iter().enumerate() {
                    let count = noise.jump_counts()[[m, n, j]] as f64;
                    log += count * (1.0 + g * a.mark).ln() - g * a.mark * a.intensity * dt;
                }
                out[[m, n + 1]] = log.exp();
            }
        }
        Ok(out)
    }
}

pub fn solve_lambda_on(grid: &TimeGrid, alpha: &Curve) -> Vec<f64> {
    let n_steps = grid.num_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let mut lambda = vec![1.0; n_steps + 1];
    for n in 0..n_steps {
        let delayed = if d == 0 {
            Some(n)
        } else {
            (n + 1).checked_sub(d)
        };
        let drift = delayed.map_or(0.0, |k| alpha.eval(grid.time(k)) * lambda[k]);
        lambda[n + 1] = lambda[n] + drift * dt;
    }
    lambda
}

/// Left-endpoint sums `R_n = sum_{k=n}^{N-1} lambda_k dt`.
pub fn remaining_weight(grid: &TimeGrid, lambda: &[f64]) -> Vec<f64> {
    let n_steps = grid.num_steps();
    let mut r = vec![0.0; n_steps + 1];
    for n in (0..n_steps).rev() {
        r[n] = r[n + 1] + lambda[n] * grid.dt();
    }
    r
}

pub fn optimal_consumption(grid: &TimeGrid, lambda: &[f64], cap: f64) -> ConsumptionResult {
    let remaining = remaining_weight(grid, lambda);
    let mut capped = Vec::new();
    let rate = (0..grid.num_steps())
        .map(|n| {
            let c = lambda[n] / remaining[n];
            if c > cap {
                capped.push(n);
                cap
            } else {
                c
            }
        })
        .collect();
    ConsumptionResult {
        lambda: lambda.to_vec(),
        remaining,
        rate,
        capped,
    }
}

/// Mean of `Y_0` with the spread of the realized pathwise utilities.
pub fn utility_estimate(sol: &PredictiveSolution) -> Estimate {
    let realized: Array1<f64> = sol.realized_y0();
    Estimate {
        value: sol.y0(),
        std_error: Estimate::from_samples(&realized).std_error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic(alpha: f64) -> RecursiveUtilityScenario {
        RecursiveUtilityScenario {
            sigma: Curve::Constant(0.0),
            alpha: Curve::Constant(alpha),
            solver: SolverSettings {
                paths: 64,
                seed: 3,
                degree: 1,
                regressors: Vec::new(),
            },
            ..Default::default()
        }
    }

    #[test]
    fn lambda_is_one_without_weight() {
        let s = deterministic(0.0);
        assert!(s.solve_lambda().unwrap().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn lambda_matches_piecewise_polynomial() {
        let s = deterministic(1.0);
        let grid = s.grid().unwrap();
        let lambda = s.solve_lambda().unwrap();
        let exact = |t: f64| {
            let (mut sum, mut fact) = (0.0, 1.0);
            for k in 0..8 {
                if k > 0 {
                    fact *= k as f64;
                }
                let lag = t - k as f64 * 0.25;
                if lag < 0.0 {
                    break;
                }
                sum += lag.powi(k) / fact;
            }
            sum
        };
        for (n, l) in lambda.iter().enumerate() {
            assert!((l - exact(grid.time(n))).abs() <= 5.0 * grid.dt());
        }
        assert!(lambda.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rate_is_inverse_remaining_time_without_weight() {
        let s = deterministic(0.0);
        let grid = s.grid().unwrap();
        let res = s.optimal_consumption(&s.solve_lambda().unwrap()).unwrap();
        for n in 0..grid.num_steps() {
            let exact = 1.0 / (grid.horizon() - grid.time(n));
            assert!((res.rate[n] - exact).abs() / exact < 1e-12);
        }
        assert!(res.capped.is_empty());
    }

    #[test]
    fn rate_is_scale_invariant() {
        let s = deterministic(0.7);
        let grid = s.grid().unwrap();
        let lambda = s.solve_lambda().unwrap();
        let scaled: Vec<f64> = lambda.iter().map(|l| 2.5 * l).collect();
        let a = optimal_consumption(&grid, &lambda, 1e3);
        let b = optimal_consumption(&grid, &scaled, 1e3);
        for (x, y) in a.rate.iter().zip(&b.rate) {
            assert!((x - y).abs() <= 1e-12 * x);
        }
    }

    #[test]
    fn constant_rate_utility_matches_integral() {
        let s = deterministic(0.0);
        let noise = s.noise().unwrap();
        let c = 0.8;
        let est = s
            .recursive_utility(&ControlPolicy::constant(c), &noise)
            .unwrap();
        // int_0^T ln(c x0) + (mu - c) s ds
        let t = s.horizon;
        let exact = t * (c * s.x0).ln() + 0.5 * (0.05 - c) * t * t;
        assert!(
            (est.value - exact).abs() < 0.02 * exact.abs().max(0.1),
            "{} vs {exact}",
            est.value
        );
    }

    #[test]
    fn nonpositive_rate_is_rejected() {
        let s = deterministic(0.0);
        let noise = s.noise().unwrap();
        let err = s.recursive_utility(&ControlPolicy::constant(0.0), &noise);
        assert!(err.is_err());
    }
}
