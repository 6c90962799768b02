//! Scenario definitions and their end-to-end execution.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::CheckSettings;
use crate::apps::insider::{InsiderScenario, TerminalPrice};
use crate::apps::recursive_utility::{utility_estimate, RecursiveUtilityScenario};
use crate::apps::{Curve, SolverSettings};
use crate::bsde::{
    cemetery_term, solve_classical_bsde, solve_fbsde, PicardOptions, PredictiveSolution,
};
use crate::control::checks::{
    check_criticality, check_sufficiency, CheckReport, CriticalityOptions, SufficiencyOptions,
};
use crate::control::oracle::{
    brute_force_oracle, evaluate_tree, table_policy, tree_noise, ControlTable,
};
use crate::control::performance::Estimate;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, Regressor};
use crate::forward::simulate_forward;
use crate::grid::TimeGrid;
use crate::model::{Coefficient, Coefficients, ControlPolicy, FbsdeSpec, Point, Variable};
use crate::noise::{JumpAtom, JumpAtomMeasure, NoiseBundle};

/// Result of executing a scenario, before it is written to disk.
#[derive(Debug, Clone, Default)]
pub struct ScenarioOutcome {
    /// Named CSV tables.
    pub tables: Vec<(String, Vec<u8>)>,
    /// Acceptance checks; any failure fails the run.
    pub checks: Vec<CheckReport>,
    /// Reported diagnostics that do not affect the exit status.
    pub informational: Vec<CheckReport>,
    pub values: BTreeMap<String, f64>,
}

impl ScenarioOutcome {
    fn table(&mut self, name: &str, bytes: Vec<u8>) {
        self.tables.push((name.into(), bytes));
    }

    fn value(&mut self, name: &str, v: f64) {
        self.values.insert(name.into(), v);
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} = {v} must be positive"
        )))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} = {v} must be finite"
        )))
    }
}

fn check_solver(solver: &SolverSettings) -> Result<()> {
    if solver.paths < 2 {
        return Err(Error::InvalidParameter(format!(
            "solver.paths = {} must be at least 2",
            solver.paths
        )));
    }
    Ok(())
}

fn check_terminal(terminal: &TerminalPrice) -> Result<()> {
    match *terminal {
        TerminalPrice::Constant(c) => finite("terminal", c),
        TerminalPrice::Brownian { level, slope } => {
            finite("terminal.level", level)?;
            finite("terminal.slope", slope)
        }
    }
}

fn terminal_level(terminal: &TerminalPrice) -> f64 {
    match *terminal {
        TerminalPrice::Constant(c) => c,
        TerminalPrice::Brownian { level, .. } => level,
    }
}

/// Linear predictive driver `g = rho y + kappa a` without forward state.
#[derive(Debug, Clone, Copy)]
pub struct LinearDriver {
    pub rho: f64,
    pub kappa: f64,
}

impl Coefficients for LinearDriver {
    fn driver(&self, p: &Point<'_>) -> f64 {
        self.rho * p.y + self.kappa * p.a
    }
    fn partial(&self, c: Coefficient, v: Variable, _p: &Point<'_>) -> Option<f64> {
        Some(match (c, v) {
            (Coefficient::Driver, Variable::Y) => self.rho,
            (Coefficient::Driver, Variable::A) => self.kappa,
            _ => 0.0,
        })
    }
}

/// Backward equation `dY = -(rho Y + kappa A) dt + Z dB + K dÑ`, `Y = L`
/// from the horizon on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticBsdeScenario {
    pub horizon: f64,
    pub steps: usize,
    pub delay: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub kappa: f64,
    pub terminal: TerminalPrice,
    #[serde(default)]
    pub atoms: Vec<JumpAtom>,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Default for SyntheticBsdeScenario {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 64,
            delay: 0.0,
            rho: 0.0,
            kappa: 0.0,
            terminal: TerminalPrice::Brownian {
                level: 0.0,
                slope: 1.0,
            },
            atoms: Vec::new(),
            solver: SolverSettings::default(),
        }
    }
}

impl SyntheticBsdeScenario {
    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        finite("rho", self.rho)?;
        finite("kappa", self.kappa)?;
        check_terminal(&self.terminal)?;
        JumpAtomMeasure::new(self.atoms.clone())?;
        check_solver(&self.solver)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_delay(self.horizon, self.steps, self.delay)
    }

    pub fn spec(&self) -> Result<FbsdeSpec> {
        Ok(FbsdeSpec::new(
            LinearDriver {
                rho: self.rho,
                kappa: self.kappa,
            },
            0.0,
            JumpAtomMeasure::new(self.atoms.clone())?,
            self.terminal.datum(),
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

    pub fn estimator(&self) -> Estimator {
        self.solver
            .estimator(&[Regressor::BrownianLevel], self.atoms.len())
    }

    pub fn solve(&self, noise: &NoiseBundle) -> Result<PredictiveSolution> {
        let spec = self.spec()?;
        Ok(solve_fbsde(
            &spec,
            &ControlPolicy::constant(0.0),
            noise,
            &self.estimator(),
            PicardOptions::default(),
        )?
        .solution)
    }

    /// `E[Y(t_n)]` of the continuous equation per unit of `E[L]`.
    pub fn mean_reference(&self) -> Result<Vec<f64>> {
        let grid = self.grid()?;
        Ok(mean_reference(&grid, self.rho, self.kappa))
    }

    pub fn execute(&self, export_paths: usize) -> Result<ScenarioOutcome> {
        let grid = self.grid()?;
        let noise = self.noise()?;
        let sol = self.solve(&noise)?;
        let mut out = ScenarioOutcome::default();
        mean_checks(
            &mut out,
            &sol,
            &grid,
            self.rho,
            self.kappa,
            terminal_level(&self.terminal),
        )?;
        if self.rho == 0.0 && self.kappa == 0.0 {
            if let TerminalPrice::Brownian { slope, .. } = self.terminal {
                if slope != 0.0 {
                    let mean_z = sol.z.mean().unwrap_or(0.0);
                    out.checks.push(CheckReport::upper_bound(
                        "martingale integrand",
                        (mean_z - slope).abs() / slope.abs(),
                        0.05,
                    ));
                    out.value("mean_z", mean_z);
                }
            }
        }
        out.value("y0", sol.y0());
        out.table(
            "summary.csv",
            summary_table(
                &sol,
                &self.mean_reference()?,
                terminal_level(&self.terminal),
            )?,
        );
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, Some(export_paths))?;
        out.table("solution.csv", buf);
        Ok(out)
    }
}

/// Predictive toy `dY = -kappa A dt + Z dB`, `Y = L` from the horizon on.
/// Its mean is `E[L] sum_k kappa^k (T - t - (k - 1) delta)_+^k / k!`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveToyScenario {
    pub horizon: f64,
    pub steps: usize,
    pub delay: f64,
    #[serde(default = "one")]
    pub kappa: f64,
    pub terminal: TerminalPrice,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn one() -> f64 {
    1.0
}

impl Default for PredictiveToyScenario {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 64,
            delay: 0.5,
            kappa: 1.0,
            terminal: TerminalPrice::Constant(1.0),
            solver: SolverSettings {
                paths: 1000,
                ..SolverSettings::default()
            },
        }
    }
}

impl PredictiveToyScenario {
    fn synthetic(&self) -> SyntheticBsdeScenario {
        SyntheticBsdeScenario {
            horizon: self.horizon,
            steps: self.steps,
            delay: self.delay,
            rho: 0.0,
            kappa: self.kappa,
            terminal: self.terminal,
            atoms: Vec::new(),
            solver: self.solver.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic().validate()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        self.synthetic().grid()
    }

    pub fn noise(&self) -> Result<NoiseBundle> {
        self.synthetic().noise()
    }

    pub fn solve(&self, noise: &NoiseBundle) -> Result<PredictiveSolution> {
        self.synthetic().solve(noise)
    }

    /// Closed-form mean per unit of `E[L]` on the grid.
    pub fn closed_form(&self) -> Result<Vec<f64>> {
        let grid = self.grid()?;
        Ok((0..=grid.num_steps())
            .map(|n| delay_series(grid.horizon() - grid.time(n), grid.delay(), self.kappa))
            .collect())
    }

    /// Largest pathwise difference from the classical solver fed with
    /// `A = E[L | F_t]`; meaningful when the delay reaches the horizon.
    pub fn classical_difference(
        &self,
        noise: &NoiseBundle,
        sol: &PredictiveSolution,
    ) -> Result<f64> {
        let s = self.synthetic();
        let spec = s.spec()?;
        let forward = simulate_forward(&spec, &ControlPolicy::constant(0.0), noise, None)?;
        let terminal = sol.cemetery.clone();
        let datum = spec.cemetery.clone();
        let cemetery = sol.cemetery.clone();
        let classical = solve_classical_bsde(
            &spec,
            &forward,
            noise,
            &s.estimator(),
            terminal,
            |_, proj| Ok(cemetery_term(&datum, &cemetery, proj)),
        )?;
        Ok((&classical.y - &sol.y)
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs())))
    }

    pub fn execute(&self, export_paths: usize) -> Result<ScenarioOutcome> {
        let grid = self.grid()?;
        let noise = self.noise()?;
        let sol = self.solve(&noise)?;
        let mut out = ScenarioOutcome::default();
        let reference = self.closed_form()?;
        mean_checks(
            &mut out,
            &sol,
            &grid,
            0.0,
            self.kappa,
            terminal_level(&self.terminal),
        )?;
        if grid.delay_steps() == grid.num_steps() {
            let diff = self.classical_difference(&noise, &sol)?;
            out.checks
                .push(CheckReport::upper_bound("classical limit", diff, 1e-12));
        }
        out.value("y0", sol.y0());
        out.table(
            "summary.csv",
            summary_table(&sol, &reference, terminal_level(&self.terminal))?,
        );
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, Some(export_paths))?;
        out.table("solution.csv", buf);
        Ok(out)
    }
}

/// `sum_{k >= 0} kappa^k (s - (k - 1) delta)_+^k / k!` for `s >= 0`, the
/// solution of `m'(s) = kappa m(s - delta)` with `m = 1` on `s <= 0`.
pub fn delay_series(s: f64, delta: f64, kappa: f64) -> f64 {
    let mut total = 1.0;
    let mut k = 1;
    loop {
        let base = s - (k as f64 - 1.0) * delta;
        if base <= 0.0 {
            break;
        }
        let mut term = 1.0;
        for i in 1..=k {
            term *= kappa * base / i as f64;
        }
        total += term;
        if delta == 0.0 && term.abs() < 1e-17 * total.abs() {
            break;
        }
        k += 1;
    }
    total
}

/// Reference mean `m(t_n)` per unit of `E[L]` for `m' = -(rho m + kappa m(t + delta))`.
/// Closed forms when one coefficient vanishes, otherwise an Euler solve on a
/// grid 256 times finer.
pub fn mean_reference(grid: &TimeGrid, rho: f64, kappa: f64) -> Vec<f64> {
    let n_steps = grid.num_steps();
    let tail = |n: usize| grid.horizon() - grid.time(n);
    if kappa == 0.0 {
        return (0..=n_steps).map(|n| (rho * tail(n)).exp()).collect();
    }
    if rho == 0.0 {
        return (0..=n_steps)
            .map(|n| delay_series(tail(n), grid.delay(), kappa))
            .collect();
    }
    const REFINE: usize = 256;
    let fine = n_steps * REFINE;
    let d = grid.delay_steps() * REFINE;
    let h = grid.dt() / REFINE as f64;
    let mut m = vec![1.0; fine + 1];
    for i in (0..fine).rev() {
        let ahead = if d == 0 {
            m[i + 1]
        } else {
            m.get(i + d).copied().unwrap_or(1.0)
        };
        m[i] = m[i + 1] + (rho * m[i + 1] + kappa * ahead) * h;
    }
    (0..=n_steps).map(|n| m[n * REFINE]).collect()
}

/// Exact mean recursion of the explicit scheme and the continuous reference.
fn mean_checks(
    out: &mut ScenarioOutcome,
    sol: &PredictiveSolution,
    grid: &TimeGrid,
    rho: f64,
    kappa: f64,
    level: f64,
) -> Result<()> {
    let n_steps = grid.num_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let means: Vec<f64> = (0..=n_steps)
        .map(|n| sol.y.column(n).mean().unwrap_or(0.0))
        .collect();
    let terminal = Estimate::from_samples(&sol.cemetery);

    // The projections keep means, so the scheme's mean obeys the same
    // recursion with the sample mean of L.
    let mut discrete = vec![terminal.value; n_steps + 1];
    for n in (0..n_steps).rev() {
        let ahead = if d == 0 {
            discrete[n + 1]
        } else {
            discrete.get(n + d).copied().unwrap_or(terminal.value)
        };
        discrete[n] = discrete[n + 1] + (rho * discrete[n + 1] + kappa * ahead) * dt;
    }
    let scale = discrete.iter().fold(1.0_f64, |acc, v| acc.max(v.abs()));
    let dev = means
        .iter()
        .zip(&discrete)
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
    out.checks.push(CheckReport::upper_bound(
        "discrete mean recursion",
        dev,
        1e-9 * scale,
    ));

    // Euler error bound dt/2 max|m''| (e^{KT} - 1)/K with |m''| <= K^2 |E L| e^{KT}.
    let k = rho.abs() + kappa.abs();
    let growth = (k * grid.horizon()).exp();
    let bound = 0.5 * k * level.abs() * growth * (growth - 1.0);
    let reference = mean_reference(grid, rho, kappa);
    let err = means
        .iter()
        .zip(&reference)
        .fold(0.0_f64, |acc, (a, r)| acc.max((a - level * r).abs()));
    let threshold = bound * dt + 3.0 * terminal.std_error * growth + 1e-12 * (1.0 + level.abs());
    let name = if k == 0.0 {
        "martingale mean"
    } else {
        "continuous mean"
    };
    out.checks.push(
        CheckReport::upper_bound(name, err, threshold).with_note(format!(
            "error / dt = {:.4}, bound constant {:.4}",
            err / dt,
            bound
        )),
    );
    out.value("mean_error", err);
    Ok(())
}

fn summary_table(sol: &PredictiveSolution, reference: &[f64], level: f64) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "mean_Y", "reference_Y", "mean_Z", "mean_A"])?;
    let n_steps = sol.grid.num_steps();
    let mean = |a: &Array2<f64>, n: usize| a.column(n).mean().unwrap_or(0.0);
    for n in 0..=n_steps {
        let mut row = vec![
            sol.grid.time(n).to_string(),
            mean(&sol.y, n).to_string(),
            (level * reference[n]).to_string(),
        ];
        if n < n_steps {
            row.push(mean(&sol.z, n).to_string());
        } else {
            row.push(String::new());
        }
        row.push(mean(&sol.a, n).to_string());
        w.write_record(&row)?;
    }
    into_bytes(w)
}

fn into_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Runs the insider pipeline and its diagnostics.
pub fn execute_insider(s: &InsiderScenario, checks: &CheckSettings) -> Result<ScenarioOutcome> {
    let noise = s.noise()?;
    let result = s.run(&noise)?;
    let mut out = ScenarioOutcome::default();
    let flagged = &result.theta.flagged;
    let nonfinite = result
        .theta
        .theta
        .iter()
        .zip(flagged.iter())
        .filter(|(t, f)| !**f && !t.is_finite())
        .count();
    out.checks.push(
        CheckReport::upper_bound("finite market price of risk", nonfinite as f64, 0.0).with_note(
            format!("flagged fraction {:.4}", result.theta.flagged_fraction()),
        ),
    );
    out.checks
        .extend(s.diagnostics(&result, &noise, checks.comparisons)?);
    out.value("budget_constant", result.budget.c);
    out.value("flagged_fraction", result.theta.flagged_fraction());
    out.value("price_y0", result.price.y0());
    out.value(
        "expected_utility",
        s.expected_utility(&result.wealth.y).value,
    );
    let mut buf = Vec::new();
    result.write_table(&mut buf)?;
    out.table("insider.csv", buf);
    Ok(out)
}

/// Runs the consumption pipeline: closed-form rate, utility, adjoints and
/// the maximum-principle checks.
pub fn execute_recursive_utility(
    s: &RecursiveUtilityScenario,
    checks: &CheckSettings,
) -> Result<ScenarioOutcome> {
    let grid = s.grid()?;
    let n_steps = grid.num_steps();
    let dt = grid.dt();
    let noise = s.noise()?;
    let spec = s.spec()?;
    let estimator = s.estimator();
    let mut out = ScenarioOutcome::default();

    let lambda = s.solve_lambda()?;
    let rate = s.optimal_consumption(&lambda)?;
    if s.alpha == Curve::Constant(0.0) {
        // c* = 1 / (T - t) below the cap.
        let mut worst: f64 = 0.0;
        for (n, c) in rate.rate.iter().enumerate() {
            if rate.capped.contains(&n) {
                continue;
            }
            let tail = grid.horizon() - grid.time(n);
            worst = worst.max((c - 1.0 / tail).abs() * tail);
        }
        out.checks.push(
            CheckReport::upper_bound("consumption closed form", worst, dt)
                .with_note("largest |c* - 1/(T-t)| (T-t)"),
        );
    }

    let optimal = ControlPolicy::schedule(rate.rate.clone());
    let sol = s.solve(&optimal, &noise)?;
    let adj = s.adjoints(&sol, &noise)?;
    out.checks
        .extend(s.verify_foc(&sol, &adj, &noise, checks.foc, checks.wealth)?);

    let criticality = check_criticality(
        &spec,
        &sol,
        &adj,
        &noise,
        &estimator,
        CriticalityOptions {
            exclude_last_step: true,
            min_pass_fraction: checks.criticality_fraction,
            ..Default::default()
        },
    )?;
    out.checks.push(criticality.summary.clone());

    // Dominance over perturbed rates on common noise. The last rate is kept:
    // the wealth adjoint vanishes there and the discrete utility increases in
    // c without bound.
    let base = sol.realized_y0();
    let last = rate.rate.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(s.solver.seed ^ 0xd0_0d);
    let mut worst = f64::INFINITY;
    for _ in 0..checks.comparisons {
        let perturbed: Vec<f64> = rate
            .rate
            .iter()
            .enumerate()
            .map(|(n, c)| {
                let eta: f64 = StandardNormal.sample(&mut rng);
                if n == last {
                    *c
                } else {
                    c * (1.0 + checks.perturbation * eta).max(1e-3)
                }
            })
            .collect();
        let other = s.solve(&ControlPolicy::schedule(perturbed), &noise)?;
        let gap = Estimate::from_samples(&(&base - &other.realized_y0()));
        let score = (sol.y0() - other.y0()) / (3.0 * gap.std_error).max(1e-12);
        worst = worst.min(score);
    }
    if checks.comparisons > 0 {
        out.checks.push(
            CheckReport::new("dominance over perturbed rates", worst, -1.0, worst >= -1.0)
                .with_note("smallest utility gap in units of 3 standard errors"),
        );
    }

    let sufficiency = check_sufficiency(
        &spec,
        &sol,
        &adj,
        &noise,
        &estimator,
        &SufficiencyOptions {
            sample_count: checks.sufficiency_samples,
            seed: s.solver.seed,
            control_grid: rate_grid(&rate.rate),
            exclude_last_step: true,
            ..Default::default()
        },
    )?;
    out.informational
        .extend(sufficiency.checks().into_iter().cloned());

    let utility = utility_estimate(&sol);
    out.value("utility", utility.value);
    out.value("utility_std_error", utility.std_error);
    out.value("adjoint_sweeps", adj.sweeps as f64);

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "lambda", "R", "c_star", "mean_X", "mean_Y", "capped"])?;
    let mean = |a: &Array2<f64>, n: usize| a.column(n).mean().unwrap_or(0.0);
    for n in 0..=n_steps {
        let (c, capped) = if n < n_steps {
            (
                rate.rate[n].to_string(),
                u8::from(rate.capped.contains(&n)).to_string(),
            )
        } else {
            (String::new(), String::new())
        };
        w.write_record([
            grid.time(n).to_string(),
            lambda[n].to_string(),
            rate.remaining[n].to_string(),
            c,
            mean(&sol.x, n).to_string(),
            mean(&sol.y, n).to_string(),
            capped,
        ])?;
    }
    out.table("consumption.csv", into_bytes(w)?);
    Ok(out)
}

/// Control grid for the conditional maximization check: multiples of the
/// median optimal rate.
fn rate_grid(rate: &[f64]) -> Vec<f64> {
    let mut sorted = rate.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    (1..=16).map(|i| median * i as f64 / 8.0).collect()
}

/// Evenly spaced control grid `lo, ..., hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl ControlGrid {
    pub fn points(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.lo];
        }
        (0..self.count)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64)
            .collect()
    }

    pub fn cell(&self) -> f64 {
        if self.count > 1 {
            (self.hi - self.lo) / (self.count - 1) as f64
        } else {
            0.0
        }
    }
}

/// Consumption problem on a binary tree, solved exactly by search over a
/// finite control grid and compared with the maximum-principle candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleMiniScenario {
    pub horizon: f64,
    pub steps: usize,
    pub delay: f64,
    pub x0: f64,
    #[serde(default)]
    pub mu: Curve,
    #[serde(default)]
    pub sigma: Curve,
    #[serde(default)]
    pub alpha: Curve,
    pub controls: ControlGrid,
}

impl Default for OracleMiniScenario {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 3,
            delay: 1.0 / 3.0,
            x0: 1.0,
            mu: Curve::Constant(0.05),
            sigma: Curve::Constant(0.2),
            alpha: Curve::Constant(0.0),
            controls: ControlGrid {
                lo: 0.5,
                hi: 4.0,
                count: 9,
            },
        }
    }
}

impl OracleMiniScenario {
    pub fn consumption(&self) -> RecursiveUtilityScenario {
        RecursiveUtilityScenario {
            horizon: self.horizon,
            steps: self.steps,
            delay: self.delay,
            x0: self.x0,
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            alpha: self.alpha.clone(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.consumption().validate()?;
        positive("controls.lo", self.controls.lo)?;
        if !(self.controls.hi >= self.controls.lo) || self.controls.count == 0 {
            return Err(Error::InvalidParameter(
                "controls need lo <= hi and count >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Maximum-principle candidate on the tree: `c*_n` before the last step
    /// and the largest grid control at the last step, where the wealth
    /// adjoint vanishes and `H` increases in the rate.
    pub fn candidate(&self) -> Result<ControlTable> {
        let s = self.consumption();
        let rate = s.optimal_consumption(&s.solve_lambda()?)?.rate;
        let top = self
            .controls
            .points()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((0..self.steps)
            .map(|n| vec![if n + 1 < self.steps { rate[n] } else { top }; 1 << n])
            .collect())
    }

    pub fn execute(&self, checks: &CheckSettings) -> Result<ScenarioOutcome> {
        let s = self.consumption();
        let grid = s.grid()?;
        let spec = s.spec()?;
        let controls = self.controls.points();
        let oracle = brute_force_oracle(&spec, &grid, &controls)?;
        let candidate = self.candidate()?;
        let tree = evaluate_tree(&spec, &grid, &candidate)?;
        let mut out = ScenarioOutcome::default();

        // The general solver with exact tree averages reproduces the tree.
        let noise = tree_noise(grid)?;
        let sol = solve_fbsde(
            &spec,
            &table_policy(&candidate, self.steps),
            &noise,
            &Estimator::Tree,
            PicardOptions::default(),
        )?
        .solution;
        let y = crate::control::oracle::TreeEvaluation::path_values(&tree.y, self.steps);
        let diff = (&sol.y - &y)
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        out.checks.push(CheckReport::upper_bound(
            "tree solver agreement",
            diff,
            checks.tree,
        ));

        let mut dist: f64 = 0.0;
        for n in 0..self.steps.saturating_sub(1) {
            for (o, c) in oracle.table[n].iter().zip(&candidate[n]) {
                dist = dist.max((o - c).abs());
            }
        }
        out.checks.push(
            CheckReport::upper_bound(
                "candidate within one cell",
                dist,
                self.controls.cell() + 1e-12,
            )
            .with_note(
                "largest distance between oracle and candidate controls before the last step",
            ),
        );
        out.informational.push(
            CheckReport::new(
                "candidate value gap",
                tree.value - oracle.value,
                0.0,
                tree.value >= oracle.value,
            )
            .with_note("candidate value minus grid optimum; the candidate may leave the grid"),
        );
        out.value("oracle_value", oracle.value);
        out.value("candidate_value", tree.value);
        out.value("evaluations", oracle.evaluations as f64);

        let oracle_tree = evaluate_tree(&spec, &grid, &oracle.table)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "step",
            "node",
            "t",
            "x_oracle",
            "u_oracle",
            "x_candidate",
            "u_candidate",
            "y_candidate",
        ])?;
        for n in 0..self.steps {
            for i in 0..1usize << n {
                w.write_record([
                    n.to_string(),
                    i.to_string(),
                    grid.time(n).to_string(),
                    oracle_tree.x[n][i].to_string(),
                    oracle.table[n][i].to_string(),
                    tree.x[n][i].to_string(),
                    candidate[n][i].to_string(),
                    tree.y[n][i].to_string(),
                ])?;
            }
        }
        out.table("oracle.csv", into_bytes(w)?);
        Ok(out)
    }
}
