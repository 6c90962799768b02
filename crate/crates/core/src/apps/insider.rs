//! Optimal portfolio in a market whose risky price is moved by an insider.
//!
//! The price solves `dY = -A mu dt + Z dB`, `Y = L` on `[T, T + delta]`,
//! with `A(t) = E[Y(t + delta) | F_t]`. A trader holding `u` units has
//! wealth `dX = u (A mu dt + Z dB)`. With market price of risk
//! `theta = A mu / Z` and density `Gamma(T) = exp(-int theta dB - 1/2 int theta^2 dt)`
//! of the risk-neutral measure, the optimal terminal wealth is
//! `X*(T) = (U')^{-1}(c Gamma(T))` with `c` fixed by the budget
//! `E[Gamma(T) X*(T)] = x0`, and `u* = Z0 / Z` where `(X*, Z0)` solves
//! `dX* = theta Z0 dt + Z0 dB`.

use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Curve, SolverSettings};
use crate::bsde::{solve_predictive_bsde, step_projections, BackwardProblem, PredictiveSolution};
use crate::control::checks::CheckReport;
use crate::control::performance::Estimate;
use crate::error::{Error, Result};
use crate::estimator::{Estimator, RegressionBasis, Regressor};
use crate::forward::{simulate_forward, ForwardPaths};
use crate::grid::TimeGrid;
use crate::model::{
    Coefficient, Coefficients, ControlPolicy, FbsdeSpec, Point, TerminalDatum, Variable,
};
use crate::noise::{JumpAtomMeasure, NoiseBundle};

/// Largest number of bracket expansions in the budget bisection.
pub const MAX_EXPANSIONS: usize = 60;
const MAX_BISECTIONS: usize = 200;

/// Utility of terminal wealth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", try_from = "UtilityKeys")]
pub enum Utility {
    /// `ln x`.
    Log,
    /// `x^{1 - rho} / (1 - rho)`.
    Crra { rho: f64 },
}

/// Strict on-disk form of [`Utility`]; a unit variant alone would accept
/// stray keys.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UtilityKeys {
    kind: String,
    rho: Option<f64>,
}

impl TryFrom<UtilityKeys> for Utility {
    type Error = String;

    fn try_from(keys: UtilityKeys) -> std::result::Result<Self, String> {
        match (keys.kind.as_str(), keys.rho) {
            ("log", None) => Ok(Utility::Log),
            ("log", Some(_)) => Err("log utility takes no `rho`".into()),
            ("crra", Some(rho)) => Ok(Utility::Crra { rho }),
            ("crra", None) => Err("crra utility needs `rho`".into()),
            (other, _) => Err(format!(
                "unknown utility kind `{other}` (expected log or crra)"
            )),
        }
    }
}

impl Utility {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Utility::Log => Ok(()),
            Utility::Crra { rho } if rho > 0.0 && rho != 1.0 && rho.is_finite() => Ok(()),
            Utility::Crra { rho } => Err(Error::InvalidParameter(format!(
                "CRRA exponent {rho} must be positive and different from 1"
            ))),
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        match *self {
            Utility::Log => x.ln(),
            Utility::Crra { rho } => x.powf(1.0 - rho) / (1.0 - rho),
        }
    }

    pub fn marginal(&self, x: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / x,
            Utility::Crra { rho } => x.powf(-rho),
        }
    }

    /// `(U')^{-1}(y)` for `y > 0`.
    pub fn inverse_marginal(&self, y: f64) -> f64 {
        match *self {
            Utility::Log => 1.0 / y,
            Utility::Crra { rho } => y.powf(-1.0 / rho),
        }
    }
}

/// Terminal price `L = level + slope B(T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum TerminalPrice {
    Constant(f64),
    Brownian { level: f64, slope: f64 },
}

impl TerminalPrice {
    pub fn datum(&self) -> TerminalDatum {
        match *self {
            TerminalPrice::Constant(c) => TerminalDatum::Constant(c),
            TerminalPrice::Brownian { level, slope } => {
                TerminalDatum::functional(move |b, _| level + slope * b)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsiderScenario {
    pub horizon: f64,
    pub steps: usize,
    pub delay: f64,
    pub mu: Curve,
    pub terminal: TerminalPrice,
    pub utility: Utility,
    pub x0: f64,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl Default for InsiderScenario {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 64,
            delay: 0.25,
            mu: Curve::Constant(0.1),
            terminal: TerminalPrice::Brownian {
                level: 1.0,
                slope: 1.0,
            },
            utility: Utility::Log,
            x0: 1.0,
            solver: SolverSettings::default(),
        }
    }
}

/// Price dynamics: `g = a mu(t)`, no forward state.
#[derive(Debug, Clone)]
pub struct PriceCoefficients {
    pub mu: Curve,
}

impl Coefficients for PriceCoefficients {
    fn driver(&self, p: &Point<'_>) -> f64 {
        p.a * self.mu.eval(p.t)
    }
    fn partial(&self, c: Coefficient, v: Variable, p: &Point<'_>) -> Option<f64> {
        Some(match (c, v) {
            (Coefficient::Driver, Variable::A) => self.mu.eval(p.t),
            _ => 0.0,
        })
    }
}

/// Wealth of a trader holding `u` units: `b = u a mu`, `sigma = u z`,
/// terminal reward `U(x)`.
#[derive(Debug, Clone)]
pub struct WealthCoefficients {
    pub mu: Curve,
    pub utility: Utility,
}

impl Coefficients for WealthCoefficients {
    fn drift(&self, p: &Point<'_>) -> f64 {
        p.u * p.a * self.mu.eval(p.t)
    }
    fn diffusion(&self, p: &Point<'_>) -> f64 {
        p.u * p.z
    }
    fn driver(&self, p: &Point<'_>) -> f64 {
        p.a * self.mu.eval(p.t)
    }
    fn terminal_reward(&self, x: f64) -> f64 {
        self.utility.value(x)
    }
    fn terminal_reward_deriv(&self, x: f64) -> f64 {
        self.utility.marginal(x)
    }
    fn forward_uses_backward(&self) -> bool {
        true
    }
    fn partial(&self, c: Coefficient, v: Variable, p: &Point<'_>) -> Option<f64> {
        let mu = self.mu.eval(p.t);
        Some(match (c, v) {
            (Coefficient::Drift, Variable::U) => p.a * mu,
            (Coefficient::Drift, Variable::A) => p.u * mu,
            (Coefficient::Diffusion, Variable::U) => p.z,
            (Coefficient::Diffusion, Variable::Z) => p.u,
            (Coefficient::Driver, Variable::A) => mu,
            _ => 0.0,
        })
    }
}

/// Market price of risk with the entries where `|Z|` fell below the floor.
#[derive(Debug, Clone)]
pub struct MarketPriceOfRisk {
    /// `M x N`; zero at flagged entries.
    pub theta: Array2<f64>,
    pub flagged: Array2<bool>,
    pub z_floor: f64,
}

impl MarketPriceOfRisk {
    pub fn flagged_fraction(&self) -> f64 {
        let n = self.flagged.len().max(1);
        self.flagged.iter().filter(|&&f| f).count() as f64 / n as f64
    }
}

#[derive(Debug, Clone)]
pub struct GirsanovWeights {
    /// `Gamma(T)` per path.
    pub gamma: Array1<f64>,
    /// Paths whose weight overflowed; their weight is set to zero.
    pub overflow: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub c: f64,
    /// `E[Gamma (U')^{-1}(c Gamma)] - x0`.
    pub residual: f64,
    /// Standard error of the budget estimate.
    pub std_error: f64,
    pub expansions: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct InsiderResult {
    pub price: PredictiveSolution,
    pub theta: MarketPriceOfRisk,
    pub weights: GirsanovWeights,
    pub budget: BudgetSolution,
    /// Optimal wealth `X*` in `y` and `Z0` in `z`.
    pub wealth: PredictiveSolution,
    /// `u* = Z0 / Z`, zero where `Z` is below the floor.
    pub portfolio: Array2<f64>,
    pub portfolio_flagged: Array2<bool>,
}

/// `z_floor = 1e-6 * std(Y_{n+1} - Y_n)` over all paths and steps.
pub fn z_floor(price: &PredictiveSolution) -> f64 {
    let n = price.grid.num_steps();
    let inc = &price.y.slice(ndarray::s![.., 1..=n]) - &price.y.slice(ndarray::s![.., 0..n]);
    let inc = Array1::from_iter(inc.iter().copied());
    1e-6 * if inc.len() > 1 { inc.std(1.0) } else { 0.0 }
}

/// `theta = A mu / Z` elementwise; entries with `|Z| <= floor` are set to
/// zero and flagged.
pub fn market_price_of_risk(price: &PredictiveSolution, mu: &Curve) -> MarketPriceOfRisk {
    let floor = z_floor(price);
    let (paths, steps) = price.z.dim();
    let mut flagged = Array2::from_elem((paths, steps), false);
    let theta = Array2::from_shape_fn((paths, steps), |(m, n)| {
        let num = price.a[[m, n]] * mu.eval(price.grid.time(n));
        let z = price.z[[m, n]];
        if num == 0.0 {
            0.0
        } else if z.abs() <= floor {
            flagged[[m, n]] = true;
            0.0
        } else {
            num / z
        }
    });
    MarketPriceOfRisk {
        theta,
        flagged,
        z_floor: floor,
    }
}

/// `Gamma(T) = exp(-sum theta dB - 1/2 sum theta^2 dt)` per path.
pub fn girsanov_weight(theta: &Array2<f64>, noise: &NoiseBundle) -> GirsanovWeights {
    let dt = noise.grid().dt();
    let mut overflow = Vec::new();
    let gamma = Array1::from_iter(theta.axis_iter(Axis(0)).enumerate().map(|(m, row)| {
        let log: f64 = row
            .iter()
            .enumerate()
            .map(|(n, th)| -th * noise.db(m, n) - 0.5 * th * th * dt)
            .sum();
        let g = log.exp();
        if g.is_finite() {
            g
        } else {
            overflow.push(m);
            0.0
        }
    }));
    GirsanovWeights { gamma, overflow }
}

fn budget_samples(utility: &Utility, gamma: &Array1<f64>, c: f64) -> Array1<f64> {
    gamma.mapv(|g| {
        if g > 0.0 {
            g * utility.inverse_marginal(c * g)
        } else {
            0.0
        }
    })
}

/// Root of `c -> E[Gamma (U')^{-1}(c Gamma)] - x0` by bisection on a
/// geometric bracket. The map is decreasing in `c`.
pub fn budget_constant(utility: &Utility, gamma: &Array1<f64>, x0: f64) -> Result<BudgetSolution> {
    let residual = |c: f64| budget_samples(utility, gamma, c).mean().unwrap_or(0.0) - x0;
    let (mut lo, mut hi) = (1.0 / x0, 1.0 / x0);
    let mut expansions = 0;
    while residual(lo) < 0.0 {
        if expansions == MAX_EXPANSIONS {
            return Err(Error::BracketNotFound {
                expansions,
                lo_residual: residual(lo),
                hi_residual: residual(hi),
            });
        }
        lo *= 0.5;
        expansions += 1;
    }
    while residual(hi) > 0.0 {
        if expansions == MAX_EXPANSIONS {
            return Err(Error::BracketNotFound {
                expansions,
                lo_residual: residual(lo),
                hi_residual: residual(hi),
            });
        }
        hi *= 2.0;
        expansions += 1;
    }
    let tol = 1e-8 * x0;
    let mut c = lo;
    let mut iterations = 0;
    for _ in 0..MAX_BISECTIONS {
        iterations += 1;
        c = (lo * hi).sqrt();
        let r = residual(c);
        if r.abs() <= tol || hi / lo - 1.0 < 1e-15 {
            break;
        }
        if r > 0.0 {
            lo = c;
        } else {
            hi = c;
        }
    }
    let samples = budget_samples(utility, gamma, c);
    Ok(BudgetSolution {
        c,
        residual: samples.mean().unwrap_or(0.0) - x0,
        std_error: Estimate::from_samples(&samples).std_error,
        expansions,
        iterations,
    })
}

/// Closed-form budget constant where one exists: `c = E[Gamma^{1 - 1/rho}]^rho / x0^rho`
/// (`c = 1 / x0` for log utility).
pub fn budget_closed_form(utility: &Utility, gamma: &Array1<f64>, x0: f64) -> f64 {
    match *utility {
        Utility::Log => 1.0 / x0,
        Utility::Crra { rho } => {
            let m = gamma
                .mapv(|g| g.powf(1.0 - 1.0 / rho))
                .mean()
                .unwrap_or(0.0);
            (m / x0).powf(rho)
        }
    }
}

impl InsiderScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.x0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "x0 = {} must be positive",
                self.x0
            )));
        }
        self.mu.validate("mu")?;
        self.utility.validate()?;
        for x in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let (d0, d1) = (self.utility.marginal(x), self.utility.marginal(1.5 * x));
            if !(d0 > 0.0 && d1 < d0) {
                return Err(Error::InvalidParameter(
                    "utility must be increasing and concave".into(),
                ));
            }
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_delay(self.horizon, self.steps, self.delay)
    }

    pub fn noise(&self) -> Result<NoiseBundle> {
        Ok(NoiseBundle::simulate(
            self.grid()?,
            JumpAtomMeasure::empty(),
            self.solver.paths,
            self.solver.seed,
        ))
    }

    pub fn estimator(&self) -> Estimator {
        self.solver.estimator(&[Regressor::BrownianLevel], 0)
    }

    /// For log utility the optimal wealth is `1 / (c Gamma_n)`, so its
    /// regression uses the running weight `Gamma_n` as state.
    pub fn wealth_estimator(&self) -> Estimator {
        // Higher powers of 1/Gamma have heavy tails and destabilize the fit.
        let basis = RegressionBasis::new(
            self.solver.degree.min(2),
            vec![Regressor::BrownianLevel, Regressor::InverseState],
        );
        if self.solver.regressors.is_empty() {
            Estimator::Regression(basis)
        } else {
            self.solver.estimator(&[], 0)
        }
    }

    /// Running Girsanov weight `Gamma_n` as forward paths.
    pub fn girsanov_forward(&self, theta: &MarketPriceOfRisk, noise: &NoiseBundle) -> ForwardPaths {
        let dt = noise.grid().dt();
        let mut forward = self.idle_forward(noise);
        for (m, mut row) in forward.x.axis_iter_mut(Axis(0)).enumerate() {
            let mut log = 0.0;
            row[0] = 1.0;
            for n in 0..theta.theta.ncols() {
                let th = theta.theta[[m, n]];
                log += -th * noise.db(m, n) - 0.5 * th * th * dt;
                row[n + 1] = log.exp();
            }
        }
        forward
    }

    pub fn price_spec(&self) -> FbsdeSpec {
        FbsdeSpec::new(
            PriceCoefficients {
                mu: self.mu.clone(),
            },
            0.0,
            JumpAtomMeasure::empty(),
            self.terminal.datum(),
        )
    }

    pub fn wealth_spec(&self) -> FbsdeSpec {
        FbsdeSpec::new(
            WealthCoefficients {
                mu: self.mu.clone(),
                utility: self.utility,
            },
            self.x0,
            JumpAtomMeasure::empty(),
            self.terminal.datum(),
        )
    }

    fn idle_forward(&self, noise: &NoiseBundle) -> ForwardPaths {
        let (m, n) = (noise.num_paths(), noise.grid().num_steps());
        ForwardPaths {
            x: Array2::zeros((m, n + 1)),
            u: Array2::zeros((m, n)),
        }
    }

    pub fn solve_price(&self, noise: &NoiseBundle) -> Result<PredictiveSolution> {
        let forward = self.idle_forward(noise);
        solve_predictive_bsde(&self.price_spec(), &forward, noise, &self.estimator())
    }

    /// Full pipeline: price, `theta`, `Gamma`, budget constant, optimal
    /// wealth and portfolio.
    pub fn run(&self, noise: &NoiseBundle) -> Result<InsiderResult> {
        self.validate()?;
        let price = self.solve_price(noise)?;
        let theta = market_price_of_risk(&price, &self.mu);
        let weights = girsanov_weight(&theta.theta, noise);
        let budget = match self.utility {
            Utility::Log => {
                let c = budget_closed_form(&self.utility, &weights.gamma, self.x0);
                let samples = budget_samples(&self.utility, &weights.gamma, c);
                BudgetSolution {
                    c,
                    residual: samples.mean().unwrap_or(0.0) - self.x0,
                    std_error: Estimate::from_samples(&samples).std_error,
                    expansions: 0,
                    iterations: 0,
                }
            }
            Utility::Crra { .. } => budget_constant(&self.utility, &weights.gamma, self.x0)?,
        };
        let wealth = self.optimal_wealth(&theta, &weights, budget.c, noise)?;
        let (paths, steps) = price.z.dim();
        let mut portfolio_flagged = Array2::from_elem((paths, steps), false);
        let portfolio = Array2::from_shape_fn((paths, steps), |(m, n)| {
            let z0 = wealth.z[[m, n]];
            if z0 == 0.0 {
                0.0
            } else if price.z[[m, n]].abs() <= theta.z_floor {
                portfolio_flagged[[m, n]] = true;
                0.0
            } else {
                z0 / price.z[[m, n]]
            }
        });
        Ok(InsiderResult {
            price,
            theta,
            weights,
            budget,
            wealth,
            portfolio,
            portfolio_flagged,
        })
    }

    /// `dX* = theta Z0 dt + Z0 dB`, `X*(T) = (U')^{-1}(c Gamma(T))`.
    pub fn optimal_wealth(
        &self,
        theta: &MarketPriceOfRisk,
        weights: &GirsanovWeights,
        c: f64,
        noise: &NoiseBundle,
    ) -> Result<PredictiveSolution> {
        let forward = self.girsanov_forward(theta, noise);
        let projections = step_projections(&self.wealth_estimator(), &forward.x, noise)?;
        let th = &theta.theta;
        let driver = |m: usize, n: usize, p: &Point<'_>| -th[[m, n]] * p.z;
        let cemetery = TerminalDatum::Constant(0.0);
        let problem = BackwardProblem {
            noise,
            forward: &forward,
            projections: &projections,
            driver: &driver,
            cemetery: &cemetery,
        };
        let terminal = weights.gamma.mapv(|g| self.utility.inverse_marginal(c * g));
        problem.solve_with(terminal, |_, proj| Ok(Array1::zeros(proj.num_paths())))
    }

    /// Wealth paths of a portfolio traded at the solved price.
    pub fn wealth_paths(
        &self,
        policy: &ControlPolicy,
        price: &PredictiveSolution,
        noise: &NoiseBundle,
    ) -> Result<Array2<f64>> {
        Ok(simulate_forward(&self.wealth_spec(), policy, noise, Some(price))?.x)
    }

    /// `E[U(X(T))]` with its standard error.
    pub fn expected_utility(&self, wealth: &Array2<f64>) -> Estimate {
        let n = wealth.ncols() - 1;
        Estimate::from_samples(&wealth.column(n).mapv(|x| self.utility.value(x)))
    }

    /// Diagnostics of a pipeline run: budget, Girsanov normalization,
    /// terminal pinning, self-financing, martingale property of `p` and
    /// optimality against `comparisons` random portfolios.
    pub fn diagnostics(
        &self,
        result: &InsiderResult,
        noise: &NoiseBundle,
        comparisons: usize,
    ) -> Result<Vec<CheckReport>> {
        let mut out = Vec::new();
        let n_steps = result.price.grid.num_steps();
        let x_star = result.wealth.y.column(n_steps);
        let budget = Estimate::from_samples(&(&result.weights.gamma * &x_star));
        out.push(CheckReport::upper_bound(
            "budget",
            (budget.value - self.x0).abs(),
            1e-6 * self.x0 + 3.0 * budget.std_error,
        ));
        let g = Estimate::from_samples(&result.weights.gamma);
        out.push(CheckReport::upper_bound(
            "girsanov mean",
            (g.value - 1.0).abs(),
            3.0 * g.std_error,
        ));
        let cemetery = &result.price.cemetery;
        let pin = result
            .price
            .y
            .column(n_steps)
            .iter()
            .zip(cemetery)
            .fold(0.0_f64, |acc, (y, l)| acc.max((y - l).abs()));
        out.push(CheckReport::upper_bound("terminal pinning", pin, 0.0));

        // Forward wealth under u* differs from X* by the orthogonal
        // residuals of the backward scheme, path by path.
        let policy = ControlPolicy::paths(result.portfolio.clone());
        let forward = self.wealth_paths(&policy, &result.price, noise)?;
        let w = &result.wealth;
        let paths = w.num_paths();
        let mut residual = Array1::<f64>::zeros(paths);
        for n in 0..n_steps {
            for m in 0..paths {
                residual[m] += w.y[[m, n + 1]] - w.y_proxy[[m, n]] - w.z[[m, n]] * noise.db(m, n);
            }
        }
        let identity = Array1::from_shape_fn(paths, |m| {
            forward[[m, n_steps]] - x_star[m] - (self.x0 - w.y[[m, 0]]) + residual[m]
        });
        let rms = |a: &Array1<f64>| a.mapv(|v| v * v).mean().unwrap_or(0.0).sqrt();
        out.push(
            CheckReport::upper_bound("self-financing", rms(&identity), 1e-8 * (1.0 + self.x0))
                .with_note(format!(
                    "simulated wealth under u* equals X* up to the scheme residual (rms {:.3e})",
                    rms(&residual)
                )),
        );

        // p = c Gamma_n is a martingale: its mean is constant in n.
        let running = self.girsanov_forward(&result.theta, noise).x;
        let mut worst: f64 = 0.0;
        for n in 1..=n_steps {
            let e = Estimate::from_samples(&running.column(n).to_owned());
            worst = worst.max((e.value - 1.0).abs() / (3.0 * e.std_error).max(1e-300));
        }
        out.push(
            CheckReport::upper_bound("adjoint martingale", worst, 1.0).with_note(
                "largest deviation of E[p_n] / p_0 from 1 in units of 3 standard errors",
            ),
        );

        // Optimal terminal wealth against forward-simulated random portfolios.
        let optimal = x_star.mapv(|x| self.utility.value(x));
        let best = Estimate::from_samples(&optimal);
        let mut rng = ChaCha8Rng::seed_from_u64(self.solver.seed ^ 0x5eed);
        let mut worst_gap = f64::INFINITY;
        let mut tried = 0;
        while tried < comparisons {
            let level = rng.random_range(-1.0..1.0);
            let slope = rng.random_range(-1.0..1.0);
            let mut scale = 1.0;
            let wealth = loop {
                let policy = ControlPolicy::schedule(
                    (0..n_steps)
                        .map(|n| scale * (level + slope * n as f64 / n_steps as f64))
                        .collect(),
                );
                let w = self.wealth_paths(&policy, &result.price, noise)?;
                if w.iter().all(|&x| x > 0.0) || scale < 1e-3 {
                    break w;
                }
                scale *= 0.5;
            };
            let other = self.expected_utility(&wealth);
            let diff = Estimate::from_samples(
                &(&optimal - &wealth.column(n_steps).mapv(|x| self.utility.value(x))),
            );
            worst_gap =
                worst_gap.min((best.value - other.value) / (3.0 * diff.std_error).max(1e-12));
            tried += 1;
        }
        out.push(
            CheckReport::new("optimality", worst_gap, -1.0, worst_gap >= -1.0)
                .with_note(format!("smallest utility gap over {comparisons} random portfolios in units of 3 standard errors")),
        );
        Ok(out)
    }
}

impl InsiderResult {
    /// Per-step table `(t, E[Y], E[Z], E[theta], E[u*], flagged)`.
    pub fn write_table<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "mean_Y", "mean_Z", "mean_theta", "mean_u", "flagged"])?;
        let grid = &self.price.grid;
        let mean = |a: &Array2<f64>, n: usize| a.column(n).mean().unwrap_or(0.0);
        for n in 0..=grid.num_steps() {
            let mut row = vec![grid.time(n).to_string(), mean(&self.price.y, n).to_string()];
            if n < grid.num_steps() {
                let flagged = self.theta.flagged.column(n).iter().filter(|&&f| f).count();
                row.extend([
                    mean(&self.price.z, n).to_string(),
                    mean(&self.theta.theta, n).to_string(),
                    mean(&self.portfolio, n).to_string(),
                    flagged.to_string(),
                ]);
            } else {
                row.extend([String::new(), String::new(), String::new(), String::new()]);
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(mu: f64, utility: Utility) -> InsiderScenario {
        InsiderScenario {
            mu: Curve::Constant(mu),
            utility,
            solver: SolverSettings {
                paths: 4000,
                seed: 11,
                degree: 3,
                regressors: Vec::new(),
            },
            ..Default::default()
        }
    }

    #[test]
    fn utilities_invert_their_marginals() {
        for u in [
            Utility::Log,
            Utility::Crra { rho: 0.5 },
            Utility::Crra { rho: 3.0 },
        ] {
            for x in [0.3, 1.0, 4.0] {
                assert!((u.inverse_marginal(u.marginal(x)) - x).abs() < 1e-12 * x);
            }
        }
        assert!(Utility::Crra { rho: 1.0 }.validate().is_err());
    }

    #[test]
    fn zero_drift_log_investor_holds_no_stock() {
        let s = scenario(0.0, Utility::Log);
        let noise = s.noise().unwrap();
        let res = s.run(&noise).unwrap();
        assert!(res.theta.theta.iter().all(|&t| t == 0.0));
        assert!(res.weights.gamma.iter().all(|&g| g == 1.0));
        assert_eq!(res.budget.c, 1.0 / s.x0);
        assert!(res.portfolio.iter().all(|&u| u == 0.0));
        assert!(res.wealth.y.column(s.steps).iter().all(|&x| x == s.x0));
    }

    #[test]
    fn constant_terminal_price_is_flat_without_drift() {
        let s = InsiderScenario {
            terminal: TerminalPrice::Constant(2.0),
            ..scenario(0.0, Utility::Log)
        };
        let noise = s.noise().unwrap();
        let price = s.solve_price(&noise).unwrap();
        assert!(price.y.iter().all(|&y| (y - 2.0).abs() < 1e-12));
        assert!(price.z.iter().all(|&z| z.abs() < 1e-12));
    }

    #[test]
    fn synthetic_theta_is_elementwise() {
        let s = scenario(0.1, Utility::Log);
        let noise = s.noise().unwrap();
        let mut price = s.solve_price(&noise).unwrap();
        price
            .a
            .slice_mut(ndarray::s![.., ..s.steps])
            .assign(&price.z);
        let th = market_price_of_risk(&price, &s.mu);
        for (t, f) in th.theta.iter().zip(&th.flagged) {
            assert!(*f || (t - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn crra_bisection_matches_closed_form() {
        let s = scenario(0.0, Utility::Crra { rho: 0.5 });
        let noise = s.noise().unwrap();
        let theta = Array2::from_elem((noise.num_paths(), s.steps), 0.4);
        let w = girsanov_weight(&theta, &noise);
        let b = budget_constant(&s.utility, &w.gamma, s.x0).unwrap();
        let closed = budget_closed_form(&s.utility, &w.gamma, s.x0);
        assert!((b.c - closed).abs() < 1e-7 * closed);
        assert!(b.residual.abs() <= 1e-8 * s.x0);
        // Lognormal moments: c = sqrt(exp(int theta^2) / x0).
        assert!((closed - (0.16f64).exp().sqrt()).abs() < 0.02);
    }

    #[test]
    fn pipeline_checks_pass_with_drift() {
        let s = scenario(0.2, Utility::Log);
        let noise = s.noise().unwrap();
        let res = s.run(&noise).unwrap();
        for c in s.diagnostics(&res, &noise, 3).unwrap() {
            assert!(c.pass, "{c:?}");
        }
    }
}
