//! Backward regression schemes: the classical BSDE step and the predictive
//! mean-field solver built from it by backward interval decomposition.
//!
//! At step `n` with `Y_{n+1}` known:
//!
//! ```text
//! Ŷ_n   = E_n[Y_{n+1}]
//! Z_n   = E_n[Y_{n+1} dB_n] / dt
//! K_n,j = E_n[Y_{n+1} dÑ_{n,j}] / (nu_j dt)
//! Y_n   = Ŷ_n + g(t_n, X_n, Ŷ_n, A_n, Z_n, K_n, u_n) dt
//! ```
//!
//! with `A_n = E_n[Y_{n+d}]` and `Y := L` beyond the horizon.

use std::io::Write;

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::forward::{simulate_forward, ForwardPaths};
use crate::grid::TimeGrid;
use crate::model::{ControlPolicy, FbsdeSpec, Point, TerminalDatum};
use crate::noise::NoiseBundle;
use crate::regression::{Projection, ProjectionDiagnostics};

/// Full solution on the grid. `y`, `a`, `x` have `N+1` columns; `z`, `k`,
/// `y_proxy`, `driver`, `u` have `N`.
#[derive(Debug, Clone)]
pub struct PredictiveSolution {
    pub grid: TimeGrid,
    pub x: Array2<f64>,
    pub u: Array2<f64>,
    pub y: Array2<f64>,
    /// `Ŷ_n = E_n[Y_{n+1}]`, the point at which the driver was evaluated.
    pub y_proxy: Array2<f64>,
    pub z: Array2<f64>,
    pub k: Array3<f64>,
    pub a: Array2<f64>,
    /// Driver values `g_n` per path.
    pub driver: Array2<f64>,
    /// Per-path value of `Y` on `(T, T + delta]`.
    pub cemetery: Array1<f64>,
    pub diagnostics: Vec<ProjectionDiagnostics>,
}

impl PredictiveSolution {
    /// All-zero backward data of the right shape, used to seed Picard sweeps.
    pub fn zeros(grid: TimeGrid, forward: &ForwardPaths, atoms: usize) -> Self {
        let m = forward.x.nrows();
        let n = grid.num_steps();
        Self {
            grid,
            x: forward.x.clone(),
            u: forward.u.clone(),
            y: Array2::zeros((m, n + 1)),
            y_proxy: Array2::zeros((m, n)),
            z: Array2::zeros((m, n)),
            k: Array3::zeros((m, n, atoms)),
            a: Array2::zeros((m, n + 1)),
            driver: Array2::zeros((m, n)),
            cemetery: Array1::zeros(m),
            diagnostics: Vec::new(),
        }
    }

    pub fn num_paths(&self) -> usize {
        self.y.nrows()
    }

    /// `Y` at node `n`, reading the cemetery value beyond the horizon.
    pub fn y_at(&self, path: usize, n: usize) -> f64 {
        if n > self.grid.num_steps() {
            self.cemetery[path]
        } else {
            self.y[[path, n]]
        }
    }

    /// Sample mean of `Y_0`.
    pub fn y0(&self) -> f64 {
        self.y.column(0).mean().unwrap_or(0.0)
    }

    /// Per-path realized value `Y_N + sum_n g_n dt`; its mean equals `Y_0`
    /// whenever every projection contains the constants.
    pub fn realized_y0(&self) -> Array1<f64> {
        let n = self.grid.num_steps();
        let dt = self.grid.dt();
        let mut out = self.y.column(n).to_owned();
        out += &(self.driver.sum_axis(Axis(1)) * dt);
        out
    }

    /// Whether any step needed the ridge fallback.
    pub fn any_ridge(&self) -> bool {
        self.diagnostics.iter().any(|d| d.ridge)
    }

    /// CSV with columns `path, step, t, X, Y, Z, K_1..K_J, A`; `Z`/`K` are
    /// empty at the last node. `max_paths` limits the export.
    pub fn write_csv<W: Write>(&self, writer: W, max_paths: Option<usize>) -> Result<()> {
        let n = self.grid.num_steps();
        let j = self.k.len_of(Axis(2));
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["path", "step", "t", "X", "Y", "Z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=j).map(|i| format!("K_{i}")));
        header.push("A".into());
        w.write_record(&header)?;
        let paths = max_paths.map_or(self.num_paths(), |p| p.min(self.num_paths()));
        for m in 0..paths {
            for s in 0..=n {
                let mut row = vec![
                    m.to_string(),
                    s.to_string(),
                    self.grid.time(s).to_string(),
                    self.x[[m, s]].to_string(),
                    self.y[[m, s]].to_string(),
                ];
                if s < n {
                    row.push(self.z[[m, s]].to_string());
                    row.extend((0..j).map(|a| self.k[[m, s, a]].to_string()));
                } else {
                    row.push(String::new());
                    row.extend((0..j).map(|_| String::new()));
                }
                row.push(self.a[[m, s]].to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// How `A_n` is produced inside an interval solve.
enum PredictiveInput<'a> {
    /// `A_n := Ŷ_n` (no delay).
    Proxy,
    /// `A_n` computed from the step projection and the `Y` values solved so far.
    Given(&'a (dyn Fn(usize, &Projection, &Array2<f64>) -> Result<Array1<f64>> + Sync)),
}

/// Driver evaluated as `driver(path, step, point)`. The point carries the
/// forward state, the control, `y = Ŷ_n`, `a = A_n`, `z = Z_n`, `k = K_n`.
pub type DriverFn<'a> = dyn Fn(usize, usize, &Point<'_>) -> f64 + Sync + 'a;

/// Projections `E[ . | F_{t_n}]` for `n = 0..N-1`.
pub fn step_projections(
    estimator: &Estimator,
    x: &Array2<f64>,
    noise: &NoiseBundle,
) -> Result<Vec<Projection>> {
    (0..noise.grid().num_steps())
        .map(|n| estimator.projection(n, x.view(), noise))
        .collect()
}

/// A backward equation on fixed forward paths with an arbitrary driver.
/// Used for the state equation as well as for the adjoint and variational
/// equations, which share the scheme.
pub struct BackwardProblem<'a> {
    pub noise: &'a NoiseBundle,
    pub forward: &'a ForwardPaths,
    pub projections: &'a [Projection],
    pub driver: &'a DriverFn<'a>,
    /// Value of the unknown on `(T, T + delta]`.
    pub cemetery: &'a TerminalDatum,
}

impl<'a> BackwardProblem<'a> {
    fn empty_solution(&self, terminal: Array1<f64>) -> Result<PredictiveSolution> {
        let grid = *self.noise.grid();
        let n = grid.num_steps();
        let m = self.noise.num_paths();
        if self.forward.x.dim() != (m, n + 1) || self.forward.u.dim() != (m, n) {
            return Err(Error::InvalidParameter(format!(
                "forward paths {:?} do not match the noise ({m} paths, {n} steps)",
                self.forward.x.dim()
            )));
        }
        if terminal.len() != m {
            return Err(Error::InvalidParameter("terminal length mismatch".into()));
        }
        if self.projections.len() != n {
            return Err(Error::InvalidParameter(
                "one projection per step is required".into(),
            ));
        }
        let mut sol = PredictiveSolution::zeros(grid, self.forward, self.noise.num_atoms());
        sol.y.column_mut(n).assign(&terminal);
        sol.cemetery = Array1::from(self.cemetery.evaluate(self.noise));
        sol.a.column_mut(n).assign(&sol.cemetery);
        sol.diagnostics = self
            .projections
            .iter()
            .map(Projection::diagnostics)
            .collect();
        Ok(sol)
    }

    /// Solves steps `start..end` backward; `Y_end` must already be set.
    fn solve_interval(
        &self,
        sol: &mut PredictiveSolution,
        start: usize,
        end: usize,
        input: &PredictiveInput<'_>,
    ) -> Result<()> {
        let grid = *self.noise.grid();
        let dt = grid.dt();
        let atoms = self.noise.num_atoms();
        for n in (start..end).rev() {
            let proj = &self.projections[n];
            let next = sol.y.column(n + 1).to_owned();
            let (yhat, z, k) = martingale_parts(proj, &next, self.noise, n);
            let a = match input {
                PredictiveInput::Proxy => yhat.clone(),
                PredictiveInput::Given(f) => f(n, proj, &sol.y)?,
            };
            let t = grid.time(n);
            let g: Vec<Result<f64>> = (0..next.len())
                .into_par_iter()
                .map(|m| {
                    let kk: Vec<f64> = (0..atoms).map(|j| k[[m, j]]).collect();
                    let p = Point {
                        t,
                        x: self.forward.x[[m, n]],
                        y: yhat[m],
                        a: a[m],
                        z: z[m],
                        k: &kk,
                        u: self.forward.u[[m, n]],
                    };
                    let v = (self.driver)(m, n, &p);
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::NonFinite {
                            quantity: "driver",
                            path: m,
                            step: n,
                        })
                    }
                })
                .collect();
            let g = g.into_iter().collect::<Result<Vec<f64>>>()?;
            for m in 0..next.len() {
                sol.y[[m, n]] = yhat[m] + g[m] * dt;
                sol.driver[[m, n]] = g[m];
            }
            sol.y_proxy.column_mut(n).assign(&yhat);
            sol.z.column_mut(n).assign(&z);
            sol.k.index_axis_mut(Axis(1), n).assign(&k);
            sol.a.column_mut(n).assign(&a);
        }
        Ok(())
    }

    /// Whole-grid classical solve with `A_n = a_provider(n, projection)`.
    pub fn solve_with<F>(&self, terminal: Array1<f64>, a_provider: F) -> Result<PredictiveSolution>
    where
        F: Fn(usize, &Projection) -> Result<Array1<f64>> + Sync,
    {
        let mut sol = self.empty_solution(terminal)?;
        let provider = |n: usize, proj: &Projection, _y: &Array2<f64>| a_provider(n, proj);
        let n = self.noise.grid().num_steps();
        self.solve_interval(&mut sol, 0, n, &PredictiveInput::Given(&provider))?;
        Ok(sol)
    }

    /// Backward interval decomposition: the block `[N-d, N]` reads
    /// `A = E[L | F_t]`, each earlier block reads `Y` from the block after it.
    /// `d = 0` is the classical scheme with `A = Ŷ`.
    pub fn solve_predictive(&self, terminal: Array1<f64>) -> Result<PredictiveSolution> {
        let mut sol = self.empty_solution(terminal)?;
        let grid = *self.noise.grid();
        let d = grid.delay_steps();
        let n_steps = grid.num_steps();
        if d == 0 {
            self.solve_interval(&mut sol, 0, n_steps, &PredictiveInput::Proxy)?;
            return Ok(sol);
        }
        let cemetery = sol.cemetery.clone();
        let datum = self.cemetery;
        let provider = |n: usize, proj: &Projection, y: &Array2<f64>| {
            Ok(predictive_term(y, datum, &cemetery, &grid, n, proj))
        };
        let mut end = n_steps;
        while end > 0 {
            let start = end.saturating_sub(d);
            self.solve_interval(&mut sol, start, end, &PredictiveInput::Given(&provider))?;
            end = start;
        }
        Ok(sol)
    }
}

fn spec_driver(spec: &FbsdeSpec) -> impl Fn(usize, usize, &Point<'_>) -> f64 + Sync + '_ {
    move |_, _, p| spec.coefficients.driver(p)
}

/// Classical explicit backward scheme on the whole grid with a supplied
/// predictive input `a_provider(n, projection)`.
pub fn solve_classical_bsde<F>(
    spec: &FbsdeSpec,
    forward: &ForwardPaths,
    noise: &NoiseBundle,
    estimator: &Estimator,
    terminal: Array1<f64>,
    a_provider: F,
) -> Result<PredictiveSolution>
where
    F: Fn(usize, &Projection) -> Result<Array1<f64>> + Sync,
{
    check_atoms(spec, noise)?;
    let projections = step_projections(estimator, &forward.x, noise)?;
    let driver = spec_driver(spec);
    BackwardProblem {
        noise,
        forward,
        projections: &projections,
        driver: &driver,
        cemetery: &spec.cemetery,
    }
    .solve_with(terminal, a_provider)
}

/// Predictive mean-field BSDE of `spec` on the given forward paths.
pub fn solve_predictive_bsde(
    spec: &FbsdeSpec,
    forward: &ForwardPaths,
    noise: &NoiseBundle,
    estimator: &Estimator,
) -> Result<PredictiveSolution> {
    check_atoms(spec, noise)?;
    let terminal = terminal_values(spec, &forward.x, noise);
    let projections = step_projections(estimator, &forward.x, noise)?;
    let driver = spec_driver(spec);
    BackwardProblem {
        noise,
        forward,
        projections: &projections,
        driver: &driver,
        cemetery: &spec.cemetery,
    }
    .solve_predictive(terminal)
}

fn check_atoms(spec: &FbsdeSpec, noise: &NoiseBundle) -> Result<()> {
    if spec.num_atoms() != noise.num_atoms() {
        return Err(Error::InvalidParameter("jump atom count mismatch".into()));
    }
    Ok(())
}

/// Generic explicit backward step on the projection for node `n`. Returns
/// `(Ŷ_n, Z_n, K_n)` for the target column `next`. The increment targets are
/// centered by `Ŷ_n`, which leaves their conditional expectation unchanged
/// and makes `Z = K = 0` exact for known `Y_{n+1}`.
pub fn martingale_parts(
    proj: &Projection,
    next: &Array1<f64>,
    noise: &NoiseBundle,
    n: usize,
) -> (Array1<f64>, Array1<f64>, Array2<f64>) {
    let dt = noise.grid().dt();
    let m = next.len();
    let j = noise.num_atoms();
    let yhat = proj.project(next.view());
    let db = noise.db_column(n);
    let centered: Array1<f64> = next - &yhat;
    let zt: Array1<f64> = &centered * &db / dt;
    let z = proj.project(zt.view());
    let mut k = Array2::zeros((m, j));
    for (atom, a) in noise.measure().atoms().iter().enumerate() {
        let kt = Array1::from_shape_fn(m, |p| {
            centered[p] * noise.compensated(p, n, atom) / (a.intensity * dt)
        });
        k.column_mut(atom).assign(&proj.project(kt.view()));
    }
    (yhat, z, k)
}

/// Terminal values at the last node: `h(X_N)` if the spec has a terminal map,
/// otherwise the datum `L`.
pub fn terminal_values(spec: &FbsdeSpec, x: &Array2<f64>, noise: &NoiseBundle) -> Array1<f64> {
    let n = noise.grid().num_steps();
    if spec.coefficients.has_terminal_map() {
        x.column(n).mapv(|v| spec.coefficients.terminal_map(v))
    } else {
        Array1::from(spec.cemetery.evaluate(noise))
    }
}

/// `E[L | F_{t_n}]`; exact when `L` is a constant.
pub fn cemetery_term(
    datum: &TerminalDatum,
    cemetery: &Array1<f64>,
    proj: &Projection,
) -> Array1<f64> {
    match datum.as_constant() {
        Some(c) => Array1::from_elem(cemetery.len(), c),
        None => proj.project(cemetery.view()),
    }
}

/// `A_n = E_n[Y_{n+d}]`, falling back to the cemetery value past the horizon.
pub fn predictive_term(
    y: &Array2<f64>,
    datum: &TerminalDatum,
    cemetery: &Array1<f64>,
    grid: &TimeGrid,
    n: usize,
    proj: &Projection,
) -> Array1<f64> {
    let target = n + grid.delay_steps();
    if target > grid.num_steps() {
        cemetery_term(datum, cemetery, proj)
    } else {
        proj.project(y.column(target))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            max_iterations: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoupledSolution {
    pub solution: PredictiveSolution,
    pub iterations: usize,
    pub converged: bool,
    /// `Y_0` after each sweep.
    pub y0_history: Vec<f64>,
}

/// Forward simulation plus predictive solve. When the forward coefficients
/// read backward data the pair is iterated (Picard) until successive `Y_0`
/// estimates differ by less than the tolerance; divergence is reported via
/// `converged = false`, not treated as an error.
pub fn solve_fbsde(
    spec: &FbsdeSpec,
    policy: &ControlPolicy,
    noise: &NoiseBundle,
    estimator: &Estimator,
    options: PicardOptions,
) -> Result<CoupledSolution> {
    if !spec.coefficients.forward_uses_backward() {
        let forward = simulate_forward(spec, policy, noise, None)?;
        let solution = solve_predictive_bsde(spec, &forward, noise, estimator)?;
        let y0 = solution.y0();
        return Ok(CoupledSolution {
            solution,
            iterations: 1,
            converged: true,
            y0_history: vec![y0],
        });
    }
    let grid = *noise.grid();
    let seed_forward = ForwardPaths {
        x: Array2::from_elem((noise.num_paths(), grid.num_steps() + 1), spec.x0),
        u: Array2::zeros((noise.num_paths(), grid.num_steps())),
    };
    let mut current = PredictiveSolution::zeros(grid, &seed_forward, noise.num_atoms());
    let mut history = Vec::new();
    for it in 1..=options.max_iterations {
        let forward = simulate_forward(spec, policy, noise, Some(&current))?;
        let next = solve_predictive_bsde(spec, &forward, noise, estimator)?;
        let y0 = next.y0();
        let done = history
            .last()
            .is_some_and(|prev: &f64| (y0 - prev).abs() < options.tolerance);
        history.push(y0);
        current = next;
        if done {
            return Ok(CoupledSolution {
                solution: current,
                iterations: it,
                converged: true,
                y0_history: history,
            });
        }
    }
    Ok(CoupledSolution {
        solution: current,
        iterations: options.max_iterations,
        converged: false,
        y0_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{RegressionBasis, Regressor};
    use crate::model::Coefficients;
    use crate::noise::JumpAtomMeasure;
    use ndarray::{concatenate, Axis};

    struct Zero;
    impl Coefficients for Zero {}

    struct Linear(f64);
    impl Coefficients for Linear {
        fn driver(&self, p: &Point<'_>) -> f64 {
            self.0 * p.y
        }
    }

    struct AplusY;
    impl Coefficients for AplusY {
        fn driver(&self, p: &Point<'_>) -> f64 {
            p.a + p.y
        }
    }

    struct Brownian;
    impl Coefficients for Brownian {
        fn diffusion(&self, _p: &Point<'_>) -> f64 {
            1.0
        }
        fn driver(&self, p: &Point<'_>) -> f64 {
            0.3 * p.a + 0.1 * p.y.sin() + 0.2 * p.z
        }
    }

    fn level_basis(degree: usize) -> Estimator {
        Estimator::Regression(RegressionBasis::new(degree, vec![Regressor::BrownianLevel]))
    }

    fn forward(spec: &FbsdeSpec, noise: &NoiseBundle) -> ForwardPaths {
        simulate_forward(spec, &ControlPolicy::constant(0.0), noise, None).unwrap()
    }

    #[test]
    fn constant_terminal_without_driver() {
        let grid = TimeGrid::new(1.0, 8, 2).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 500, 1);
        let spec = FbsdeSpec::new(
            Zero,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::Constant(2.5),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::default()).unwrap();
        assert!(sol.y.iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(sol.z.iter().all(|v| v.abs() < 1e-12));
        assert!(sol.a.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn brownian_terminal_is_a_martingale() {
        let grid = TimeGrid::new(1.0, 16, 0).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 4000, 2);
        let spec = FbsdeSpec::new(
            Zero,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::functional(|b, _| b),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &level_basis(1)).unwrap();
        for n in 0..16 {
            let err = (&sol.y.column(n) - &noise.brownian_level(n)).mapv(f64::abs);
            assert!(err.iter().cloned().fold(0.0, f64::max) < 0.1, "step {n}");
            let zbar = sol.z.column(n).mean().unwrap();
            assert!((zbar - 1.0).abs() < 0.1, "step {n}: {zbar}");
        }
        assert!((sol.z.mean().unwrap() - 1.0).abs() < 0.03);
    }

    #[test]
    fn terminal_and_cemetery_are_exact() {
        let grid = TimeGrid::new(1.0, 8, 3).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 300, 3);
        let spec = FbsdeSpec::new(
            AplusY,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::functional(|b, _| b * b),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::default()).unwrap();
        for m in 0..300 {
            let b = noise.brownian_level(8)[m];
            assert_eq!(sol.y[[m, 8]], b * b);
            assert_eq!(sol.a[[m, 8]], b * b);
            assert_eq!(sol.y_at(m, 10), b * b);
        }
    }

    #[test]
    fn driver_free_of_a_matches_classical() {
        let grid = TimeGrid::new(1.0, 12, 4).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 800, 4);
        let spec = FbsdeSpec::new(
            Linear(0.7),
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::functional(|b, _| b.cos()),
        );
        let fw = forward(&spec, &noise);
        let est = Estimator::default();
        let pred = solve_predictive_bsde(&spec, &fw, &noise, &est).unwrap();
        let terminal = terminal_values(&spec, &fw.x, &noise);
        let classical = solve_classical_bsde(&spec, &fw, &noise, &est, terminal, |_, p| {
            Ok(Array1::zeros(p.num_paths()))
        })
        .unwrap();
        assert_eq!(pred.y, classical.y);
        assert_eq!(pred.z, classical.z);
    }

    #[test]
    fn full_delay_is_one_classical_block() {
        let grid = TimeGrid::new(1.0, 10, 10).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 600, 5);
        let spec = FbsdeSpec::new(
            AplusY,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::functional(|b, _| b.max(0.0)),
        );
        let fw = forward(&spec, &noise);
        let est = Estimator::default();
        let pred = solve_predictive_bsde(&spec, &fw, &noise, &est).unwrap();
        let terminal = terminal_values(&spec, &fw.x, &noise);
        let cemetery = Array1::from(spec.cemetery.evaluate(&noise));
        let classical = solve_classical_bsde(&spec, &fw, &noise, &est, terminal, |_, p| {
            Ok(cemetery_term(&spec.cemetery, &cemetery, p))
        })
        .unwrap();
        assert_eq!(pred.y, classical.y);
        assert_eq!(
            pred.a.slice(ndarray::s![.., ..10]),
            classical.a.slice(ndarray::s![.., ..10])
        );
    }

    #[test]
    fn tower_property_of_the_predictive_term() {
        let grid = TimeGrid::new(1.0, 12, 3).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 2000, 6);
        let spec = FbsdeSpec::new(
            Brownian,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::functional(|b, _| b.tanh()),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::default()).unwrap();
        for n in 0..12 - 3 {
            let a = sol.a.column(n);
            let y = sol.y.column(n + 3);
            let sd = y.std(1.0);
            let tol = 3.0 * sd / (2000f64).sqrt();
            assert!((a.mean().unwrap() - y.mean().unwrap()).abs() <= tol);
        }
    }

    #[test]
    fn fitted_values_depend_only_on_the_past() {
        let grid = TimeGrid::new(1.0, 8, 2).unwrap();
        let measure = JumpAtomMeasure::empty();
        let base = NoiseBundle::simulate(grid, measure.clone(), 400, 7);
        let other = NoiseBundle::simulate(grid, measure.clone(), 400, 8);
        let split = 4;
        let spliced = base.splice_future(&other, split).unwrap();
        let brownian = concatenate(
            Axis(0),
            &[
                base.brownian_increments().view(),
                spliced.brownian_increments().view(),
            ],
        )
        .unwrap();
        let jumps = ndarray::Array3::zeros((800, 8, 0));
        let noise = NoiseBundle::from_parts(grid, measure.clone(), 7, brownian, jumps).unwrap();
        let spec = FbsdeSpec::new(
            Brownian,
            0.0,
            measure,
            TerminalDatum::functional(|b, _| b.sin()),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::default()).unwrap();
        for m in 0..400 {
            for n in 0..=split {
                assert_eq!(fw.x[[m, n]], fw.x[[m + 400, n]]);
                assert_eq!(sol.y[[m, n]], sol.y[[m + 400, n]]);
                assert_eq!(sol.a[[m, n]], sol.a[[m + 400, n]]);
            }
            for n in 0..split {
                assert_eq!(sol.z[[m, n]], sol.z[[m + 400, n]]);
            }
        }
    }

    /// Node value of the discrete scheme by recursion over the tree, with
    /// `g = a + y` evaluated at the continuation value.
    fn tree_value(prefix: &mut Vec<bool>, n_steps: usize, d: usize, h: f64, dt: f64) -> f64 {
        let n = prefix.len();
        if n == n_steps {
            return leaf(prefix, h);
        }
        let yhat = mean_at_depth(prefix, n + 1, n_steps, d, h, dt);
        let a = if n + d > n_steps {
            mean_leaves(prefix, n_steps, h)
        } else {
            mean_at_depth(prefix, n + d, n_steps, d, h, dt)
        };
        yhat + (a + yhat) * dt
    }

    fn leaf(prefix: &[bool], h: f64) -> f64 {
        let b: f64 = prefix.iter().map(|&up| if up { h } else { -h }).sum();
        b * b + b
    }

    fn mean_leaves(prefix: &mut Vec<bool>, n_steps: usize, h: f64) -> f64 {
        if prefix.len() == n_steps {
            return leaf(prefix, h);
        }
        let mut s = 0.0;
        for up in [true, false] {
            prefix.push(up);
            s += mean_leaves(prefix, n_steps, h);
            prefix.pop();
        }
        s / 2.0
    }

    fn mean_at_depth(
        prefix: &mut Vec<bool>,
        depth: usize,
        n_steps: usize,
        d: usize,
        h: f64,
        dt: f64,
    ) -> f64 {
        if prefix.len() == depth {
            return tree_value(prefix, n_steps, d, h, dt);
        }
        let mut s = 0.0;
        for up in [true, false] {
            prefix.push(up);
            s += mean_at_depth(prefix, depth, n_steps, d, h, dt);
            prefix.pop();
        }
        s / 2.0
    }

    #[test]
    fn tree_solver_matches_recursive_evaluation() {
        for d in [1, 2, 3] {
            let grid = TimeGrid::new(0.75, 3, d).unwrap();
            let noise = NoiseBundle::binary_tree(grid).unwrap();
            let spec = FbsdeSpec::new(
                AplusY,
                0.0,
                JumpAtomMeasure::empty(),
                TerminalDatum::functional(|b, _| b * b + b),
            );
            let fw = forward(&spec, &noise);
            let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::Tree).unwrap();
            let h = grid.dt().sqrt();
            for m in 0..8 {
                for n in 0..=3 {
                    let mut prefix: Vec<bool> = (0..n).map(|s| noise.db(m, s) > 0.0).collect();
                    let want = tree_value(&mut prefix, 3, d, h, grid.dt());
                    assert!((sol.y[[m, n]] - want).abs() < 1e-12, "d={d} m={m} n={n}");
                }
            }
        }
    }

    #[test]
    fn realized_values_average_to_y0() {
        let grid = TimeGrid::new(1.0, 8, 2).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 500, 9);
        let spec = FbsdeSpec::new(
            Brownian,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::Constant(1.0),
        );
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(&spec, &fw, &noise, &Estimator::default()).unwrap();
        assert!((sol.realized_y0().mean().unwrap() - sol.y0()).abs() < 1e-10);
    }

    struct Coupled;
    impl Coefficients for Coupled {
        fn drift(&self, p: &Point<'_>) -> f64 {
            0.2 * p.y
        }
        fn diffusion(&self, _p: &Point<'_>) -> f64 {
            0.3
        }
        fn has_terminal_map(&self) -> bool {
            true
        }
        fn terminal_map(&self, x: f64) -> f64 {
            x
        }
        fn terminal_map_deriv(&self, _x: f64) -> f64 {
            1.0
        }
        fn driver(&self, p: &Point<'_>) -> f64 {
            0.1 * p.a
        }
        fn forward_uses_backward(&self) -> bool {
            true
        }
    }

    #[test]
    fn picard_converges_for_weak_coupling() {
        let grid = TimeGrid::new(1.0, 10, 2).unwrap();
        let noise = NoiseBundle::simulate(grid, JumpAtomMeasure::empty(), 1000, 10);
        let spec = FbsdeSpec::new(
            Coupled,
            1.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::Constant(1.0),
        );
        let out = solve_fbsde(
            &spec,
            &ControlPolicy::constant(0.0),
            &noise,
            &Estimator::default(),
            PicardOptions::default(),
        )
        .unwrap();
        assert!(out.converged);
        assert!(out.iterations > 1);
        // Deterministic mean dynamics: E[Y] solves a linear delay system close to x0 e^{0.3}.
        assert!(
            (out.solution.y0() - 1.3).abs() < 0.1,
            "{}",
            out.solution.y0()
        );
    }

    #[test]
    fn csv_export_layout() {
        let grid = TimeGrid::new(1.0, 2, 1).unwrap();
        let measure = JumpAtomMeasure::new(vec![crate::noise::JumpAtom {
            mark: 0.5,
            intensity: 1.0,
        }])
        .unwrap();
        let noise = NoiseBundle::simulate(grid, measure.clone(), 20, 11);
        let spec = FbsdeSpec::new(Zero, 0.0, measure, TerminalDatum::Constant(1.0));
        let fw = forward(&spec, &noise);
        let sol = solve_predictive_bsde(
            &spec,
            &fw,
            &noise,
            &Estimator::Regression(RegressionBasis::new(1, vec![Regressor::BrownianLevel])),
        )
        .unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, Some(2)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,X,Y,Z,K_1,A");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[3].ends_with(",,,1"));
    }
}
