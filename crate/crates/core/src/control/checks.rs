//! Diagnostic checks of the maximum principle: conditional criticality of
//! `dH/du`, the sufficiency conditions, and the delay shift identity.
//!
//! Conditional expectations of `H` and its partials use realized adjoint
//! targets, `p̃_n = p_{n+1} + H_x dt`, `q̃_n = (p_{n+1} - p̂_n) dB_n / dt`,
//! `r̃_{n,j} = (p_{n+1} - p̂_n) dÑ_{n,j} / (nu_j dt)`, whose conditional means
//! are `(p_n, q_n, r_n)`. Regressing them on the lagged observables gives an
//! estimate of `E[ . | G_t]` together with an honest residual spread.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adjoint::{primal_point, AdjointSolution};
use super::hamiltonian::{hamiltonian_at, hamiltonian_partial, Multipliers};
use crate::bsde::PredictiveSolution;
use crate::error::Result;
use crate::estimator::Estimator;
use crate::grid::TimeGrid;
use crate::model::{read, FbsdeSpec, Point, Variable};
use crate::noise::NoiseBundle;
use crate::regression::Projection;

/// One line of a diagnostic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

impl CheckReport {
    pub fn new(name: &str, statistic: f64, threshold: f64, pass: bool) -> Self {
        Self {
            name: name.into(),
            statistic,
            threshold,
            pass,
            note: String::new(),
        }
    }

    pub fn upper_bound(name: &str, statistic: f64, threshold: f64) -> Self {
        Self::new(name, statistic, threshold, statistic <= threshold)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

/// Realized adjoint targets at `(path, step)`: `(p̃, q̃, r̃)`.
fn realized_multipliers(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    noise: &NoiseBundle,
    m: usize,
    n: usize,
    rbuf: &mut Vec<f64>,
) -> (f64, f64) {
    let dt = sol.grid.dt();
    let mut kbuf = Vec::new();
    let mut abuf = Vec::new();
    let point = primal_point(sol, m, n, &mut kbuf);
    let h_x = hamiltonian_partial(spec, &point, &adj.multipliers(m, n, &mut abuf), Variable::X);
    let innovation = adj.p[[m, n + 1]] - adj.p_proxy[[m, n]];
    rbuf.clear();
    for (j, atom) in spec.measure.atoms().iter().enumerate() {
        rbuf.push(innovation * noise.compensated(m, n, j) / (atom.intensity * dt));
    }
    (
        adj.p[[m, n + 1]] + h_x * dt,
        innovation * noise.db(m, n) / dt,
    )
}

/// Realized `dH/du` per `(path, step)`; its conditional mean is `dH/du`
/// evaluated with `(p_n, q_n, r_n)`.
pub fn realized_gradient_u(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    noise: &NoiseBundle,
) -> Array2<f64> {
    let (paths, steps) = sol.z.dim();
    Array2::from_shape_fn((paths, steps), |(m, n)| {
        let mut rbuf = Vec::new();
        let (p, q) = realized_multipliers(spec, sol, adj, noise, m, n, &mut rbuf);
        let mut kbuf = Vec::new();
        let point = primal_point(sol, m, n, &mut kbuf);
        let mult = Multipliers {
            p,
            q,
            r: &rbuf,
            lambda: adj.lambda[[m, n]],
        };
        hamiltonian_partial(spec, &point, &mult, Variable::U)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCheck {
    pub step: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalityReport {
    pub steps: Vec<StepCheck>,
    /// Largest absolute fitted value of `E[dH/du | G_t]` over all steps.
    pub max_abs: f64,
    pub pass_fraction: f64,
    pub summary: CheckReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalityOptions {
    /// Information lag `l` of `G_t = F_{t - l dt}`.
    pub lag: usize,
    pub exclude_last_step: bool,
    /// Fraction of steps that must pass.
    pub min_pass_fraction: f64,
}

impl Default for CriticalityOptions {
    fn default() -> Self {
        Self {
            lag: 0,
            exclude_last_step: false,
            min_pass_fraction: 0.9,
        }
    }
}

/// Per step, regresses realized `dH/du` on the lagged observables. The
/// statistic is the root-mean-square fitted value, compared with three
/// times the regression standard error `s sqrt(P / M)`.
pub fn check_criticality(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    noise: &NoiseBundle,
    estimator: &Estimator,
    options: CriticalityOptions,
) -> Result<CriticalityReport> {
    let grad = realized_gradient_u(spec, sol, adj, noise);
    let n_steps = sol.grid.num_steps();
    let last = if options.exclude_last_step {
        n_steps - 1
    } else {
        n_steps
    };
    let mut steps = Vec::with_capacity(last);
    let mut max_abs: f64 = 0.0;
    for n in 0..last {
        let proj = estimator.projection(n.saturating_sub(options.lag), sol.x.view(), noise)?;
        let target = grad.column(n);
        let fit = proj.fit(target);
        let rms = (fit.fitted.mapv(|v| v * v).mean().unwrap_or(0.0)).sqrt();
        let scale = target.mapv(f64::abs).mean().unwrap_or(0.0);
        let threshold = 3.0 * fit.standard_error() + 1e-10 * (1.0 + scale);
        max_abs = fit.fitted.iter().fold(max_abs, |acc, v| acc.max(v.abs()));
        steps.push(StepCheck {
            step: n,
            statistic: rms,
            threshold,
            pass: rms <= threshold,
        });
    }
    let passed = steps.iter().filter(|s| s.pass).count();
    let pass_fraction = if steps.is_empty() {
        1.0
    } else {
        passed as f64 / steps.len() as f64
    };
    let summary = CheckReport::new(
        "criticality",
        pass_fraction,
        options.min_pass_fraction,
        pass_fraction >= options.min_pass_fraction,
    )
    .with_note(format!(
        "{passed} of {} steps below 3 regression standard errors",
        steps.len()
    ));
    Ok(CriticalityReport {
        steps,
        max_abs,
        pass_fraction,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyOptions {
    pub sample_count: usize,
    pub seed: u64,
    /// Candidate controls for the conditional maximization.
    pub control_grid: Vec<f64>,
    pub lag: usize,
    pub exclude_last_step: bool,
    /// Relative tolerance on the largest Hessian eigenvalue.
    pub hessian_tolerance: f64,
    pub min_pass_fraction: f64,
}

impl Default for SufficiencyOptions {
    fn default() -> Self {
        Self {
            sample_count: 64,
            seed: 0,
            control_grid: Vec::new(),
            lag: 0,
            exclude_last_step: false,
            hessian_tolerance: 1e-5,
            min_pass_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    pub terminal_sign: CheckReport,
    pub concavity: CheckReport,
    pub conditional_maximum: CheckReport,
    pub jump_gradient: CheckReport,
    /// Set when the grid maximizer sits on the grid boundary for most
    /// `(path, step)` pairs.
    pub no_interior_max: bool,
}

impl SufficiencyReport {
    pub fn checks(&self) -> [&CheckReport; 4] {
        [
            &self.terminal_sign,
            &self.concavity,
            &self.conditional_maximum,
            &self.jump_gradient,
        ]
    }
}

/// Central-difference Hessian of `H` in `(x, y, a, z, k, u)` at `point`.
fn hessian(spec: &FbsdeSpec, point: &Point<'_>, mult: &Multipliers<'_>) -> DMatrix<f64> {
    let vars = Variable::all(spec.num_atoms());
    let n = vars.len();
    let base: Vec<f64> = vars.iter().map(|&v| read(v, point)).collect();
    let steps: Vec<f64> = base.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let atoms = spec.num_atoms();
    let eval = |shifts: &[(usize, f64)]| {
        let mut v = base.clone();
        for &(i, h) in shifts {
            v[i] += h;
        }
        let p = Point {
            t: point.t,
            x: v[0],
            y: v[1],
            a: v[2],
            z: v[3],
            k: &v[4..4 + atoms],
            u: v[4 + atoms],
        };
        hamiltonian_at(spec, &p, mult)
    };
    let mut h = DMatrix::zeros(n, n);
    let f0 = eval(&[]);
    for i in 0..n {
        let hi = steps[i];
        h[(i, i)] = (eval(&[(i, hi)]) - 2.0 * f0 + eval(&[(i, -hi)])) / (hi * hi);
        for j in 0..i {
            let hj = steps[j];
            let v = (eval(&[(i, hi), (j, hj)])
                - eval(&[(i, hi), (j, -hj)])
                - eval(&[(i, -hi), (j, hj)])
                + eval(&[(i, -hi), (j, -hj)]))
                / (4.0 * hi * hj);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    h
}

/// Sufficiency conditions: (a) sign of `lambda_N`; (b) sampled concavity of
/// `H`; (c) the candidate attains the maximum of the fitted `E[H | G_t]`
/// over the control grid; (d) finiteness of the jump gradient.
pub fn check_sufficiency(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    noise: &NoiseBundle,
    estimator: &Estimator,
    options: &SufficiencyOptions,
) -> Result<SufficiencyReport> {
    let (paths, n_steps) = sol.z.dim();
    let negative = adj
        .lambda
        .column(n_steps)
        .iter()
        .filter(|&&l| l < 0.0)
        .count();
    let frac = negative as f64 / paths.max(1) as f64;
    let terminal_sign = CheckReport::upper_bound("terminal adjoint sign", frac, 0.0)
        .with_note("fraction of paths with lambda_N < 0");

    // (b) sampled Hessians.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let total = paths * n_steps;
    let picks = sample(&mut rng, total, options.sample_count.min(total));
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut violations = 0;
    for idx in picks.iter() {
        let (m, n) = (idx / n_steps, idx % n_steps);
        let mut kbuf = Vec::new();
        let mut rbuf = Vec::new();
        let point = primal_point(sol, m, n, &mut kbuf);
        let mult = adj.multipliers(m, n, &mut rbuf);
        let hess = hessian(spec, &point, &mult);
        let eig = SymmetricEigen::new(hess);
        let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let top = eig
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let rel = top / (1.0 + scale);
        worst = worst.max(rel);
        if rel > options.hessian_tolerance {
            violations += 1;
        }
    }
    let samples = picks.len();
    let concavity =
        CheckReport::upper_bound("concavity", worst.max(0.0), options.hessian_tolerance).with_note(
            if violations == 0 {
                format!("no violation found in {samples} samples")
            } else {
                format!("violation found in {violations} of {samples} samples")
            },
        );

    // (c) conditional maximization over the grid plus the candidate itself.
    let last = if options.exclude_last_step {
        n_steps - 1
    } else {
        n_steps
    };
    let mut ok = 0usize;
    let mut edge = 0usize;
    let mut checked = 0usize;
    let grid_len = options.control_grid.len();
    if grid_len > 0 {
        for n in 0..last {
            let proj = estimator.projection(n.saturating_sub(options.lag), sol.x.view(), noise)?;
            let (candidate, fitted, se) =
                conditional_hamiltonians(spec, sol, adj, noise, &proj, n, &options.control_grid);
            for m in 0..paths {
                let (arg, best) =
                    fitted
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |(ai, av), (i, f)| {
                            if f[m] > av {
                                (i, f[m])
                            } else {
                                (ai, av)
                            }
                        });
                if arg == 0 || arg == grid_len - 1 {
                    edge += 1;
                }
                if candidate[m] >= best - 3.0 * se {
                    ok += 1;
                }
                checked += 1;
            }
        }
    }
    let frac_ok = if checked == 0 {
        1.0
    } else {
        ok as f64 / checked as f64
    };
    let no_interior_max = checked > 0 && edge * 2 > checked;
    let mut conditional_maximum = CheckReport::new(
        "conditional maximum",
        frac_ok,
        options.min_pass_fraction,
        frac_ok >= options.min_pass_fraction,
    );
    conditional_maximum.note = if no_interior_max {
        "no interior max: grid maximizer on the boundary".into()
    } else {
        format!("candidate within 3 standard errors of the grid maximum at {ok} of {checked} nodes")
    };

    // (d) jump gradient.
    let mut norm: f64 = 0.0;
    let mut finite = true;
    for m in 0..paths {
        for n in 0..n_steps {
            let mut kbuf = Vec::new();
            let mut rbuf = Vec::new();
            let point = primal_point(sol, m, n, &mut kbuf);
            let mult = adj.multipliers(m, n, &mut rbuf);
            for (j, atom) in spec.measure.atoms().iter().enumerate() {
                let g = hamiltonian_partial(spec, &point, &mult, Variable::K(j)) / atom.intensity;
                finite &= g.is_finite();
                norm = norm.max(g.abs());
            }
        }
    }
    let jump_gradient = CheckReport::new("jump gradient", norm, f64::INFINITY, finite)
        .with_note("largest |dH/dk_j| / nu_j");
    Ok(SufficiencyReport {
        terminal_sign,
        concavity,
        conditional_maximum,
        jump_gradient,
        no_interior_max,
    })
}

/// Fitted `E[H(u) | G_t]` for the candidate and every grid control, with the
/// largest regression standard error.
fn conditional_hamiltonians(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    adj: &AdjointSolution,
    noise: &NoiseBundle,
    proj: &Projection,
    n: usize,
    grid: &[f64],
) -> (Array1<f64>, Vec<Array1<f64>>, f64) {
    let paths = sol.num_paths();
    let mut realized: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(paths);
    for m in 0..paths {
        let mut rbuf = Vec::new();
        let (p, q) = realized_multipliers(spec, sol, adj, noise, m, n, &mut rbuf);
        realized.push((p, q, rbuf));
    }
    let eval = |u: Option<f64>| {
        Array1::from_shape_fn(paths, |m| {
            let mut kbuf = Vec::new();
            let mut point = primal_point(sol, m, n, &mut kbuf);
            if let Some(u) = u {
                point.u = u;
            }
            let (p, q, ref r) = realized[m];
            let mult = Multipliers {
                p,
                q,
                r,
                lambda: adj.lambda[[m, n]],
            };
            hamiltonian_at(spec, &point, &mult)
        })
    };
    let mut se: f64 = 0.0;
    let mut fit = |target: Array1<f64>| {
        let f = proj.fit(target.view());
        se = se.max(f.standard_error());
        f.fitted
    };
    let candidate = fit(eval(None));
    let fitted: Vec<Array1<f64>> = grid.iter().map(|&u| fit(eval(Some(u)))).collect();
    (candidate, fitted, se)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftIdentity {
    /// `E[sum_{n >= d} phi_{n-d} y_n dt]`.
    pub lhs: f64,
    /// `E[sum_n phi_n a_n dt]` with `a_n = E_n[y_{n+d}]` (zero past the horizon).
    pub rhs: f64,
    pub std_error: f64,
    pub pass: bool,
}

/// Monte Carlo check of the delay shift identity for an adapted test
/// process `phi` (`M x N`) and a process `y` (`M x (N+1)`) vanishing at and
/// beyond the horizon.
pub fn shift_identity(
    phi: &Array2<f64>,
    y: &Array2<f64>,
    grid: &TimeGrid,
    projections: &[Projection],
) -> ShiftIdentity {
    let n_steps = grid.num_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let paths = phi.nrows();
    let mut lhs = Array1::<f64>::zeros(paths);
    let mut rhs = Array1::<f64>::zeros(paths);
    for n in d..n_steps {
        lhs += &(&phi.column(n - d) * &y.column(n) * dt);
    }
    for n in 0..n_steps {
        if n + d < n_steps {
            let a = projections[n].project(y.column(n + d));
            rhs += &(&phi.column(n) * &a * dt);
        }
    }
    let diff = &lhs - &rhs;
    let se = diff.std(1.0) / (paths as f64).sqrt();
    let (l, r) = (lhs.mean().unwrap_or(0.0), rhs.mean().unwrap_or(0.0));
    ShiftIdentity {
        lhs: l,
        rhs: r,
        std_error: se,
        pass: (l - r).abs() <= 3.0 * se + 1e-12 * (1.0 + l.abs()),
    }
}
