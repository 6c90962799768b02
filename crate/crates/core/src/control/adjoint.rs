//! Adjoint equations: the backward equation in `(p, q, r)` with driver
//! `dH/dx`, and the forward delay equation in `lambda`,
//!
//! ```text
//! lambda_{n+1} = lambda_n + (H_y(n) + H_a(n+1-d)) dt + H_z(n) dB_n
//!                + sum_j H_{k_j}(n) / nu_j dÑ_{n,j},   lambda_0 = psi'(Y_0).
//! ```
//!
//! The delayed term is read at `n + 1 - d`, which makes both recursions the
//! exact adjoint of the explicit backward scheme. It vanishes for
//! `n + 1 < d`. All partials are taken at the driver's evaluation point
//! `(t_n, X_n, Ŷ_n, A_n, Z_n, K_n, u_n)` with multipliers `(p̂_n, q_n, r_n, lambda_n)`,
//! `p̂_n = E_n[p_{n+1}]`.

use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hamiltonian::{hamiltonian_partial, Multipliers};
use crate::bsde::{step_projections, BackwardProblem, PredictiveSolution};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::forward::ForwardPaths;
use crate::model::{FbsdeSpec, Point, TerminalDatum, Variable};
use crate::noise::NoiseBundle;
use crate::regression::Projection;

/// `p, lambda`: `M x (N+1)`; `p_proxy, q`: `M x N`; `r`: `M x N x J`.
#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub p: Array2<f64>,
    /// `p̂_n = E_n[p_{n+1}]`, the value paired with the state in `H`.
    pub p_proxy: Array2<f64>,
    pub q: Array2<f64>,
    pub r: Array3<f64>,
    pub lambda: Array2<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Backward adjoint triple.
#[derive(Debug, Clone)]
pub struct AdjointP {
    pub p: Array2<f64>,
    pub p_proxy: Array2<f64>,
    pub q: Array2<f64>,
    pub r: Array3<f64>,
}

impl AdjointP {
    pub fn multipliers<'a>(
        &self,
        m: usize,
        n: usize,
        rbuf: &'a mut Vec<f64>,
        lambda: f64,
    ) -> Multipliers<'a> {
        rbuf.clear();
        rbuf.extend((0..self.r.len_of(Axis(2))).map(|j| self.r[[m, n, j]]));
        Multipliers {
            p: self.p_proxy[[m, n]],
            q: self.q[[m, n]],
            r: rbuf,
            lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjointOptions {
    pub max_sweeps: usize,
    /// Bound on the root-mean-square change of `lambda` between sweeps.
    pub tolerance: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 10,
            tolerance: 1e-4,
        }
    }
}

/// Primal evaluation point at `(path, step)`; `kbuf` backs the jump vector.
pub fn primal_point<'a>(
    sol: &PredictiveSolution,
    m: usize,
    n: usize,
    kbuf: &'a mut Vec<f64>,
) -> Point<'a> {
    kbuf.clear();
    kbuf.extend((0..sol.k.len_of(Axis(2))).map(|j| sol.k[[m, n, j]]));
    Point {
        t: sol.grid.time(n),
        x: sol.x[[m, n]],
        y: sol.y_proxy[[m, n]],
        a: sol.a[[m, n]],
        z: sol.z[[m, n]],
        k: kbuf,
        u: sol.u[[m, n]],
    }
}

/// Forward delay equation for `lambda`. Without `pqr` the backward adjoints
/// are taken as zero, which is exact when `b, sigma, gamma` do not read
/// `(y, a, z, k)`.
pub fn solve_adjoint_lambda(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    pqr: Option<&AdjointP>,
    noise: &NoiseBundle,
) -> Result<Array2<f64>> {
    if pqr.is_none() && spec.coefficients.forward_uses_backward() {
        return Err(Error::MissingBackwardData);
    }
    let grid = sol.grid;
    let n_steps = grid.num_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let atoms = spec.num_atoms();
    let intensities = spec.measure.intensities();
    let y0 = sol.y0();
    let lambda0 = spec.coefficients.initial_reward_deriv(y0);
    let rows: Vec<Result<Vec<f64>>> = (0..sol.num_paths())
        .into_par_iter()
        .map(|m| {
            let mut lam = vec![0.0; n_steps + 1];
            let mut h_a = vec![0.0; n_steps];
            lam[0] = lambda0;
            let mut kbuf = Vec::with_capacity(atoms);
            let mut rbuf = Vec::with_capacity(atoms);
            let zeros = vec![0.0; atoms];
            for n in 0..n_steps {
                let point = primal_point(sol, m, n, &mut kbuf);
                let mult = match pqr {
                    Some(a) => a.multipliers(m, n, &mut rbuf, lam[n]),
                    None => Multipliers {
                        p: 0.0,
                        q: 0.0,
                        r: &zeros,
                        lambda: lam[n],
                    },
                };
                let h_y = hamiltonian_partial(spec, &point, &mult, Variable::Y);
                let h_z = hamiltonian_partial(spec, &point, &mult, Variable::Z);
                h_a[n] = hamiltonian_partial(spec, &point, &mult, Variable::A);
                let delayed = if d == 0 {
                    h_a[n]
                } else if n + 1 >= d {
                    h_a[n + 1 - d]
                } else {
                    0.0
                };
                let mut next = lam[n] + (h_y + delayed) * dt + h_z * noise.db(m, n);
                for j in 0..atoms {
                    let h_k = hamiltonian_partial(spec, &point, &mult, Variable::K(j));
                    next += h_k / intensities[j] * noise.compensated(m, n, j);
                }
                if !next.is_finite() {
                    return Err(Error::NonFinite {
                        quantity: "lambda",
                        path: m,
                        step: n + 1,
                    });
                }
                lam[n + 1] = next;
            }
            Ok(lam)
        })
        .collect();
    let mut out = Array2::zeros((sol.num_paths(), n_steps + 1));
    for (m, row) in rows.into_iter().enumerate() {
        for (n, v) in row?.into_iter().enumerate() {
            out[[m, n]] = v;
        }
    }
    Ok(out)
}

/// Backward adjoint `(p, q, r)` with driver `dH/dx` and terminal value
/// `phi'(X_N) + lambda_N h'(X_N)`.
pub fn solve_adjoint_p(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    lambda: &Array2<f64>,
    noise: &NoiseBundle,
    projections: &[Projection],
) -> Result<AdjointP> {
    let n_steps = sol.grid.num_steps();
    let co = &*spec.coefficients;
    let terminal = Array1::from_shape_fn(sol.num_paths(), |m| {
        let x = sol.x[[m, n_steps]];
        let mut v = co.terminal_reward_deriv(x);
        if co.has_terminal_map() {
            v += lambda[[m, n_steps]] * co.terminal_map_deriv(x);
        }
        v
    });
    let driver = |m: usize, n: usize, adj: &Point<'_>| {
        let mut kbuf = Vec::new();
        let point = primal_point(sol, m, n, &mut kbuf);
        let mult = Multipliers {
            p: adj.y,
            q: adj.z,
            r: adj.k,
            lambda: lambda[[m, n]],
        };
        hamiltonian_partial(spec, &point, &mult, Variable::X)
    };
    let forward = ForwardPaths {
        x: sol.x.clone(),
        u: sol.u.clone(),
    };
    let cemetery = TerminalDatum::Constant(0.0);
    let out = BackwardProblem {
        noise,
        forward: &forward,
        projections,
        driver: &driver,
        cemetery: &cemetery,
    }
    .solve_with(terminal, |_, proj| Ok(Array1::zeros(proj.num_paths())))?;
    Ok(AdjointP {
        p: out.y,
        p_proxy: out.y_proxy,
        q: out.z,
        r: out.k,
    })
}

/// Block Picard iteration on the adjoint pair: `lambda` with zero feedback,
/// then alternate `(p, q, r)` and `lambda` until `lambda` settles.
pub fn solve_adjoints(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    noise: &NoiseBundle,
    estimator: &Estimator,
    options: AdjointOptions,
) -> Result<AdjointSolution> {
    let projections = step_projections(estimator, &sol.x, noise)?;
    solve_adjoints_with(spec, sol, noise, &projections, options)
}

pub fn solve_adjoints_with(
    spec: &FbsdeSpec,
    sol: &PredictiveSolution,
    noise: &NoiseBundle,
    projections: &[Projection],
    options: AdjointOptions,
) -> Result<AdjointSolution> {
    let zero = AdjointP {
        p: Array2::zeros(sol.y.dim()),
        p_proxy: Array2::zeros(sol.z.dim()),
        q: Array2::zeros(sol.z.dim()),
        r: Array3::zeros(sol.k.dim()),
    };
    let mut lambda = solve_adjoint_lambda(spec, sol, Some(&zero), noise)?;
    let mut sweeps = 0;
    let mut converged = false;
    let mut pqr = zero;
    while sweeps < options.max_sweeps.max(1) {
        sweeps += 1;
        pqr = solve_adjoint_p(spec, sol, &lambda, noise, projections)?;
        let next = solve_adjoint_lambda(spec, sol, Some(&pqr), noise)?;
        let change = (&next - &lambda)
            .mapv(|v| v * v)
            .mean()
            .unwrap_or(0.0)
            .sqrt();
        let exact = next == lambda;
        lambda = next;
        if change < options.tolerance {
            converged = true;
            if !exact {
                pqr = solve_adjoint_p(spec, sol, &lambda, noise, projections)?;
            }
            break;
        }
    }
    Ok(AdjointSolution {
        p: pqr.p,
        p_proxy: pqr.p_proxy,
        q: pqr.q,
        r: pqr.r,
        lambda,
        sweeps,
        converged,
    })
}

impl AdjointSolution {
    pub fn multipliers<'a>(&self, m: usize, n: usize, rbuf: &'a mut Vec<f64>) -> Multipliers<'a> {
        rbuf.clear();
        rbuf.extend((0..self.r.len_of(Axis(2))).map(|j| self.r[[m, n, j]]));
        Multipliers {
            p: self.p_proxy[[m, n]],
            q: self.q[[m, n]],
            r: rbuf,
            lambda: self.lambda[[m, n]],
        }
    }
}
