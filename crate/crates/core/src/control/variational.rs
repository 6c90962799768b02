//! Derivative processes of the state along a control direction `beta`:
//! forward Euler for `x`, predictive backward scheme for `(y, z, k)` with
//! the linearized driver and `y = 0` beyond the horizon.

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;

use super::adjoint::primal_point;
use crate::bsde::{step_projections, BackwardProblem, PredictiveSolution};
use crate::error::{Error, Result};
use crate::estimator::Estimator;
use crate::forward::ForwardPaths;
use crate::model::{Coefficient, FbsdeSpec, Point, TerminalDatum, Variable};
use crate::noise::NoiseBundle;

#[derive(Debug, Clone)]
pub struct VariationalSolution {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub a: Array2<f64>,
    pub z: Array2<f64>,
    pub k: Array3<f64>,
}

/// Linearization of the system around `sol` in the direction `beta`
/// (`M x N`). Forward coefficients that read backward data are not
/// supported.
pub fn solve_variational(
    spec: &FbsdeSpec,
    beta: &Array2<f64>,
    sol: &PredictiveSolution,
    noise: &NoiseBundle,
    estimator: &Estimator,
) -> Result<VariationalSolution> {
    if spec.coefficients.forward_uses_backward() {
        return Err(Error::InvalidParameter(
            "variational equations need forward coefficients free of (y, a, z, k)".into(),
        ));
    }
    let (paths, n_steps) = sol.z.dim();
    if beta.dim() != (paths, n_steps) {
        return Err(Error::InvalidParameter(format!(
            "direction {:?} does not match ({paths}, {n_steps})",
            beta.dim()
        )));
    }
    let dt = sol.grid.dt();
    let atoms = spec.num_atoms();
    let rows: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut xs = vec![0.0; n_steps + 1];
            let mut kbuf = Vec::new();
            for n in 0..n_steps {
                let p = primal_point(sol, m, n, &mut kbuf);
                let lin = |c: Coefficient, p: &Point<'_>| {
                    spec.partial(c, Variable::X, p) * xs[n]
                        + spec.partial(c, Variable::U, p) * beta[[m, n]]
                };
                let mut next = xs[n]
                    + lin(Coefficient::Drift, &p) * dt
                    + lin(Coefficient::Diffusion, &p) * noise.db(m, n);
                for j in 0..atoms {
                    next += lin(Coefficient::Jump(j), &p) * noise.compensated(m, n, j);
                }
                xs[n + 1] = next;
            }
            xs
        })
        .collect();
    let mut x = Array2::zeros((paths, n_steps + 1));
    for (m, row) in rows.into_iter().enumerate() {
        for (n, v) in row.into_iter().enumerate() {
            x[[m, n]] = v;
        }
    }

    let co = &*spec.coefficients;
    let terminal = Array1::from_shape_fn(paths, |m| {
        if co.has_terminal_map() {
            co.terminal_map_deriv(sol.x[[m, n_steps]]) * x[[m, n_steps]]
        } else {
            0.0
        }
    });
    let driver = |m: usize, n: usize, v: &Point<'_>| {
        let mut kbuf = Vec::new();
        let p = primal_point(sol, m, n, &mut kbuf);
        let d = |var: Variable| spec.partial(Coefficient::Driver, var, &p);
        let mut g = d(Variable::X) * x[[m, n]]
            + d(Variable::Y) * v.y
            + d(Variable::A) * v.a
            + d(Variable::Z) * v.z
            + d(Variable::U) * beta[[m, n]];
        for j in 0..atoms {
            g += d(Variable::K(j)) * v.k[j];
        }
        g
    };
    let projections = step_projections(estimator, &sol.x, noise)?;
    let forward = ForwardPaths {
        x: sol.x.clone(),
        u: sol.u.clone(),
    };
    let cemetery = TerminalDatum::Constant(0.0);
    let back = BackwardProblem {
        noise,
        forward: &forward,
        projections: &projections,
        driver: &driver,
        cemetery: &cemetery,
    }
    .solve_predictive(terminal)?;
    Ok(VariationalSolution {
        x,
        y: back.y,
        a: back.a,
        z: back.z,
        k: back.k,
    })
}
