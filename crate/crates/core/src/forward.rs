//! Euler–Maruyama simulation of the forward state with jumps.

use ndarray::Array2;
use rayon::prelude::*;

use crate::bsde::PredictiveSolution;
use crate::error::{Error, Result};
use crate::model::{ControlPolicy, FbsdeSpec, Point};
use crate::noise::NoiseBundle;

/// Forward paths `X` (`M x (N+1)`) with the realized control `u` (`M x N`).
#[derive(Debug, Clone)]
pub struct ForwardPaths {
    pub x: Array2<f64>,
    pub u: Array2<f64>,
}

/// `X_{n+1} = X_n + b dt + sigma dB_n + sum_j gamma_j dÑ_{n,j}`, all
/// coefficients at step `n`. Backward data is required when the forward
/// coefficients read `(y, a, z, k)`.
pub fn simulate_forward(
    spec: &FbsdeSpec,
    policy: &ControlPolicy,
    noise: &NoiseBundle,
    backward: Option<&PredictiveSolution>,
) -> Result<ForwardPaths> {
    let grid = noise.grid();
    let n_steps = grid.num_steps();
    let paths = noise.num_paths();
    let atoms = spec.num_atoms();
    if atoms != noise.num_atoms() {
        return Err(Error::InvalidParameter(format!(
            "spec has {atoms} jump atoms, noise has {}",
            noise.num_atoms()
        )));
    }
    if spec.coefficients.forward_uses_backward() && backward.is_none() {
        return Err(Error::MissingBackwardData);
    }
    policy.check_shape(paths, n_steps)?;
    let dt = grid.dt();
    let co = &*spec.coefficients;
    let marks = spec.measure.marks();

    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut xs = Vec::with_capacity(n_steps + 1);
            let mut us = Vec::with_capacity(n_steps);
            xs.push(spec.x0);
            let mut kbuf = vec![0.0; atoms];
            for n in 0..n_steps {
                let t = grid.time(n);
                let u = policy.value(m, n, t, &xs);
                let (y, a, z) = match backward {
                    Some(b) => {
                        for (j, k) in kbuf.iter_mut().enumerate() {
                            *k = b.k[[m, n, j]];
                        }
                        (b.y[[m, n]], b.a[[m, n]], b.z[[m, n]])
                    }
                    None => (0.0, 0.0, 0.0),
                };
                let p = Point {
                    t,
                    x: xs[n],
                    y,
                    a,
                    z,
                    k: &kbuf,
                    u,
                };
                let mut next = xs[n] + co.drift(&p) * dt + co.diffusion(&p) * noise.db(m, n);
                for (j, &mark) in marks.iter().enumerate() {
                    next += co.jump(&p, j, mark) * noise.compensated(m, n, j);
                }
                if !next.is_finite() {
                    return Err(Error::NonFinite {
                        quantity: "X",
                        path: m,
                        step: n + 1,
                    });
                }
                us.push(u);
                xs.push(next);
            }
            Ok((xs, us))
        })
        .collect();

    let mut x = Array2::zeros((paths, n_steps + 1));
    let mut u = Array2::zeros((paths, n_steps));
    for (m, row) in rows.into_iter().enumerate() {
        let (xs, us) = row?;
        for (n, v) in xs.into_iter().enumerate() {
            x[[m, n]] = v;
        }
        for (n, v) in us.into_iter().enumerate() {
            u[[m, n]] = v;
        }
    }
    Ok(ForwardPaths { x, u })
}
