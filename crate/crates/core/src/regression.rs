//! Least-squares projections used as conditional-expectation estimators.
//!
//! Regressors are standardized per step; columns with no spread are dropped
//! (they are spanned by the intercept). The basis is every monomial of total
//! degree at most `degree` in the surviving columns.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalue ratio below which the Gram matrix counts as rank deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Fit {
    pub fitted: Array1<f64>,
    /// Coefficients on the standardized monomial basis.
    pub coefficients: Vec<f64>,
    pub residual_std: f64,
    pub ridge: bool,
}

impl Fit {
    /// Typical standard error of a fitted value, `s * sqrt(P / M)`.
    pub fn standard_error(&self) -> f64 {
        let m = self.fitted.len().max(1) as f64;
        self.residual_std * (self.coefficients.len() as f64 / m).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDiagnostics {
    pub basis_size: usize,
    pub ridge: bool,
}

/// A fixed linear projection onto functions of the step's observables.
#[derive(Debug, Clone)]
pub struct Projection {
    kind: Kind,
    paths: usize,
}

#[derive(Debug, Clone)]
enum Kind {
    Regression {
        design: Array2<f64>,
        gram_inv: Array2<f64>,
        ridge: bool,
    },
    /// Exact averaging within groups of paths sharing an information set.
    Groups { labels: Vec<usize>, groups: usize },
}

impl Projection {
    /// Polynomial regression on the columns of `features` (`M x R`).
    pub fn regression(features: ArrayView2<'_, f64>, degree: usize) -> Result<Self> {
        let (m, r) = features.dim();
        let mut columns: Vec<Array1<f64>> = Vec::with_capacity(r);
        for c in 0..r {
            let col = features.column(c);
            let mean = col.sum() / m.max(1) as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.max(1) as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                columns.push(col.mapv(|v| (v - mean) / sd));
            }
        }
        let exponents = monomials(columns.len(), if columns.is_empty() { 0 } else { degree });
        let p = exponents.len();
        if m <= p {
            return Err(Error::DegenerateRegression {
                step: usize::MAX,
                reason: format!("{m} paths for {p} basis functions"),
            });
        }
        let mut design = Array2::<f64>::ones((m, p));
        for (k, exps) in exponents.iter().enumerate() {
            for (c, &e) in exps.iter().enumerate() {
                if e == 0 {
                    continue;
                }
                let col = &columns[c];
                let mut dk = design.column_mut(k);
                dk.zip_mut_with(col, |d, &v| *d *= v.powi(e as i32));
            }
        }
        let gram = design.t().dot(&design) / m as f64;
        let (gram_inv, ridge) = invert_gram(&gram);
        Ok(Self {
            kind: Kind::Regression {
                design,
                gram_inv,
                ridge,
            },
            paths: m,
        })
    }

    /// Intercept-only projection (sample mean).
    pub fn mean(paths: usize) -> Self {
        Self {
            kind: Kind::Groups {
                labels: vec![0; paths],
                groups: 1,
            },
            paths,
        }
    }

    /// Exact within-group averaging; `labels[m]` is the group of path `m`.
    pub fn groups(labels: Vec<usize>) -> Self {
        let groups = labels.iter().copied().max().map_or(0, |g| g + 1);
        let paths = labels.len();
        Self {
            kind: Kind::Groups { labels, groups },
            paths,
        }
    }

    pub fn num_paths(&self) -> usize {
        self.paths
    }

    pub fn basis_size(&self) -> usize {
        match &self.kind {
            Kind::Regression { design, .. } => design.ncols(),
            Kind::Groups { groups, .. } => *groups,
        }
    }

    pub fn ridge(&self) -> bool {
        matches!(self.kind, Kind::Regression { ridge: true, .. })
    }

    pub fn diagnostics(&self) -> ProjectionDiagnostics {
        ProjectionDiagnostics {
            basis_size: self.basis_size(),
            ridge: self.ridge(),
        }
    }

    pub fn project(&self, targets: ArrayView1<'_, f64>) -> Array1<f64> {
        self.coefficients_and_fit(targets).1
    }

    pub fn fit(&self, targets: ArrayView1<'_, f64>) -> Fit {
        let (coefficients, fitted) = self.coefficients_and_fit(targets);
        let m = targets.len();
        let p = self.basis_size();
        let sse: f64 = targets
            .iter()
            .zip(fitted.iter())
            .map(|(t, f)| (t - f) * (t - f))
            .sum();
        let dof = m.saturating_sub(p).max(1) as f64;
        Fit {
            fitted,
            coefficients,
            residual_std: (sse / dof).sqrt(),
            ridge: self.ridge(),
        }
    }

    fn coefficients_and_fit(&self, targets: ArrayView1<'_, f64>) -> (Vec<f64>, Array1<f64>) {
        assert_eq!(targets.len(), self.paths, "target length mismatch");
        // Same arithmetic for strided and contiguous inputs.
        let targets = targets.to_owned();
        match &self.kind {
            Kind::Regression {
                design, gram_inv, ..
            } => {
                let rhs = design.t().dot(&targets) / self.paths as f64;
                let coef = gram_inv.dot(&rhs);
                // Constants lie in the span; return them without rounding.
                let first = targets.first().copied().unwrap_or(0.0);
                let fitted = if targets.iter().all(|&t| t == first) {
                    Array1::from_elem(self.paths, first)
                } else {
                    design.dot(&coef)
                };
                (coef.to_vec(), fitted)
            }
            Kind::Groups { labels, groups } => {
                let mut sums = vec![0.0; *groups];
                let mut counts = vec![0usize; *groups];
                for (&g, &t) in labels.iter().zip(targets.iter()) {
                    sums[g] += t;
                    counts[g] += 1;
                }
                let means: Vec<f64> = sums
                    .iter()
                    .zip(&counts)
                    .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                    .collect();
                let fitted = labels.iter().map(|&g| means[g]).collect();
                (means, fitted)
            }
        }
    }
}

/// Inverse of a symmetric positive semidefinite Gram matrix. When the spectrum
/// is too spread the fallback is the spectrally truncated pseudo-inverse, and
/// the returned flag is set.
fn invert_gram(gram: &Array2<f64>) -> (Array2<f64>, bool) {
    let p = gram.nrows();
    let g = DMatrix::from_fn(p, p, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]]));
    let eig = SymmetricEigen::new(g);
    let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ridge = !(min > RANK_TOL * max);
    let mut inv = Array2::zeros((p, p));
    for k in 0..p {
        // Directions in the numerical null space carry only rounding noise.
        if eig.eigenvalues[k] <= RANK_TOL * max {
            continue;
        }
        let lam = eig.eigenvalues[k];
        for i in 0..p {
            let vi = eig.eigenvectors[(i, k)] / lam;
            for j in 0..p {
                inv[[i, j]] += vi * eig.eigenvectors[(j, k)];
            }
        }
    }
    (inv, ridge)
}

/// Exponent vectors of all monomials in `vars` variables with total degree
/// at most `degree`, ordered by degree.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; vars]];
    for total in 1..=degree {
        let mut current = vec![0u32; vars];
        fill(&mut out, &mut current, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, current: &mut Vec<u32>, pos: usize, remaining: u32) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    if current.is_empty() {
        return;
    }
    for e in (0..=remaining).rev() {
        current[pos] = e;
        fill(out, current, pos + 1, remaining - e);
    }
    current[pos] = 0;
}

/// One-shot least-squares estimate of `E[targets | regressors]`.
pub fn condexp_fit(
    targets: ArrayView1<'_, f64>,
    regressors: ArrayView2<'_, f64>,
    degree: usize,
) -> Result<Fit> {
    Ok(Projection::regression(regressors, degree)?.fit(targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(1, 2), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(monomials(0, 3).len(), 1);
        assert_eq!(monomials(3, 0).len(), 1);
    }

    #[test]
    fn constant_targets_are_reproduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((500, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let t = Array1::from_elem(500, 3.25);
        let fit = condexp_fit(t.view(), x.view(), 3).unwrap();
        assert!(fit.fitted.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn exact_quadratic_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((1000, 1), |_| 1.0 + rng.sample::<f64, _>(StandardNormal));
        let t = x.column(0).mapv(|v| v * v);
        let fit = condexp_fit(t.view(), x.view(), 2).unwrap();
        for (a, b) in fit.fitted.iter().zip(t.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!(!fit.ridge);
    }

    #[test]
    fn brownian_martingale_regression() {
        // E[B(T) | B(t)] = B(t): slope 1, intercept 0.
        let m = 100_000;
        let t: f64 = 0.4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bt: Vec<f64> = (0..m)
            .map(|_| t.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let b_end: Vec<f64> = bt
            .iter()
            .map(|b| b + (1.0 - t).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        // plain OLS slope/intercept from the fitted values
        let x = Array2::from_shape_vec((m, 1), bt.clone()).unwrap();
        let fit = condexp_fit(Array1::from(b_end).view(), x.view(), 1).unwrap();
        let (x0, x1) = (bt[0], bt[1]);
        let slope = (fit.fitted[1] - fit.fitted[0]) / (x1 - x0);
        let intercept = fit.fitted[0] - slope * x0;
        let sd_slope = ((1.0 - t) / (m as f64 * t)).sqrt();
        let sd_int = ((1.0 - t) / m as f64).sqrt();
        assert!((slope - 1.0).abs() < 3.0 * sd_slope, "slope {slope}");
        assert!(intercept.abs() < 3.0 * sd_int, "intercept {intercept}");
    }

    #[test]
    fn constant_regressor_dropped() {
        let x = Array2::from_elem((50, 1), 2.0);
        let t = Array1::from_iter((0..50).map(|i| i as f64));
        let p = Projection::regression(x.view(), 3).unwrap();
        assert_eq!(p.basis_size(), 1);
        let f = p.project(t.view());
        assert!(f.iter().all(|v| (v - 24.5).abs() < 1e-12));
    }

    #[test]
    fn collinear_columns_take_ridge_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base: Vec<f64> = (0..400).map(|_| rng.sample(StandardNormal)).collect();
        let x = Array2::from_shape_fn(
            (400, 2),
            |(i, j)| if j == 0 { base[i] } else { 2.0 * base[i] + 1.0 },
        );
        let t = Array1::from_iter(base.iter().map(|b| 3.0 * b));
        let fit = condexp_fit(t.view(), x.view(), 1).unwrap();
        assert!(fit.ridge);
        for (a, b) in fit.fitted.iter().zip(t.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_paths() {
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i * (j + 1)) as f64 + (j as f64).sin());
        assert!(Projection::regression(x.view(), 3).is_err());
    }

    #[test]
    fn groups_average_exactly() {
        let p = Projection::groups(vec![0, 0, 1, 1]);
        let f = p.project(Array1::from(vec![1.0, 3.0, 5.0, 9.0]).view());
        assert_eq!(f.to_vec(), vec![2.0, 2.0, 7.0, 7.0]);
    }

    #[test]
    fn projection_is_idempotent_and_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((300, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let p = Projection::regression(x.view(), 2).unwrap();
        let a = Array1::from_iter((0..300).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let b = Array1::from_iter((0..300).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let pa = p.project(a.view());
        let ppa = p.project(pa.view());
        assert!(pa
            .iter()
            .zip(ppa.iter())
            .all(|(u, v)| (u - v).abs() < 1e-10));
        let pb = p.project(b.view());
        let lhs = pa.dot(&b);
        let rhs = a.dot(&pb);
        assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        let _ = x.sum_axis(Axis(0));
    }
}
