//! Exact search for the optimal control on a binary tree.
//!
//! The tree carries `dB = ±sqrt(dt)` with no jumps. Node `i` at depth `n`
//! has children `2i` (up) and `2i + 1` (down), matching the path order of
//! [`NoiseBundle::binary_tree`]. Conditional expectations are exact averages
//! over children, so the search optimizes the same discrete scheme the
//! solvers use, without regression error.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{Coefficient, ControlPolicy, FbsdeSpec, Point, TerminalDatum, Variable};
use crate::noise::NoiseBundle;

/// Largest number of control tables enumerated exhaustively.
pub const MAX_ENUMERATION: u64 = 10_000_000;
/// Largest tree depth accepted.
pub const MAX_STEPS: usize = 5;
/// Largest control grid accepted.
pub const MAX_CONTROLS: usize = 9;

/// Control per node: `table[n][i]` for depth `n < N`, `i < 2^n`.
pub type ControlTable = Vec<Vec<f64>>;

/// Node values of the discrete scheme under a fixed control table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEvaluation {
    /// `x[n][i]` for `n <= N`.
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    /// `z[n][i]` and `a[n][i]` for `n < N`.
    pub z: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    /// `J`, or `-inf` when some node is inadmissible.
    pub value: f64,
    pub admissible: bool,
}

impl TreeEvaluation {
    /// Node values expanded to the `2^N` paths of the binary-tree bundle.
    pub fn path_values(level: &[Vec<f64>], num_steps: usize) -> Array2<f64> {
        let paths = 1usize << num_steps;
        Array2::from_shape_fn((paths, level.len()), |(m, n)| {
            level[n][m >> (num_steps - n)]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    Enumeration,
    DynamicProgramming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub table: ControlTable,
    /// Grid indices of `table`.
    pub indices: Vec<Vec<usize>>,
    pub value: f64,
    pub mode: SearchMode,
    pub evaluations: u64,
}

impl OracleResult {
    /// Policy reproducing the table on the binary-tree bundle.
    pub fn policy(&self, num_steps: usize) -> ControlPolicy {
        table_policy(&self.table, num_steps)
    }
}

pub fn table_policy(table: &ControlTable, num_steps: usize) -> ControlPolicy {
    ControlPolicy::paths(TreeEvaluation::path_values(table, num_steps))
}

fn check_instance(spec: &FbsdeSpec, grid: &TimeGrid) -> Result<()> {
    if grid.num_steps() > MAX_STEPS {
        return Err(Error::TooLarge(format!(
            "{} steps (at most {MAX_STEPS})",
            grid.num_steps()
        )));
    }
    if !spec.measure.is_empty() {
        return Err(Error::InvalidParameter("tree oracle requires J = 0".into()));
    }
    if spec.coefficients.forward_uses_backward() {
        return Err(Error::InvalidParameter(
            "tree oracle requires forward coefficients free of (y, a, z, k)".into(),
        ));
    }
    Ok(())
}

fn leaf_datum(datum: &TerminalDatum, level: f64) -> f64 {
    match datum {
        TerminalDatum::Constant(c) => *c,
        TerminalDatum::Functional(f) => f(level, &[]),
    }
}

/// Brownian level `B_N` at leaf `i`.
fn leaf_level(i: usize, num_steps: usize, h: f64) -> f64 {
    let downs = i.count_ones() as f64;
    h * (num_steps as f64 - 2.0 * downs)
}

/// Independent recursive evaluation of the discrete scheme on the tree.
pub fn evaluate_tree(
    spec: &FbsdeSpec,
    grid: &TimeGrid,
    table: &ControlTable,
) -> Result<TreeEvaluation> {
    check_instance(spec, grid)?;
    let n_steps = grid.num_steps();
    for (n, row) in table.iter().enumerate() {
        if row.len() != 1 << n {
            return Err(Error::InvalidParameter(format!(
                "control row {n} has {} entries, expected {}",
                row.len(),
                1 << n
            )));
        }
    }
    if table.len() != n_steps {
        return Err(Error::InvalidParameter(format!(
            "control table has {} rows, expected {n_steps}",
            table.len()
        )));
    }
    Ok(evaluate_unchecked(spec, grid, table))
}

fn evaluate_unchecked(spec: &FbsdeSpec, grid: &TimeGrid, table: &ControlTable) -> TreeEvaluation {
    let co = &*spec.coefficients;
    let n_steps = grid.num_steps();
    let d = grid.delay_steps();
    let dt = grid.dt();
    let h = dt.sqrt();

    let mut x: Vec<Vec<f64>> = vec![vec![spec.x0]];
    let mut admissible = true;
    for n in 0..n_steps {
        let t = grid.time(n);
        let next: Vec<f64> = (0..1usize << (n + 1))
            .map(|c| {
                let i = c >> 1;
                let u = table[n][i];
                let p = Point {
                    t,
                    x: x[n][i],
                    y: 0.0,
                    a: 0.0,
                    z: 0.0,
                    k: &[],
                    u,
                };
                let sign = if c & 1 == 0 { 1.0 } else { -1.0 };
                x[n][i] + co.drift(&p) * dt + co.diffusion(&p) * sign * h
            })
            .collect();
        for i in 0..1usize << n {
            admissible &= co.admissible(x[n][i], table[n][i]);
        }
        x.push(next);
    }

    let leaves = 1usize << n_steps;
    let cemetery: Vec<f64> = (0..leaves)
        .map(|i| leaf_datum(&spec.cemetery, leaf_level(i, n_steps, h)))
        .collect();
    let mut y: Vec<Vec<f64>> = vec![Vec::new(); n_steps + 1];
    y[n_steps] = (0..leaves)
        .map(|i| {
            if co.has_terminal_map() {
                co.terminal_map(x[n_steps][i])
            } else {
                cemetery[i]
            }
        })
        .collect();
    let mut z = vec![Vec::new(); n_steps];
    let mut a = vec![Vec::new(); n_steps];
    for n in (0..n_steps).rev() {
        let t = grid.time(n);
        let width = 1usize << n;
        let mut yn = Vec::with_capacity(width);
        let mut zn = Vec::with_capacity(width);
        let mut an = Vec::with_capacity(width);
        for i in 0..width {
            let up = y[n + 1][2 * i];
            let dn = y[n + 1][2 * i + 1];
            let yhat = 0.5 * (up + dn);
            let zz = ((up - yhat) * h - (dn - yhat) * h) / 2.0 / dt;
            let aa = if d == 0 {
                yhat
            } else if n + d <= n_steps {
                let span = 1usize << d;
                let row = &y[n + d][i * span..(i + 1) * span];
                row.iter().sum::<f64>() / span as f64
            } else {
                let span = 1usize << (n_steps - n);
                let row = &cemetery[i * span..(i + 1) * span];
                row.iter().sum::<f64>() / span as f64
            };
            let p = Point {
                t,
                x: x[n][i],
                y: yhat,
                a: aa,
                z: zz,
                k: &[],
                u: table[n][i],
            };
            yn.push(yhat + co.driver(&p) * dt);
            zn.push(zz);
            an.push(aa);
        }
        y[n] = yn;
        z[n] = zn;
        a[n] = an;
    }

    let mut reward = 0.0;
    for i in 0..leaves {
        let mut v = co.terminal_reward(x[n_steps][i]);
        for n in 0..n_steps {
            let j = i >> (n_steps - n);
            let p = Point {
                t: grid.time(n),
                x: x[n][j],
                y: y[n][j],
                a: a[n][j],
                z: z[n][j],
                k: &[],
                u: table[n][j],
            };
            v += co.running_reward(&p) * dt;
        }
        reward += v;
    }
    let value = reward / leaves as f64 + co.initial_reward(y[0][0]);
    TreeEvaluation {
        x,
        y,
        z,
        a,
        value: if admissible && value.is_finite() {
            value
        } else {
            f64::NEG_INFINITY
        },
        admissible,
    }
}

fn decode(mut code: u64, base: u64, n_steps: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        let row: Vec<usize> = (0..1usize << n)
            .map(|_| {
                let r = (code % base) as usize;
                code /= base;
                r
            })
            .collect();
        out.push(row);
    }
    out
}

fn to_table(indices: &[Vec<usize>], controls: &[f64]) -> ControlTable {
    indices
        .iter()
        .map(|row| row.iter().map(|&i| controls[i]).collect())
        .collect()
}

/// Exact optimum over all adapted control tables with values in `controls`.
///
/// Small instances are enumerated exhaustively. Larger ones fall back to a
/// dynamic programme, valid when the driver does not read `(a, z)` and the
/// objective is either an increasing `psi(Y_0)` or purely rewards; other
/// large instances are rejected. Ties go to the smallest grid index.
pub fn brute_force_oracle(
    spec: &FbsdeSpec,
    grid: &TimeGrid,
    controls: &[f64],
) -> Result<OracleResult> {
    check_instance(spec, grid)?;
    if controls.is_empty() || controls.len() > MAX_CONTROLS {
        return Err(Error::InvalidParameter(format!(
            "control grid of {} points (1 to {MAX_CONTROLS} allowed)",
            controls.len()
        )));
    }
    let n_steps = grid.num_steps();
    let nodes = (1u32 << n_steps) - 1;
    let base = controls.len() as u64;
    let total = base.checked_pow(nodes).filter(|&t| t <= MAX_ENUMERATION);
    match total {
        Some(total) => Ok(enumerate(spec, grid, controls, total)),
        None => dynamic_programme(spec, grid, controls),
    }
}

fn enumerate(spec: &FbsdeSpec, grid: &TimeGrid, controls: &[f64], total: u64) -> OracleResult {
    let n_steps = grid.num_steps();
    let base = controls.len() as u64;
    let (value, code) = (0..total)
        .into_par_iter()
        .map(|code| {
            let table = to_table(&decode(code, base, n_steps), controls);
            (evaluate_unchecked(spec, grid, &table).value, code)
        })
        .reduce(
            || (f64::NEG_INFINITY, u64::MAX),
            |l, r| {
                if r.0 > l.0 || (r.0 == l.0 && r.1 < l.1) {
                    r
                } else {
                    l
                }
            },
        );
    let code = if code == u64::MAX { 0 } else { code };
    let indices = decode(code, base, n_steps);
    OracleResult {
        table: to_table(&indices, controls),
        indices,
        value,
        mode: SearchMode::Enumeration,
        evaluations: total,
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Initial,
    Rewards,
}

struct Programme<'a> {
    spec: &'a FbsdeSpec,
    grid: &'a TimeGrid,
    controls: &'a [f64],
    objective: Objective,
    calls: u64,
    violation: Option<String>,
}

impl Programme<'_> {
    /// Best subtree value at node `(n, i)` with state `x`, and its argmax.
    fn best(&mut self, n: usize, i: usize, x: f64) -> (f64, usize) {
        self.calls += 1;
        let co = &*self.spec.coefficients;
        let n_steps = self.grid.num_steps();
        let dt = self.grid.dt();
        let h = dt.sqrt();
        if n == n_steps {
            let v = match self.objective {
                Objective::Rewards => co.terminal_reward(x),
                Objective::Initial if co.has_terminal_map() => co.terminal_map(x),
                Objective::Initial => leaf_datum(&self.spec.cemetery, leaf_level(i, n_steps, h)),
            };
            return (v, 0);
        }
        let t = self.grid.time(n);
        let mut best = (f64::NEG_INFINITY, 0);
        for (ci, &u) in self.controls.iter().enumerate() {
            if !co.admissible(x, u) {
                continue;
            }
            let p = Point {
                t,
                x,
                y: 0.0,
                a: 0.0,
                z: 0.0,
                k: &[],
                u,
            };
            let (b, s) = (co.drift(&p), co.diffusion(&p));
            let up = self.best(n + 1, 2 * i, x + b * dt + s * h).0;
            let dn = self.best(n + 1, 2 * i + 1, x + b * dt - s * h).0;
            let mean = 0.5 * (up + dn);
            let v = match self.objective {
                Objective::Rewards => co.running_reward(&p) * dt + mean,
                Objective::Initial => {
                    let q = Point { y: mean, ..p };
                    for var in [Variable::A, Variable::Z] {
                        let g = self.spec.partial(Coefficient::Driver, var, &q);
                        if g.abs() > 1e-9 {
                            self.violation = Some(format!("driver depends on {var:?}"));
                        }
                    }
                    let gy = self.spec.partial(Coefficient::Driver, Variable::Y, &q);
                    if 1.0 + gy * dt < 0.0 {
                        self.violation = Some("Y_n decreasing in E_n[Y_n+1]".into());
                    }
                    mean + co.driver(&q) * dt
                }
            };
            if v > best.0 {
                best = (v, ci);
            }
        }
        best
    }

    fn trace(&mut self, n: usize, i: usize, x: f64, indices: &mut [Vec<usize>]) {
        if n == self.grid.num_steps() {
            return;
        }
        let (_, ci) = self.best(n, i, x);
        indices[n][i] = ci;
        let co = &*self.spec.coefficients;
        let dt = self.grid.dt();
        let h = dt.sqrt();
        let p = Point {
            t: self.grid.time(n),
            x,
            y: 0.0,
            a: 0.0,
            z: 0.0,
            k: &[],
            u: self.controls[ci],
        };
        let (b, s) = (co.drift(&p), co.diffusion(&p));
        self.trace(n + 1, 2 * i, x + b * dt + s * h, indices);
        self.trace(n + 1, 2 * i + 1, x + b * dt - s * h, indices);
    }
}

fn dynamic_programme(spec: &FbsdeSpec, grid: &TimeGrid, controls: &[f64]) -> Result<OracleResult> {
    let n_steps = grid.num_steps();
    let cost = (2 * controls.len() as u64).pow(n_steps as u32);
    if cost > MAX_ENUMERATION {
        return Err(Error::TooLarge(format!(
            "dynamic programme needs {cost} evaluations"
        )));
    }
    // Classify the objective from the uncontrolled zero table.
    let probe = evaluate_unchecked(spec, grid, &vec_table(n_steps, controls[0]));
    let co = &*spec.coefficients;
    let mut has_rewards = false;
    for (n, row) in probe.x.iter().enumerate() {
        for &x in row {
            has_rewards |= co.terminal_reward(x) != 0.0;
            if n < n_steps {
                for &u in controls {
                    let p = Point {
                        t: grid.time(n),
                        x,
                        y: 0.0,
                        a: 0.0,
                        z: 0.0,
                        k: &[],
                        u,
                    };
                    has_rewards |= co.running_reward(&p) != 0.0;
                }
            }
        }
    }
    let slope = co.initial_reward_deriv(probe.y[0][0]);
    let objective = match (has_rewards, slope != 0.0) {
        (true, false) => Objective::Rewards,
        (false, true) if slope > 0.0 => Objective::Initial,
        (false, false) => Objective::Rewards,
        _ => return Err(Error::TooLarge(
            "objective mixes rewards with psi(Y_0) or psi is decreasing; only enumeration applies"
                .into(),
        )),
    };
    let mut prog = Programme {
        spec,
        grid,
        controls,
        objective,
        calls: 0,
        violation: None,
    };
    let mut indices: Vec<Vec<usize>> = (0..n_steps).map(|n| vec![0; 1 << n]).collect();
    prog.trace(0, 0, spec.x0, &mut indices);
    if let Some(reason) = prog.violation {
        return Err(Error::TooLarge(format!(
            "dynamic programme not valid: {reason}"
        )));
    }
    let table = to_table(&indices, controls);
    let value = evaluate_unchecked(spec, grid, &table).value;
    Ok(OracleResult {
        table,
        indices,
        value,
        mode: SearchMode::DynamicProgramming,
        evaluations: prog.calls,
    })
}

fn vec_table(n_steps: usize, u: f64) -> ControlTable {
    (0..n_steps).map(|n| vec![u; 1 << n]).collect()
}

/// Builds the binary-tree bundle used by the oracle.
pub fn tree_noise(grid: TimeGrid) -> Result<NoiseBundle> {
    NoiseBundle::binary_tree(grid)
}
