//! Coefficient sets, terminal data and control policies for the coupled
//! forward–backward system.

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::noise::{JumpAtomMeasure, NoiseBundle};

/// State at which coefficients are evaluated. `k` has one entry per jump atom.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub u: f64,
}

impl<'a> Point<'a> {
    pub fn origin(t: f64, k: &'a [f64]) -> Self {
        Self {
            t,
            x: 0.0,
            y: 0.0,
            a: 0.0,
            z: 0.0,
            k,
            u: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coefficient {
    Drift,
    Diffusion,
    /// Jump coefficient for one atom.
    Jump(usize),
    Driver,
    RunningReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    X,
    Y,
    A,
    Z,
    K(usize),
    U,
}

impl Variable {
    /// All state/control variables for `atoms` jump atoms.
    pub fn all(atoms: usize) -> Vec<Variable> {
        let mut v = vec![Variable::X, Variable::Y, Variable::A, Variable::Z];
        v.extend((0..atoms).map(Variable::K));
        v.push(Variable::U);
        v
    }
}

/// Coefficients `b, sigma, gamma, g, f, phi, psi, h` of the controlled system.
/// Every map defaults to zero. Analytic partial derivatives may be supplied
/// through [`Coefficients::partial`]; anything left as `None` is obtained by
/// central finite differences.
pub trait Coefficients: Send + Sync {
    fn drift(&self, _p: &Point<'_>) -> f64 {
        0.0
    }
    fn diffusion(&self, _p: &Point<'_>) -> f64 {
        0.0
    }
    fn jump(&self, _p: &Point<'_>, _atom: usize, _mark: f64) -> f64 {
        0.0
    }
    fn driver(&self, _p: &Point<'_>) -> f64 {
        0.0
    }
    fn running_reward(&self, _p: &Point<'_>) -> f64 {
        0.0
    }
    fn terminal_reward(&self, _x: f64) -> f64 {
        0.0
    }
    fn terminal_reward_deriv(&self, _x: f64) -> f64 {
        0.0
    }
    fn initial_reward(&self, _y: f64) -> f64 {
        0.0
    }
    fn initial_reward_deriv(&self, _y: f64) -> f64 {
        0.0
    }
    /// `Y(T) = h(X(T))` when present; otherwise `Y(T)` is the terminal datum.
    fn has_terminal_map(&self) -> bool {
        false
    }
    fn terminal_map(&self, _x: f64) -> f64 {
        0.0
    }
    fn terminal_map_deriv(&self, _x: f64) -> f64 {
        0.0
    }
    /// Whether `b`, `sigma` or `gamma` read `(y, a, z, k)`.
    fn forward_uses_backward(&self) -> bool {
        false
    }
    fn partial(&self, _c: Coefficient, _v: Variable, _p: &Point<'_>) -> Option<f64> {
        None
    }
    /// Pointwise admissibility of a state/control pair.
    fn admissible(&self, _x: f64, _u: f64) -> bool {
        true
    }
}

/// Terminal/cemetery datum `L`, either a constant or a functional of
/// `(B(T), terminal jump counts)`.
#[derive(Clone)]
pub enum TerminalDatum {
    Constant(f64),
    Functional(Arc<dyn Fn(f64, &[u32]) -> f64 + Send + Sync>),
}

impl TerminalDatum {
    pub fn functional<F>(f: F) -> Self
    where
        F: Fn(f64, &[u32]) -> f64 + Send + Sync + 'static,
    {
        Self::Functional(Arc::new(f))
    }

    pub fn as_constant(&self) -> Option<f64> {
        match self {
            Self::Constant(c) => Some(*c),
            Self::Functional(_) => None,
        }
    }

    /// Per-path values of `L`.
    pub fn evaluate(&self, noise: &NoiseBundle) -> Vec<f64> {
        let n = noise.grid().num_steps();
        let levels = noise.brownian_level(n);
        (0..noise.num_paths())
            .map(|m| match self {
                Self::Constant(c) => *c,
                Self::Functional(f) => f(levels[m], &noise.terminal_jump_totals(m)),
            })
            .collect()
    }
}

impl fmt::Debug for TerminalDatum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Functional(_) => write!(f, "Functional(..)"),
        }
    }
}

/// Complete specification of a controlled predictive FBSDE.
#[derive(Clone)]
pub struct FbsdeSpec {
    pub coefficients: Arc<dyn Coefficients>,
    pub x0: f64,
    pub measure: JumpAtomMeasure,
    /// Value of `Y` on `(T, T + delta]`.
    pub cemetery: TerminalDatum,
}

impl fmt::Debug for FbsdeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FbsdeSpec")
            .field("x0", &self.x0)
            .field("measure", &self.measure)
            .field("cemetery", &self.cemetery)
            .finish_non_exhaustive()
    }
}

impl FbsdeSpec {
    pub fn new<C: Coefficients + 'static>(
        coefficients: C,
        x0: f64,
        measure: JumpAtomMeasure,
        cemetery: TerminalDatum,
    ) -> Self {
        Self {
            coefficients: Arc::new(coefficients),
            x0,
            measure,
            cemetery,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.measure.len()
    }

    pub fn evaluate(&self, c: Coefficient, p: &Point<'_>) -> f64 {
        let co = &*self.coefficients;
        match c {
            Coefficient::Drift => co.drift(p),
            Coefficient::Diffusion => co.diffusion(p),
            Coefficient::Jump(j) => co.jump(p, j, self.measure.atoms()[j].mark),
            Coefficient::Driver => co.driver(p),
            Coefficient::RunningReward => co.running_reward(p),
        }
    }

    /// `dc/dv` at `p`: analytic when registered, else a central difference
    /// with step `1e-6 (1 + |v|)`.
    pub fn partial(&self, c: Coefficient, v: Variable, p: &Point<'_>) -> f64 {
        if let Some(d) = self.coefficients.partial(c, v, p) {
            return d;
        }
        let base = read(v, p);
        let h = 1e-6 * (1.0 + base.abs());
        let mut kbuf = p.k.to_vec();
        let up = self.evaluate(c, &shifted(v, p, base + h, &mut kbuf));
        let mut kbuf2 = p.k.to_vec();
        let down = self.evaluate(c, &shifted(v, p, base - h, &mut kbuf2));
        (up - down) / (2.0 * h)
    }

    /// Compares supplied `h', phi', psi'` with central differences on `samples`.
    pub fn validate_derivatives(&self, samples: &[f64]) -> Result<()> {
        let co = &*self.coefficients;
        let checks: [(&str, &dyn Fn(f64) -> f64, &dyn Fn(f64) -> f64); 3] = [
            ("terminal map", &|x| co.terminal_map(x), &|x| {
                co.terminal_map_deriv(x)
            }),
            ("terminal reward", &|x| co.terminal_reward(x), &|x| {
                co.terminal_reward_deriv(x)
            }),
            ("initial reward", &|x| co.initial_reward(x), &|x| {
                co.initial_reward_deriv(x)
            }),
        ];
        for (name, f, df) in checks {
            for &x in samples {
                let h = 1e-5 * (1.0 + x.abs());
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let an = df(x);
                if !fd.is_finite() || !an.is_finite() {
                    continue;
                }
                if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
                    return Err(Error::InvalidParameter(format!(
                        "{name} derivative at {x}: supplied {an}, finite difference {fd}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn read(v: Variable, p: &Point<'_>) -> f64 {
    match v {
        Variable::X => p.x,
        Variable::Y => p.y,
        Variable::A => p.a,
        Variable::Z => p.z,
        Variable::K(j) => p.k[j],
        Variable::U => p.u,
    }
}

/// Copy of `p` with variable `v` set to `value`; `kbuf` backs the jump vector.
pub(crate) fn shifted<'a>(
    v: Variable,
    p: &Point<'_>,
    value: f64,
    kbuf: &'a mut [f64],
) -> Point<'a> {
    kbuf.copy_from_slice(p.k);
    let mut q = Point {
        t: p.t,
        x: p.x,
        y: p.y,
        a: p.a,
        z: p.z,
        k: &[],
        u: p.u,
    };
    match v {
        Variable::X => q.x = value,
        Variable::Y => q.y = value,
        Variable::A => q.a = value,
        Variable::Z => q.z = value,
        Variable::K(j) => kbuf[j] = value,
        Variable::U => q.u = value,
    }
    q.k = kbuf;
    q
}

/// How the control is produced.
#[derive(Clone)]
pub enum ControlLaw {
    Constant(f64),
    /// Deterministic value per step (length `N`).
    Schedule(Vec<f64>),
    /// Explicit `M x N` table; the caller guarantees adaptedness.
    Paths(Array2<f64>),
    /// `u_n = f(t_n, X_{n - lag})`.
    Feedback(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
    /// `base + scale * direction[m, n]`.
    Shifted {
        base: Box<ControlLaw>,
        direction: Arc<Array2<f64>>,
        scale: f64,
    },
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(c) => write!(f, "Constant({c})"),
            Self::Schedule(s) => write!(f, "Schedule(len {})", s.len()),
            Self::Paths(p) => write!(f, "Paths({:?})", p.dim()),
            Self::Feedback(_) => write!(f, "Feedback(..)"),
            Self::Shifted { base, scale, .. } => write!(f, "Shifted({base:?}, {scale})"),
        }
    }
}

/// Control law plus information lag `l` (`G_t = F_{(t - l dt)+}`).
#[derive(Debug, Clone)]
pub struct ControlPolicy {
    pub law: ControlLaw,
    pub lag: usize,
}

impl ControlPolicy {
    pub fn constant(u: f64) -> Self {
        Self {
            law: ControlLaw::Constant(u),
            lag: 0,
        }
    }

    pub fn schedule(values: Vec<f64>) -> Self {
        Self {
            law: ControlLaw::Schedule(values),
            lag: 0,
        }
    }

    pub fn paths(table: Array2<f64>) -> Self {
        Self {
            law: ControlLaw::Paths(table),
            lag: 0,
        }
    }

    pub fn feedback<F>(f: F, lag: usize) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            law: ControlLaw::Feedback(Arc::new(f)),
            lag,
        }
    }

    /// `self + scale * direction`, keeping the information lag.
    pub fn shifted(&self, direction: Arc<Array2<f64>>, scale: f64) -> Self {
        Self {
            law: ControlLaw::Shifted {
                base: Box::new(self.law.clone()),
                direction,
                scale,
            },
            lag: self.lag,
        }
    }

    /// Control at `(path, step)` given the state history of that path.
    pub fn value(&self, path: usize, step: usize, t: f64, x_history: &[f64]) -> f64 {
        law_value(&self.law, self.lag, path, step, t, x_history)
    }

    pub(crate) fn check_shape(&self, paths: usize, steps: usize) -> Result<()> {
        check_law(&self.law, paths, steps)
    }
}

fn law_value(law: &ControlLaw, lag: usize, path: usize, step: usize, t: f64, xs: &[f64]) -> f64 {
    match law {
        ControlLaw::Constant(c) => *c,
        ControlLaw::Schedule(s) => s[step],
        ControlLaw::Paths(p) => p[[path, step]],
        ControlLaw::Feedback(f) => f(t, xs[step.saturating_sub(lag)]),
        ControlLaw::Shifted {
            base,
            direction,
            scale,
        } => law_value(base, lag, path, step, t, xs) + scale * direction[[path, step]],
    }
}

fn check_law(law: &ControlLaw, paths: usize, steps: usize) -> Result<()> {
    match law {
        ControlLaw::Schedule(s) if s.len() != steps => Err(Error::InvalidParameter(format!(
            "schedule has {} entries for {steps} steps",
            s.len()
        ))),
        ControlLaw::Paths(p) if p.dim() != (paths, steps) => Err(Error::InvalidParameter(format!(
            "control table {:?} does not match ({paths}, {steps})",
            p.dim()
        ))),
        ControlLaw::Shifted {
            base, direction, ..
        } => {
            if direction.dim() != (paths, steps) {
                return Err(Error::InvalidParameter(format!(
                    "perturbation {:?} does not match ({paths}, {steps})",
                    direction.dim()
                )));
            }
            check_law(base, paths, steps)
        }
        _ => Ok(()),
    }
}
