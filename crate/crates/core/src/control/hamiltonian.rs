//! Hamiltonian `H = f + b p + sigma q + sum_j gamma_j r_j nu_j + g lambda`
//! and its partial derivatives.

use serde::{Deserialize, Serialize};

use crate::model::{Coefficient, FbsdeSpec, Point, Variable};

/// Adjoint values paired with the state in the Hamiltonian.
#[derive(Debug, Clone, Copy)]
pub struct Multipliers<'a> {
    pub p: f64,
    pub q: f64,
    /// One entry per jump atom.
    pub r: &'a [f64],
    pub lambda: f64,
}

/// Owned evaluation point of the Hamiltonian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianInputs {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub a: f64,
    pub z: f64,
    pub k: Vec<f64>,
    pub u: f64,
    pub p: f64,
    pub q: f64,
    pub r: Vec<f64>,
    pub lambda: f64,
}

impl HamiltonianInputs {
    pub fn point(&self) -> Point<'_> {
        Point {
            t: self.t,
            x: self.x,
            y: self.y,
            a: self.a,
            z: self.z,
            k: &self.k,
            u: self.u,
        }
    }

    pub fn multipliers(&self) -> Multipliers<'_> {
        Multipliers {
            p: self.p,
            q: self.q,
            r: &self.r,
            lambda: self.lambda,
        }
    }
}

pub fn hamiltonian(spec: &FbsdeSpec, inputs: &HamiltonianInputs) -> f64 {
    hamiltonian_at(spec, &inputs.point(), &inputs.multipliers())
}

pub fn hamiltonian_at(spec: &FbsdeSpec, point: &Point<'_>, m: &Multipliers<'_>) -> f64 {
    let co = &*spec.coefficients;
    let mut h = co.running_reward(point)
        + co.drift(point) * m.p
        + co.diffusion(point) * m.q
        + co.driver(point) * m.lambda;
    for (j, atom) in spec.measure.atoms().iter().enumerate() {
        h += co.jump(point, j, atom.mark) * m.r[j] * atom.intensity;
    }
    h
}

/// `dH/dv`, built from the partials of each coefficient. Terms whose
/// multiplier vanishes are skipped.
pub fn hamiltonian_partial(
    spec: &FbsdeSpec,
    point: &Point<'_>,
    m: &Multipliers<'_>,
    v: Variable,
) -> f64 {
    let mut d = spec.partial(Coefficient::RunningReward, v, point);
    if m.p != 0.0 {
        d += m.p * spec.partial(Coefficient::Drift, v, point);
    }
    if m.q != 0.0 {
        d += m.q * spec.partial(Coefficient::Diffusion, v, point);
    }
    if m.lambda != 0.0 {
        d += m.lambda * spec.partial(Coefficient::Driver, v, point);
    }
    for (j, atom) in spec.measure.atoms().iter().enumerate() {
        if m.r[j] != 0.0 {
            d += m.r[j] * atom.intensity * spec.partial(Coefficient::Jump(j), v, point);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficients, TerminalDatum};
    use crate::noise::{JumpAtom, JumpAtomMeasure};

    struct Toy;
    impl Coefficients for Toy {
        fn drift(&self, p: &Point<'_>) -> f64 {
            p.u * p.x
        }
        fn diffusion(&self, p: &Point<'_>) -> f64 {
            p.z + 1.0
        }
        fn jump(&self, p: &Point<'_>, _atom: usize, mark: f64) -> f64 {
            mark * p.x
        }
        fn driver(&self, p: &Point<'_>) -> f64 {
            p.a * p.a + p.k[0]
        }
        fn running_reward(&self, p: &Point<'_>) -> f64 {
            -(p.u - 1.0).powi(2)
        }
    }

    fn spec() -> FbsdeSpec {
        let measure = JumpAtomMeasure::new(vec![JumpAtom {
            mark: 0.5,
            intensity: 2.0,
        }])
        .unwrap();
        FbsdeSpec::new(Toy, 1.0, measure, TerminalDatum::Constant(0.0))
    }

    #[test]
    fn zero_inputs_give_zero() {
        struct Zero;
        impl Coefficients for Zero {}
        let spec = FbsdeSpec::new(
            Zero,
            0.0,
            JumpAtomMeasure::empty(),
            TerminalDatum::Constant(0.0),
        );
        let inputs = HamiltonianInputs {
            t: 0.0,
            x: 0.0,
            y: 0.0,
            a: 0.0,
            z: 0.0,
            k: vec![],
            u: 0.0,
            p: 0.0,
            q: 0.0,
            r: vec![],
            lambda: 0.0,
        };
        assert_eq!(hamiltonian(&spec, &inputs), 0.0);
    }

    #[test]
    fn terms_add_up() {
        let spec = spec();
        let inputs = HamiltonianInputs {
            t: 0.1,
            x: 2.0,
            y: 0.0,
            a: 3.0,
            z: 0.5,
            k: vec![0.25],
            u: 0.5,
            p: 1.5,
            q: -1.0,
            r: vec![4.0],
            lambda: 0.5,
        };
        let want = -0.25 + 1.0 * 1.5 + 1.5 * -1.0 + (1.0 * 4.0 * 2.0) + (9.0 + 0.25) * 0.5;
        assert!((hamiltonian(&spec, &inputs) - want).abs() < 1e-14);
    }

    #[test]
    fn partials_match_difference_quotients() {
        let spec = spec();
        let k = [0.25];
        let r = [4.0];
        let p = Point {
            t: 0.1,
            x: 2.0,
            y: 0.0,
            a: 3.0,
            z: 0.5,
            k: &k,
            u: 0.5,
        };
        let m = Multipliers {
            p: 1.5,
            q: -1.0,
            r: &r,
            lambda: 0.5,
        };
        // dH/dx = u p + mark r nu; dH/du = -2(u-1) + x p; dH/da = 2 a lambda.
        assert!((hamiltonian_partial(&spec, &p, &m, Variable::X) - (0.75 + 4.0)).abs() < 1e-6);
        assert!((hamiltonian_partial(&spec, &p, &m, Variable::U) - (1.0 + 3.0)).abs() < 1e-6);
        assert!((hamiltonian_partial(&spec, &p, &m, Variable::A) - 3.0).abs() < 1e-6);
        assert!((hamiltonian_partial(&spec, &p, &m, Variable::Z) + 1.0).abs() < 1e-6);
        assert!((hamiltonian_partial(&spec, &p, &m, Variable::K(0)) - 0.5).abs() < 1e-6);
    }
}
