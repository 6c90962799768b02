//! Predictive mean-field BSDE solver with jumps, a stochastic maximum
//! principle toolkit for delayed controls, and two worked applications.

pub mod apps;
pub mod bsde;
pub mod control;
pub mod error;
pub mod estimator;
pub mod forward;
pub mod grid;
pub mod model;
pub mod noise;
pub mod regression;
pub mod runner;

pub use bsde::{
    solve_classical_bsde, solve_fbsde, solve_predictive_bsde, CoupledSolution, PicardOptions,
    PredictiveSolution,
};
pub use error::{Error, Result};
pub use estimator::{Estimator, RegressionBasis, Regressor};
pub use forward::{simulate_forward, ForwardPaths};
pub use grid::TimeGrid;
pub use model::{
    Coefficient, Coefficients, ControlLaw, ControlPolicy, FbsdeSpec, Point, TerminalDatum, Variable,
};
pub use noise::{JumpAtom, JumpAtomMeasure, NoiseBundle};
pub use regression::{Fit, Projection, ProjectionDiagnostics};
