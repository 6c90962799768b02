//! Maximum-principle machinery: the Hamiltonian, adjoint equations,
//! performance functional and its derivatives, diagnostic checks and an exact
//! tree oracle.

pub mod adjoint;
pub mod checks;
pub mod hamiltonian;
pub mod oracle;
pub mod performance;
pub mod variational;

pub use adjoint::{
    solve_adjoint_lambda, solve_adjoint_p, solve_adjoints, AdjointOptions, AdjointSolution,
};
pub use checks::{
    check_criticality, check_sufficiency, shift_identity, CheckReport, CriticalityOptions,
};
pub use hamiltonian::{
    hamiltonian, hamiltonian_at, hamiltonian_partial, HamiltonianInputs, Multipliers,
};
pub use oracle::{brute_force_oracle, evaluate_tree, OracleResult};
pub use performance::{gateaux_derivative, performance, Estimate, GateauxEstimate};
pub use variational::{solve_variational, VariationalSolution};
