//! Deterministic Chafee-Infante dynamics on (0,1) with Dirichlet boundary values.
//!
//! States are sine-series coefficients. The reaction term is collocated on a
//! uniform grid with at least four nodes per retained mode, which removes the
//! aliasing of the cubic term, and time stepping treats the Laplacian exactly.

mod equilibria;
mod field;
mod grid;
mod model;

pub use equilibria::{lu_solve, Equilibria, NewtonFailure, SeedOutcome, DEDUP_TOL, MAX_NEWTON_ITERS, SEED_AMPLITUDES};
pub use field::SpectralField;
pub use grid::SineGrid;
pub use model::{
    phi_functions, validate_lambda, ChafeeInfante, Etdrk4, ModelParams, PdeError, Workspace, BLOWUP_LIMIT,
};
