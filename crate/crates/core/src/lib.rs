//! Adaptive multisecant quasi-Newton methods with cubic regularization.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: small dense kernels (orthonormalization, eigenvalues, projections).
//! * [`oracle`]: objectives with call counting, test problems and datasets.
//! * [`memory`]: the secant memory `(Y, Z, D, G, ε)` and its update rules.
//! * [`cubic`]: the Type-I cubic model and its subproblem solver.
//! * [`type2`]: the Type-II gradient-norm model, its conic form and solver.
//! * [`solver`]: Type-I and Type-II outer loops with backtracking on `M`.
//! * [`accelerated`]: the estimate-sequence accelerated method.
//! * [`baselines`]: gradient descent, Nesterov and L-BFGS for comparison.

pub mod error;
pub mod linalg;
pub mod oracle;
pub mod memory;
pub mod cubic;
pub mod type2;
pub mod solver;
pub mod accelerated;
pub mod baselines;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use memory::{DirectionMemory, MemorySnapshot, UpdateRule};
pub use oracle::{Dataset, Objective, Oracle};
pub use solver::{IterationRecord, IterationTrace, RunOutput, SolverConfig, StopReason};
pub use accelerated::{accel_outer, AccelOutput, ExitFlag};
pub use baselines::{run_gd, run_lbfgs, run_nesterov, BaselineConfig};
