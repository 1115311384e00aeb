//! Isothermal natural-gas pipeline networks.
//!
//! The crate covers three things: network topology and boundary schedules
//! ([`network`], [`schedule`]), the four-point box-scheme residuals shared by
//! the solver and the physics losses ([`residual`]), and the steady/transient
//! Newton solver that produces ground-truth fields ([`solver`]).

pub mod band;
pub mod error;
pub mod field;
pub mod network;
pub mod residual;
pub mod schedule;
pub mod solver;

pub use error::{GasError, Result};
pub use field::{restrict_field, Field2, GridSpec, StateField, StateRow};
pub use network::{
    build_paper_network, compute_weymouth_friction, End, NetworkTopology, NodeKind, NodeSpec,
    PipeSpec, ScenarioDocument, Violation, single_pipe_network,
};
pub use schedule::{
    boundary_at, random_scenario, sample_square_wave, BoundarySchedule, BoundaryValues, PiecewiseSeries,
    SquareWaveSpec,
};
pub use solver::{
    assemble_residuals, junction_defects, simulate, solve_steady_state, solve_steady_state_with,
    step_transient, Assembly, SolverOptions, SparseJacobian,
};
