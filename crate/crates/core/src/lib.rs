//! Data-driven predictive control with min-max robustness against the
//! non-uniqueness of behavioral representations.
//!
//! The crate covers the full pipeline: plant simulation ([`lti_sim`]),
//! Hankel/predictor construction ([`behavioral`]), a conic-program
//! intermediate representation with an interior-point backend ([`conic`]),
//! the four controller families ([`controllers`]), independent verification
//! oracles and theoretical bounds ([`verify`]), and experiment orchestration
//! ([`harness`]).

// Link the system BLAS/LAPACK used by the semidefinite cone backend.
use openblas_src as _;

pub mod behavioral;
pub mod conic;
pub mod controllers;
pub mod harness;
pub mod lti_sim;
pub mod verify;

pub use behavioral::{BehavioralData, ReducedData};
pub use conic::{ConicProgram, SolveResult, SolveSettings, SolveStatus};
pub use controllers::{
    benchmark_config, solve_frddpc, solve_pbr, solve_rddpc, solve_spc, ControlConfig,
    ControlError, Ellipsoid, FeedbackPolicy, PbrMode, PbrSolution, RobustSolution,
    UncertaintyModel,
};
pub use harness::{
    benchmark_solve_times, grid_search_lambda, j_total, monte_carlo, run_receding_horizon,
    ControllerKind, ExperimentConfig, ExperimentReport, HarnessError,
};
pub use lti_sim::{ArNoiseModel, PidGains, SystemModel, Trajectory};
pub use verify::{
    cost_bound_check, min_lambda_for_trajectory, theorem1_lambda_o, theorem3_lambda_c,
    tune_lambda, worst_case_cost_oracle, CostBoundKind, OracleResult, TheoryBounds, VerifyError,
};
