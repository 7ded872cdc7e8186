//! Multi-carrier rate allocation with utility-proportional fairness.
//!
//! Divides the capacity of several carriers (each with its own coverage
//! radius) among users running real-time and delay-tolerant applications,
//! honoring per-user minimum-rate guarantees for high-priority users. Each
//! carrier's share is found by a shadow-price search on the carrier's convex
//! allocation problem; carriers are processed in ascending coverage order and
//! each user's final rate aggregates its per-carrier shares.
//!
//! Modules:
//! - [`utility`]: the two utility families plus the log-utility calculus.
//! - [`grouping`]: coverage-based user groups and per-user carrier sets.
//! - [`solver`]: one carrier's allocation via dual price bisection.
//! - [`allocator`]: the staged multi-carrier pipeline and its report.
//! - [`oracle`]: brute-force solvers and KKT residual checks for verification.

pub mod allocator;
pub mod grouping;
pub mod oracle;
pub mod solver;
pub mod utility;

pub use allocator::{
    allocate, AllocationError, AllocationReport, StageCase, StageOutcome, StageReport,
    StageUserDetail, UserSummary,
};
pub use grouping::{build_groups, carrier_order, Carrier, GroupingError, User, UserClass, UserGroups};
pub use oracle::{
    grid_solve, kkt_check, projected_gradient_solve, stage_objective, verify_report, KktReport,
    OracleError, OracleMethod, OracleResult, StageCertificate,
};
pub use solver::{
    demand_at_price, solve_stage, Participant, ParticipantRate, SolverError, StageInput,
    StageSolution,
};
pub use utility::{UtilityError, UtilityFunction};
