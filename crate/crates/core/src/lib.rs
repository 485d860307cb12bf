//! Rare-event estimation for black-box responses of Gaussian inputs.
//!
//! Tail probabilities down to about `1e-10`, tail quantiles and expected
//! shortfall are estimated by Gaussian mean-shift importance sampling. The
//! shift is found by a multilevel ladder of intermediate thresholds and
//! optionally refined by stratifying along its direction.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]

pub mod cli;
pub mod cvar;
pub mod dimred;
pub mod error;
pub mod gaussian_is;
pub mod model;
pub mod multilevel;
pub mod normal;
pub mod quantile;
pub mod rng;
pub mod stratified;
pub mod vector;

pub use cli::{emit_report, Format, RunConfig, RunReport, Task};
pub use cvar::{estimate_cvar, estimate_cvar_unnormalized, CvarReport, UnnormalizedCvar};
pub use dimred::{select_important, solve_shift_in_subspace, CoordinateStats, DimRedConfig, SubspaceSelection};
pub use error::{Error, Result};
pub use gaussian_is::{
    likelihood_ratio, solve_optimal_shift, u_objective, v_criterion, v_gradient, v_hessian, NewtonSettings,
    ShiftSolution, UObjective, WeightedBatch,
};
pub use model::{EvalRecord, Model, ModelKind, ModelSpec, Tail};
pub use multilevel::{
    estimate_probability, estimate_to_precision, next_level, run_ladder, run_to_precision, EstimateReport,
    LadderConfig, LadderTrace, LevelRecord, PrecisionConfig, ProbabilityRun, TailMoments,
};
pub use quantile::{estimate_quantile, QuantileConfig, QuantileReport, QuantileRun, WeightedSurvival};
pub use rng::RngStream;
pub use stratified::{
    conditional_gaussian_sample, optimal_allocation, strata_from_shift, stratified_estimate, AllocationPlan,
    StrataSpec, StratifiedRun, StratumSummary,
};
pub use vector::{Point, ShiftVector};
