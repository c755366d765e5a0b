//! Numerical tolerances shared across modules.

/// Symmetry of penalty matrices, per-node transition sums, membership slack.
pub const LINALG: f64 = 1e-12;

/// Aggregated probability checks (stage reach-probabilities).
pub const AGGREGATE: f64 = 1e-10;

/// Feasibility slack accepted from the one-step optimizers.
pub const FEASIBILITY: f64 = 1e-9;

/// Relative tolerance on one-step objective values.
pub const OBJECTIVE_REL: f64 = 1e-6;
