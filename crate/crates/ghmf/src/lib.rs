//! Multi-region image segmentation by generalized hierarchical max-flow.
//!
//! Regions are organized as a rooted label tree: leaves partition the image,
//! and every branch label is the union of its children. A segmentation is a
//! set of per-voxel label weights `u_L` that are non-negative, sum to the
//! parent weight at every branch, and equal one at the root. The energy being
//! minimized combines a per-voxel data term `D_L` with a weighted
//! total-variation boundary term `S_L` for every label:
//!
//! ```text
//! E(u) = sum_L sum_x  D_L(x) u_L(x) + S_L(x) |grad u_L(x)|
//! ```
//!
//! The convex relaxation of this energy is solved as a hierarchical max-flow
//! problem with an augmented-Lagrangian primal-dual iteration
//! ([`solver::solve`]). Flat Potts models and linearly ordered (Ishikawa)
//! models reduce to the hierarchical form ([`reductions`]), and an exhaustive
//! oracle ([`oracle`]) provides ground truth for small instances.
//!
//! The numeric core is generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the `*64` aliases below fix `f64`, which is the
//! precision used by the file formats in [`io`] and by the CLI.

pub mod fields;
pub mod hierarchy;
pub mod io;
pub mod oracle;
pub mod problem;
pub mod reductions;
pub mod scalar;
pub mod solver;

pub use scalar::Scalar;

/// `f64` scalar field on a regular grid.
pub type ScalarField64 = fields::ScalarField<f64>;
/// `f64` vector field (one component per grid axis).
pub type VectorField64 = fields::VectorField<f64>;
/// Segmentation problem with `f64` terms.
pub type GhmfProblem64 = problem::GhmfProblem<f64>;
/// Relaxed labeling with `f64` weights.
pub type Labeling64 = problem::Labeling<f64>;
/// Solver parameters over `f64`.
pub type SolverParams64 = solver::SolverParams<f64>;
/// Solver output over `f64`.
pub type Solution64 = solver::Solution<f64>;
