//! Augmented-Lagrangian primal-dual solver for the relaxed hierarchical
//! max-flow problem.
//!
//! The dual variables are a source-to-sink flow through the label tree:
//! every label holds a sink flow `p_L`, every non-root label a spatial flow
//! `q_L` capped per voxel by its boundary weight `S_L`, and the labeling
//! `u_L` acts as the Lagrange multiplier of the flow-conservation residual
//! `G_L = div q_L + p_L - p_parent`. One [`SolverState::iterate`] pass
//! performs, in order:
//!
//! 1. a projected descent step on every spatial flow
//!    (`q_L <- project(q_L + tau * grad(G_L - u_L / c))`),
//! 2. a bottom-up sweep of sink-flow updates — leaves cap against their
//!    data term, branches average their parent's and children's demands,
//!    the root averages its children against the constant payoff `1/c`,
//! 3. the multiplier step `u_L <- u_L - c * G_L`.
//!
//! The iteration stops when the mean absolute multiplier change per
//! voxel-label drops below the tolerance. Labelings are not clamped while
//! iterating; they are clamped to `[0, 1]` only on export.
//!
//! All per-voxel updates write disjoint slots and all reductions use a
//! fixed block order, so results are bit-identical across worker counts.

use thiserror::Error;

use crate::fields::{divergence, gradient, par_fill, project_ball, GridGeometry, ScalarField, VectorField};
use crate::fields::block_sum;
use crate::hierarchy::{Hierarchy, LabelId};
use crate::oracle::DiscreteLabeling;
use crate::problem::{primal_energy, GhmfProblem, Labeling, ProblemError};
use crate::scalar::{real, Scalar};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("problem is not normalized: data terms must be leaf-only and non-negative")]
    UnnormalizedProblem,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid solver parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Iteration controls.
///
/// The defaults (`c = 0.25`, `tau = 0.1`, `tolerance = 1e-4`,
/// `max_iters = 2000`) are conservative desk-scale settings; `tau` stays
/// below the stability bound of the projected gradient step for grids up
/// to rank 3.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverParams<T: Scalar> {
    /// Augmentation weight of the flow-conservation penalty.
    pub c: T,
    /// Step size of the spatial-flow update.
    pub tau: T,
    /// Convergence threshold on the mean absolute labeling change per
    /// voxel-label.
    pub tolerance: T,
    /// Iteration budget; hitting it returns an unconverged solution, not
    /// an error.
    pub max_iters: usize,
}

impl<T: Scalar> Default for SolverParams<T> {
    fn default() -> Self {
        SolverParams {
            c: real(0.25),
            tau: real(0.1),
            tolerance: real(1e-4),
            max_iters: 2000,
        }
    }
}

impl<T: Scalar> SolverParams<T> {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.c <= T::zero() || !self.c.is_finite() {
            return Err(SolverError::InvalidParams(format!(
                "c must be positive and finite, got {}",
                self.c
            )));
        }
        if self.tau <= T::zero() || !self.tau.is_finite() {
            return Err(SolverError::InvalidParams(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        if self.tolerance <= T::zero() || !self.tolerance.is_finite() {
            return Err(SolverError::InvalidParams(format!(
                "tolerance must be positive and finite, got {}",
                self.tolerance
            )));
        }
        if self.max_iters == 0 {
            return Err(SolverError::InvalidParams(
                "max_iters must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Mutable solver state over a normalized problem.
#[derive(Debug, Clone)]
pub struct SolverState<T: Scalar> {
    problem: GhmfProblem<T>,
    params: SolverParams<T>,
    postorder: Vec<LabelId>,
    u: Vec<ScalarField<T>>,
    p: Vec<ScalarField<T>>,
    q: Vec<VectorField<T>>,
    /// Cached `div q_L`, kept in step with `q`.
    div_q: Vec<ScalarField<T>>,
    iteration: usize,
    last_residual: T,
    label_delta_sum: T,
}

/// Builds the flow-maximizing starting point for a normalized problem:
/// every sink flow is the per-voxel minimum of the leaf data terms, each
/// voxel's unit weight is split evenly among the leaves attaining that
/// minimum, branch weights are the sums of their children, and all
/// spatial flows are zero. With zero boundary weights this is already a
/// fixed point of the iteration.
pub fn initialize<T: Scalar>(
    problem: &GhmfProblem<T>,
    params: SolverParams<T>,
) -> Result<SolverState<T>, SolverError> {
    params.validate()?;
    if !problem.is_normalized() {
        return Err(SolverError::UnnormalizedProblem);
    }
    let hierarchy = problem.hierarchy();
    if hierarchy.node_count() < 2 {
        return Err(SolverError::InvalidProblem(
            "the hierarchy needs at least one label besides the root".to_string(),
        ));
    }
    let geometry = problem.geometry().clone();
    let leaves = hierarchy.leaves();
    let leaf_data: Vec<Option<&ScalarField<T>>> =
        leaves.iter().map(|&l| problem.data_term(l)).collect();
    let at = |k: usize, i: usize| leaf_data[k].map_or(T::zero(), |f| f.values()[i]);

    let dmin = ScalarField::from_fn(&geometry, |i| {
        (0..leaves.len()).fold(T::infinity(), |acc, k| acc.min(at(k, i)))
    });
    let dmin_values = dmin.values();
    let shares = ScalarField::from_fn(&geometry, |i| {
        let m = (0..leaves.len()).filter(|&k| at(k, i) == dmin_values[i]).count();
        T::one() / T::from_usize(m).expect("leaf count is representable")
    });
    let shares_values = shares.values();

    let n = hierarchy.node_count();
    let mut u: Vec<ScalarField<T>> = vec![ScalarField::zeros(&geometry); n];
    for (k, &leaf) in leaves.iter().enumerate() {
        u[leaf.index()] = ScalarField::from_fn(&geometry, |i| {
            if at(k, i) == dmin_values[i] {
                shares_values[i]
            } else {
                T::zero()
            }
        });
    }
    let postorder = hierarchy.postorder();
    for &label in &postorder {
        if hierarchy.is_branch(label) {
            let children = hierarchy.children(label);
            let child_values: Vec<&ScalarField<T>> =
                children.iter().map(|c| &u[c.index()]).collect();
            u[label.index()] = ScalarField::from_fn(&geometry, |i| {
                child_values
                    .iter()
                    .fold(T::zero(), |acc, f| acc + f.values()[i])
            });
        }
    }
    // The root's weight is the constant 1 by definition; set it exactly
    // rather than keeping the rounded sum of its children's shares.
    u[hierarchy.root().index()] = ScalarField::constant(&geometry, T::one());

    let p = vec![dmin.clone(); n];
    let q = vec![VectorField::zeros(&geometry); n];
    let div_q = vec![ScalarField::zeros(&geometry); n];
    Ok(SolverState {
        problem: problem.clone(),
        params,
        postorder,
        u,
        p,
        q,
        div_q,
        iteration: 0,
        last_residual: T::infinity(),
        label_delta_sum: T::zero(),
    })
}

impl<T: Scalar> SolverState<T> {
    pub fn problem(&self) -> &GhmfProblem<T> {
        &self.problem
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn last_residual(&self) -> T {
        self.last_residual
    }

    /// Chambolle-style projected step on every spatial flow: follow the
    /// gradient of the flow-conservation residual minus the multiplier
    /// payoff, then re-project onto the per-voxel capacity ball `|q_L| <=
    /// S_L`. Labels do not interact within this pass.
    pub fn update_spatial_flows(&mut self) {
        let hierarchy = self.problem.hierarchy().clone();
        let geometry = self.problem.geometry().clone();
        let root = hierarchy.root();
        let c = self.params.c;
        let tau = self.params.tau;
        for label in hierarchy.labels() {
            if label == root {
                continue;
            }
            let parent = hierarchy.parent(label).expect("non-root label has a parent");
            let argument = {
                let div = self.div_q[label.index()].values();
                let own = self.p[label.index()].values();
                let up = self.p[parent.index()].values();
                let mult = self.u[label.index()].values();
                ScalarField::from_fn(&geometry, |i| div[i] + own[i] - up[i] - mult[i] / c)
            };
            let step = gradient(&argument);
            let mut moved = self.q[label.index()].clone();
            for axis in 0..geometry.rank() {
                let current = self.q[label.index()].component(axis);
                let delta = step.component(axis);
                par_fill(moved.component_mut(axis), |i| current[i] + tau * delta[i]);
            }
            let projected = project_ball(&moved, self.problem.smoothness(label))
                .expect("smoothness terms are non-negative by construction");
            self.div_q[label.index()] = divergence(&projected);
            self.q[label.index()] = projected;
        }
    }

    /// Bottom-up sink-flow sweep. Children are updated before their
    /// parent, and each update reads the parent's value from the previous
    /// pass: leaves cap their demand against the data term, branches
    /// average the demand from above with their children's supply, and the
    /// root averages its children against the constant payoff `1/c`.
    pub fn update_sink_flows(&mut self) {
        let hierarchy = self.problem.hierarchy().clone();
        let geometry = self.problem.geometry().clone();
        let root = hierarchy.root();
        let c = self.params.c;
        let order = self.postorder.clone();
        for label in order {
            let new_p = if label == root {
                let children = hierarchy.children(label);
                let gathered: Vec<(&[T], &[T], &[T])> = children
                    .iter()
                    .map(|&child| {
                        (
                            self.p[child.index()].values(),
                            self.div_q[child.index()].values(),
                            self.u[child.index()].values(),
                        )
                    })
                    .collect();
                let count = T::from_usize(children.len()).expect("child count is representable");
                ScalarField::from_fn(&geometry, |i| {
                    let mut acc = T::one() / c;
                    for (p_child, div_child, u_child) in &gathered {
                        acc = acc + p_child[i] + div_child[i] - u_child[i] / c;
                    }
                    acc / count
                })
            } else if hierarchy.is_leaf(label) {
                let parent = hierarchy.parent(label).expect("non-root label has a parent");
                let data = self.problem.data_term(label);
                let up = self.p[parent.index()].values();
                let div = self.div_q[label.index()].values();
                let mult = self.u[label.index()].values();
                ScalarField::from_fn(&geometry, |i| {
                    let cap = data.map_or(T::zero(), |f| f.values()[i]);
                    cap.min(up[i] - div[i] + mult[i] / c)
                })
            } else {
                let parent = hierarchy.parent(label).expect("non-root label has a parent");
                let children = hierarchy.children(label);
                let gathered: Vec<(&[T], &[T], &[T])> = children
                    .iter()
                    .map(|&child| {
                        (
                            self.p[child.index()].values(),
                            self.div_q[child.index()].values(),
                            self.u[child.index()].values(),
                        )
                    })
                    .collect();
                let up = self.p[parent.index()].values();
                let div = self.div_q[label.index()].values();
                let mult = self.u[label.index()].values();
                let count =
                    T::from_usize(children.len() + 1).expect("child count is representable");
                ScalarField::from_fn(&geometry, |i| {
                    let mut acc = up[i] - div[i] + mult[i] / c;
                    for (p_child, div_child, u_child) in &gathered {
                        acc = acc + p_child[i] + div_child[i] - u_child[i] / c;
                    }
                    acc / count
                })
            };
            self.p[label.index()] = new_p;
        }
    }

    /// Multiplier step `u_L <- u_L - c * (div q_L - p_parent + p_L)` for
    /// every non-root label; records the summed absolute change for the
    /// residual.
    pub fn update_labels(&mut self) {
        let hierarchy = self.problem.hierarchy().clone();
        let geometry = self.problem.geometry().clone();
        let root = hierarchy.root();
        let c = self.params.c;
        let mut delta_total = T::zero();
        for label in hierarchy.labels() {
            if label == root {
                continue;
            }
            let parent = hierarchy.parent(label).expect("non-root label has a parent");
            let new_u = {
                let div = self.div_q[label.index()].values();
                let own = self.p[label.index()].values();
                let up = self.p[parent.index()].values();
                let current = self.u[label.index()].values();
                ScalarField::from_fn(&geometry, |i| {
                    current[i] - c * (div[i] - up[i] + own[i])
                })
            };
            let change = {
                let old = self.u[label.index()].values();
                let new = new_u.values();
                ScalarField::from_fn(&geometry, |i| (new[i] - old[i]).abs())
            };
            delta_total = delta_total + block_sum(change.values());
            self.u[label.index()] = new_u;
        }
        self.label_delta_sum = delta_total;
    }

    /// One full pass (spatial flows, sink flows, multipliers); returns the
    /// mean absolute labeling change per voxel-label.
    pub fn iterate(&mut self) -> T {
        self.update_spatial_flows();
        self.update_sink_flows();
        self.update_labels();
        let non_root = self.problem.hierarchy().node_count() - 1;
        let scale = T::from_usize(non_root * self.problem.geometry().voxel_count())
            .expect("problem size is representable");
        let residual = self.label_delta_sum / scale;
        self.iteration += 1;
        self.last_residual = residual;
        residual
    }

    /// Largest flow-conservation violation `|div q_L + p_L - p_parent|`
    /// over all non-root labels and voxels.
    pub fn flow_residual(&self) -> T {
        let hierarchy = self.problem.hierarchy();
        let root = hierarchy.root();
        let mut worst = T::zero();
        for label in hierarchy.labels() {
            if label == root {
                continue;
            }
            let parent = hierarchy.parent(label).expect("non-root label has a parent");
            let div = self.div_q[label.index()].values();
            let own = self.p[label.index()].values();
            let up = self.p[parent.index()].values();
            for i in 0..div.len() {
                worst = worst.max((div[i] + own[i] - up[i]).abs());
            }
        }
        worst
    }

    /// Total source flow `sum_x p_root(x)`: the dual objective, a lower
    /// bound on the primal energy of this (normalized) problem.
    pub fn dual_value(&self) -> T {
        block_sum(self.p[self.problem.hierarchy().root().index()].values())
    }

    /// Current labeling with every non-root weight clamped to `[0, 1]`.
    pub fn export_labeling(&self) -> Labeling<T> {
        let hierarchy = self.problem.hierarchy();
        let geometry = self.problem.geometry();
        let root = hierarchy.root();
        let mut labeling = Labeling::new(hierarchy.node_count());
        for label in hierarchy.labels() {
            if label == root {
                continue;
            }
            let raw = self.u[label.index()].values();
            labeling.set(
                label,
                ScalarField::from_fn(geometry, |i| raw[i].max(T::zero()).min(T::one())),
            );
        }
        labeling
    }

    /// Energy of the current clamped leaf labeling under the (normalized)
    /// problem held by this state.
    pub fn current_energy(&self) -> T {
        let hierarchy = self.problem.hierarchy();
        let geometry = self.problem.geometry();
        let mut labeling = Labeling::new(hierarchy.node_count());
        for leaf in hierarchy.leaves() {
            let raw = self.u[leaf.index()].values();
            labeling.set(
                leaf,
                ScalarField::from_fn(geometry, |i| raw[i].max(T::zero()).min(T::one())),
            );
        }
        primal_energy(&self.problem, &labeling)
            .expect("state labeling matches the problem by construction")
    }

    /// Checks the flow-capacity invariants the updates are meant to
    /// maintain: `|q_L| <= S_L` everywhere and `p_L <= D_L` at leaves,
    /// both up to rounding slack. Returns a description per violation.
    pub fn invariant_violations(&self) -> Vec<String> {
        let hierarchy = self.problem.hierarchy();
        let root = hierarchy.root();
        let mut out = Vec::new();
        for label in hierarchy.labels() {
            if label == root {
                continue;
            }
            let caps = self.problem.smoothness(label).values();
            let norms = self.q[label.index()].norms();
            for (i, (&n, &s)) in norms.values().iter().zip(caps).enumerate() {
                if n > s + real::<T>(1e-12) * (T::one() + s) {
                    out.push(format!(
                        "|q_{}| = {n} exceeds cap {s} at voxel {i}",
                        hierarchy.name(label)
                    ));
                    break;
                }
            }
            if hierarchy.is_leaf(label) {
                let flows = self.p[label.index()].values();
                for (i, &flow) in flows.iter().enumerate() {
                    let cap = self.problem.data_term(label).map_or(T::zero(), |f| f.values()[i]);
                    if flow > cap + real::<T>(1e-12) * (T::one() + cap.abs()) {
                        out.push(format!(
                            "p_{} = {flow} exceeds data cap {cap} at voxel {i}",
                            hierarchy.name(label)
                        ));
                        break;
                    }
                }
            }
        }
        out
    }

    #[cfg(test)]
    fn refresh_divergence(&mut self) {
        for i in 0..self.q.len() {
            self.div_q[i] = divergence(&self.q[i]);
        }
    }
}

/// A solved (or iteration-capped) instance.
#[derive(Debug, Clone)]
pub struct Solution<T: Scalar> {
    /// The label tree the weights refer to.
    pub hierarchy: Hierarchy,
    /// Clamped per-label weights, including branches.
    pub labeling: Labeling<T>,
    /// Primal energy of the clamped leaf labeling under the problem as
    /// given (offsets from internal normalization are folded back in).
    pub energy: T,
    /// Dual objective in the same scale as `energy`; never above it by
    /// more than the convergence slack.
    pub dual_value: T,
    /// `energy - dual_value`.
    pub gap: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-iteration report passed to the observer of [`solve_observed`].
pub struct SolveProgress<'a, T: Scalar> {
    pub iteration: usize,
    pub residual: T,
    /// Sum of the normalization offset field; add to normalized-problem
    /// energies to express them in the original problem's scale.
    pub offset_total: T,
    pub state: &'a SolverState<T>,
}

/// Solves a problem with default observation (none); see
/// [`solve_observed`].
pub fn solve<T: Scalar>(
    problem: &GhmfProblem<T>,
    params: &SolverParams<T>,
) -> Result<Solution<T>, SolverError> {
    solve_observed(problem, params, |_| {})
}

/// Normalizes the problem if needed, iterates from the canonical starting
/// point until the residual drops below the tolerance or the iteration
/// budget runs out, and packages the clamped labeling with its energies.
/// Running out of iterations is reported through `converged`, not an
/// error. The observer sees every iteration.
pub fn solve_observed<T: Scalar>(
    problem: &GhmfProblem<T>,
    params: &SolverParams<T>,
    mut observer: impl FnMut(&SolveProgress<T>),
) -> Result<Solution<T>, SolverError> {
    params.validate()?;
    let (normalized, offset) = if problem.is_normalized() {
        (problem.clone(), None)
    } else {
        let (normalized, offset) = problem.normalize();
        (normalized, Some(offset))
    };
    let offset_total = offset.as_ref().map_or(T::zero(), |f| f.sum());
    let mut state = initialize(&normalized, params.clone())?;
    let mut converged = false;
    while state.iteration < params.max_iters {
        let residual = state.iterate();
        observer(&SolveProgress {
            iteration: state.iteration,
            residual,
            offset_total,
            state: &state,
        });
        if residual < params.tolerance {
            converged = true;
            break;
        }
    }

    let hierarchy = problem.hierarchy().clone();
    let labeling = state.export_labeling();
    // The reported energy uses only the leaf weights (branches synthesized
    // as sums), matching how a reader of the exported fields would
    // recompute it.
    let mut leaf_labeling = Labeling::new(hierarchy.node_count());
    for leaf in hierarchy.leaves() {
        leaf_labeling.set(leaf, labeling.get(leaf).expect("exported leaves are present").clone());
    }
    let energy = primal_energy(problem, &leaf_labeling)?;
    let dual_value = state.dual_value() + offset_total;
    Ok(Solution {
        hierarchy,
        labeling,
        energy,
        dual_value,
        gap: energy - dual_value,
        iterations: state.iteration,
        converged,
    })
}

/// Hardens a solution to one leaf per voxel by per-voxel argmax over the
/// leaf weights; ties go to the lowest label id.
pub fn threshold<T: Scalar>(solution: &Solution<T>) -> DiscreteLabeling {
    let hierarchy = &solution.hierarchy;
    let leaves = hierarchy.leaves();
    let first = solution
        .labeling
        .get(leaves[0])
        .expect("solution labelings cover all leaves");
    let geometry: GridGeometry = first.geometry().clone();
    let assignments: Vec<LabelId> = (0..geometry.voxel_count())
        .map(|i| {
            let mut best = leaves[0];
            let mut best_value = first.values()[i];
            for &leaf in &leaves[1..] {
                let value = solution
                    .labeling
                    .get(leaf)
                    .expect("solution labelings cover all leaves")
                    .values()[i];
                if value > best_value {
                    best = leaf;
                    best_value = value;
                }
            }
            best
        })
        .collect();
    DiscreteLabeling::new(hierarchy, &geometry, assignments)
        .expect("argmax over leaves yields a leaf per voxel")
}
