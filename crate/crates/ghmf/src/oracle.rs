//! Exhaustive ground truth for small instances.
//!
//! A discrete labeling assigns one leaf to every voxel. Its energy is
//! evaluated by building the binary indicator labeling and calling
//! [`primal_energy`], so the oracle and the solver share one
//! discretization by construction — comparisons between them test
//! optimization, not differencing schemes. [`brute_force_min`] enumerates
//! every assignment, which is only viable at desk scale; the evaluation
//! cap guards against accidental blowups.

use thiserror::Error;

use crate::fields::GridGeometry;
use crate::hierarchy::{Hierarchy, LabelId};
use crate::problem::{primal_energy, GhmfProblem, Labeling, ProblemError};
use crate::scalar::Scalar;

/// Default bound on the number of labelings [`brute_force_min`] will
/// evaluate.
pub const DEFAULT_ENUMERATION_CAP: u64 = 2_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("voxel {voxel} is assigned '{label}', which is not a leaf")]
    NotALeaf { voxel: usize, label: String },
    #[error("labeling covers {got} voxels but the grid holds {want}")]
    GeometryMismatch { want: usize, got: usize },
    #[error("exhaustive search needs {required} evaluations, cap is {cap}")]
    TooLarge { required: u128, cap: u64 },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// One leaf per voxel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteLabeling {
    geometry: GridGeometry,
    assignments: Vec<LabelId>,
}

impl DiscreteLabeling {
    /// Wraps per-voxel leaf assignments, rejecting non-leaf labels and
    /// length mismatches.
    pub fn new(
        hierarchy: &Hierarchy,
        geometry: &GridGeometry,
        assignments: Vec<LabelId>,
    ) -> Result<Self, OracleError> {
        if assignments.len() != geometry.voxel_count() {
            return Err(OracleError::GeometryMismatch {
                want: geometry.voxel_count(),
                got: assignments.len(),
            });
        }
        for (voxel, &label) in assignments.iter().enumerate() {
            if !hierarchy.is_leaf(label) {
                return Err(OracleError::NotALeaf {
                    voxel,
                    label: hierarchy.name(label).to_string(),
                });
            }
        }
        Ok(DiscreteLabeling {
            geometry: geometry.clone(),
            assignments,
        })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn assignments(&self) -> &[LabelId] {
        &self.assignments
    }
}

/// Energy of a discrete labeling: indicator fields for the assigned
/// leaves, branches synthesized as unions, evaluated by [`primal_energy`].
pub fn discrete_energy<T: Scalar>(
    problem: &GhmfProblem<T>,
    labeling: &DiscreteLabeling,
) -> Result<T, OracleError> {
    if labeling.geometry() != problem.geometry() {
        return Err(OracleError::GeometryMismatch {
            want: problem.geometry().voxel_count(),
            got: labeling.geometry().voxel_count(),
        });
    }
    let indicators = Labeling::from_leaf_indicators(
        problem.hierarchy(),
        problem.geometry(),
        &labeling.assignments,
    );
    Ok(primal_energy(problem, &indicators)?)
}

/// Finds the minimum-energy discrete labeling by enumerating all
/// `leaves^voxels` assignments (voxels row-major, leaf index fastest in
/// the last voxel). Ties keep the first minimizer encountered, i.e. the
/// lexicographically smallest assignment vector. Refuses instances that
/// would need more than `cap` evaluations.
pub fn brute_force_min<T: Scalar>(
    problem: &GhmfProblem<T>,
    cap: u64,
) -> Result<(DiscreteLabeling, T), OracleError> {
    let hierarchy = problem.hierarchy();
    let geometry = problem.geometry();
    let leaves = hierarchy.leaves();
    let voxels = geometry.voxel_count();
    let required = (leaves.len() as u128)
        .checked_pow(voxels as u32)
        .unwrap_or(u128::MAX);
    if required > cap as u128 {
        return Err(OracleError::TooLarge { required, cap });
    }

    let mut ordinals = vec![0usize; voxels];
    let mut best: Option<(Vec<LabelId>, T)> = None;
    loop {
        let assignment: Vec<LabelId> = ordinals.iter().map(|&k| leaves[k]).collect();
        let labeling = DiscreteLabeling::new(hierarchy, geometry, assignment.clone())?;
        let energy = discrete_energy(problem, &labeling)?;
        let better = match &best {
            Some((_, e)) => energy < *e,
            None => true,
        };
        if better {
            best = Some((assignment, energy));
        }

        // Advance the base-|leaves| counter, last voxel fastest.
        let mut pos = voxels;
        loop {
            if pos == 0 {
                let (assignment, energy) = best.expect("at least one labeling evaluated");
                let labeling = DiscreteLabeling::new(hierarchy, geometry, assignment)?;
                return Ok((labeling, energy));
            }
            pos -= 1;
            ordinals[pos] += 1;
            if ordinals[pos] < leaves.len() {
                break;
            }
            ordinals[pos] = 0;
        }
    }
}
