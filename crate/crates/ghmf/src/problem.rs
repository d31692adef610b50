//! The segmentation problem: a label hierarchy over a grid, with a data
//! term `D_L` and a boundary weight `S_L` per label, and the relaxed
//! labelings the solver produces for it.

use thiserror::Error;

use crate::fields::{gradient, GridGeometry, ScalarField};
use crate::hierarchy::{Hierarchy, LabelId};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("expected one entry per label ({want}), got {got}")]
    WrongArity { want: usize, got: usize },
    #[error("geometry mismatch: field is {got:?}, problem grid is {want:?}")]
    GeometryMismatch { want: Vec<usize>, got: Vec<usize> },
    #[error("smoothness of label '{label}' is negative at voxel {voxel}")]
    NegativeSmoothness { label: String, voxel: usize },
    #[error("labeling does not cover leaf '{0}'")]
    MissingLeaf(String),
}

/// A hierarchical segmentation problem.
///
/// Data terms are optional per label (absent means zero) and may sit on
/// branches or take negative values; [`GhmfProblem::normalize`] rewrites
/// such a problem into the equivalent leaf-only non-negative form the
/// solver requires. Smoothness terms are mandatory, non-negative, and the
/// root's is never used (the root weight is constant one).
#[derive(Debug, Clone)]
pub struct GhmfProblem<T: Scalar> {
    hierarchy: Hierarchy,
    geometry: GridGeometry,
    data_terms: Vec<Option<ScalarField<T>>>,
    smoothness_terms: Vec<ScalarField<T>>,
}

impl<T: Scalar> GhmfProblem<T> {
    /// Assembles a problem, checking arity, geometry, and that every
    /// smoothness term is non-negative.
    pub fn new(
        hierarchy: Hierarchy,
        geometry: GridGeometry,
        data_terms: Vec<Option<ScalarField<T>>>,
        smoothness_terms: Vec<ScalarField<T>>,
    ) -> Result<Self, ProblemError> {
        let n = hierarchy.node_count();
        if data_terms.len() != n || smoothness_terms.len() != n {
            return Err(ProblemError::WrongArity {
                want: n,
                got: data_terms.len().min(smoothness_terms.len()),
            });
        }
        for field in data_terms.iter().flatten() {
            check_geometry(&geometry, field)?;
        }
        for (i, field) in smoothness_terms.iter().enumerate() {
            check_geometry(&geometry, field)?;
            if let Some(voxel) = field.values().iter().position(|v| *v < T::zero()) {
                return Err(ProblemError::NegativeSmoothness {
                    label: hierarchy.name(LabelId::new(i)).to_string(),
                    voxel,
                });
            }
        }
        Ok(GhmfProblem {
            hierarchy,
            geometry,
            data_terms,
            smoothness_terms,
        })
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    /// Data term of `label`; `None` means identically zero.
    pub fn data_term(&self, label: LabelId) -> Option<&ScalarField<T>> {
        self.data_terms[label.index()].as_ref()
    }

    pub fn smoothness(&self, label: LabelId) -> &ScalarField<T> {
        &self.smoothness_terms[label.index()]
    }

    pub(crate) fn data_terms(&self) -> &[Option<ScalarField<T>>] {
        &self.data_terms
    }

    pub(crate) fn smoothness_terms(&self) -> &[ScalarField<T>] {
        &self.smoothness_terms
    }

    /// True when data terms sit only on leaves and are non-negative —
    /// the form the solver's initializer requires. Explicit all-zero
    /// branch terms count as absent.
    pub fn is_normalized(&self) -> bool {
        for label in self.hierarchy.labels() {
            if let Some(field) = self.data_term(label) {
                if self.hierarchy.is_branch(label) {
                    if field.values().iter().any(|v| *v != T::zero()) {
                        return false;
                    }
                } else if field.values().iter().any(|v| *v < T::zero()) {
                    return false;
                }
            }
        }
        true
    }

    /// Pushes branch data down to the leaves and shifts out the per-voxel
    /// minimum, returning the equivalent normalized problem and the shift
    /// field. Energies relate by
    /// `E_original(u) = E_normalized(u) + offset.sum()` for every labeling
    /// that satisfies the hierarchy constraints.
    pub fn normalize(&self) -> (GhmfProblem<T>, ScalarField<T>) {
        crate::reductions::pushdown_data(self)
    }
}

fn check_geometry<T: Scalar>(
    geometry: &GridGeometry,
    field: &ScalarField<T>,
) -> Result<(), ProblemError> {
    if field.geometry() != geometry {
        return Err(ProblemError::GeometryMismatch {
            want: geometry.dims().to_vec(),
            got: field.geometry().dims().to_vec(),
        });
    }
    Ok(())
}

/// Per-label relaxed weights `u_L`.
///
/// Leaves must be present to evaluate an energy; branch entries are
/// optional and are synthesized bottom-up (branch = sum of children) when
/// absent. The root is implicit and always weighs one.
#[derive(Debug, Clone)]
pub struct Labeling<T: Scalar> {
    fields: Vec<Option<ScalarField<T>>>,
}

impl<T: Scalar> Labeling<T> {
    /// An empty labeling over `label_count` labels.
    pub fn new(label_count: usize) -> Self {
        Labeling {
            fields: vec![None; label_count],
        }
    }

    pub fn set(&mut self, label: LabelId, field: ScalarField<T>) {
        self.fields[label.index()] = Some(field);
    }

    pub fn get(&self, label: LabelId) -> Option<&ScalarField<T>> {
        self.fields[label.index()].as_ref()
    }

    pub fn label_count(&self) -> usize {
        self.fields.len()
    }

    /// Binary indicator labeling: voxel `x` weighs one under
    /// `assignments[x]` (a leaf) and zero under every other leaf.
    pub fn from_leaf_indicators(
        hierarchy: &Hierarchy,
        geometry: &GridGeometry,
        assignments: &[LabelId],
    ) -> Self {
        let mut labeling = Labeling::new(hierarchy.node_count());
        for leaf in hierarchy.leaves() {
            let field = ScalarField::from_fn(geometry, |i| {
                if assignments[i] == leaf {
                    T::one()
                } else {
                    T::zero()
                }
            });
            labeling.set(leaf, field);
        }
        labeling
    }

    /// Resolves a weight field for every label: supplied entries win, absent
    /// branches become the sum of their resolved children, and the root is
    /// constant one when absent. Absent leaves are an error.
    pub fn resolve(
        &self,
        hierarchy: &Hierarchy,
        geometry: &GridGeometry,
    ) -> Result<Vec<ScalarField<T>>, ProblemError> {
        let mut resolved: Vec<Option<ScalarField<T>>> = vec![None; hierarchy.node_count()];
        for label in hierarchy.postorder() {
            let supplied = self.fields[label.index()].as_ref();
            if let Some(field) = supplied {
                if field.geometry() != geometry {
                    return Err(ProblemError::GeometryMismatch {
                        want: geometry.dims().to_vec(),
                        got: field.geometry().dims().to_vec(),
                    });
                }
                resolved[label.index()] = Some(field.clone());
            } else if hierarchy.is_leaf(label) {
                if label == hierarchy.root() {
                    resolved[label.index()] = Some(ScalarField::constant(geometry, T::one()));
                } else {
                    return Err(ProblemError::MissingLeaf(
                        hierarchy.name(label).to_string(),
                    ));
                }
            } else if label == hierarchy.root() {
                resolved[label.index()] = Some(ScalarField::constant(geometry, T::one()));
            } else {
                let children = hierarchy.children(label);
                let field = ScalarField::from_fn(geometry, |i| {
                    children.iter().fold(T::zero(), |acc, &c| {
                        acc + resolved[c.index()].as_ref().unwrap().values()[i]
                    })
                });
                resolved[label.index()] = Some(field);
            }
        }
        Ok(resolved.into_iter().map(|f| f.unwrap()).collect())
    }

    /// Reports where the labeling leaves the feasible set by more than
    /// `epsilon`: weights outside `[0, 1]`, leaf weights not summing to one,
    /// or a branch weight departing from its children's sum.
    pub fn constraint_violations(
        &self,
        hierarchy: &Hierarchy,
        geometry: &GridGeometry,
        epsilon: T,
    ) -> Vec<String> {
        let mut out = Vec::new();
        let resolved = match self.resolve(hierarchy, geometry) {
            Ok(r) => r,
            Err(e) => return vec![e.to_string()],
        };
        let one = T::one();
        for label in hierarchy.labels() {
            if label == hierarchy.root() {
                continue;
            }
            let values = resolved[label.index()].values();
            if let Some(i) = values
                .iter()
                .position(|&v| v < -epsilon || v > one + epsilon)
            {
                out.push(format!(
                    "u_{} out of [0,1] at voxel {i}: {}",
                    hierarchy.name(label),
                    values[i]
                ));
            }
        }
        let leaves = hierarchy.leaves();
        for i in 0..geometry.voxel_count() {
            let total = leaves
                .iter()
                .fold(T::zero(), |acc, &l| acc + resolved[l.index()].values()[i]);
            if (total - one).abs() > epsilon {
                out.push(format!("leaf weights sum to {total} at voxel {i}"));
                break;
            }
        }
        for label in hierarchy.labels() {
            if hierarchy.is_leaf(label) || label == hierarchy.root() {
                continue;
            }
            let own = resolved[label.index()].values();
            let children = hierarchy.children(label);
            for (i, &own_value) in own.iter().enumerate() {
                let sum = children
                    .iter()
                    .fold(T::zero(), |acc, &c| acc + resolved[c.index()].values()[i]);
                if (own_value - sum).abs() > epsilon {
                    out.push(format!(
                        "u_{} != sum of children at voxel {i}",
                        hierarchy.name(label)
                    ));
                    break;
                }
            }
        }
        out
    }
}

/// Evaluates the segmentation energy
/// `sum_L sum_x D_L(x) u_L(x) + S_L(x) |grad u_L(x)|`
/// for a relaxed labeling. Branch weights are synthesized from the leaves
/// when not supplied; the root contributes only its data term (its weight
/// is one and its gradient zero). The discrete oracle evaluates labelings
/// through this same function, so relaxed and discrete energies share one
/// discretization.
pub fn primal_energy<T: Scalar>(
    problem: &GhmfProblem<T>,
    labeling: &Labeling<T>,
) -> Result<T, ProblemError> {
    let hierarchy = problem.hierarchy();
    if labeling.label_count() != hierarchy.node_count() {
        return Err(ProblemError::WrongArity {
            want: hierarchy.node_count(),
            got: labeling.label_count(),
        });
    }
    let geometry = problem.geometry();
    let resolved = labeling.resolve(hierarchy, geometry)?;
    let mut energy = T::zero();
    for label in hierarchy.labels() {
        let u = &resolved[label.index()];
        if let Some(d) = problem.data_term(label) {
            energy = energy + d.dot(u);
        }
        if label != hierarchy.root() {
            let norms = gradient(u).norms();
            energy = energy + problem.smoothness(label).dot(&norms);
        }
    }
    Ok(energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;

    fn binary_problem(
        dims: &[usize],
        d_a: Vec<f64>,
        d_b: Vec<f64>,
        smooth: f64,
    ) -> GhmfProblem<f64> {
        let h = build_hierarchy(&[("S", None), ("A", Some("S")), ("B", Some("S"))]).unwrap();
        let g = GridGeometry::new(dims).unwrap();
        let a = h.id_of("A").unwrap();
        let b = h.id_of("B").unwrap();
        let mut data = vec![None, None, None];
        data[a.index()] = Some(ScalarField::from_values(&g, d_a).unwrap());
        data[b.index()] = Some(ScalarField::from_values(&g, d_b).unwrap());
        let s = vec![
            ScalarField::zeros(&g),
            ScalarField::constant(&g, smooth),
            ScalarField::constant(&g, smooth),
        ];
        GhmfProblem::new(h, g, data, s).unwrap()
    }

    #[test]
    fn rejects_negative_smoothness() {
        let h = build_hierarchy(&[("S", None), ("A", Some("S")), ("B", Some("S"))]).unwrap();
        let g = GridGeometry::new(&[2]).unwrap();
        let s = ScalarField::from_values(&g, vec![0.1, -0.1]).unwrap();
        let err = GhmfProblem::new(
            h,
            g.clone(),
            vec![None, None, None],
            vec![ScalarField::zeros(&g), s.clone(), s],
        )
        .unwrap_err();
        assert!(matches!(err, ProblemError::NegativeSmoothness { .. }));
    }

    #[test]
    fn rejects_geometry_mismatch() {
        let h = build_hierarchy(&[("S", None), ("A", Some("S")), ("B", Some("S"))]).unwrap();
        let g = GridGeometry::new(&[2]).unwrap();
        let other = GridGeometry::new(&[3]).unwrap();
        let err = GhmfProblem::<f64>::new(
            h,
            g.clone(),
            vec![None, Some(ScalarField::zeros(&other)), None],
            vec![
                ScalarField::zeros(&g),
                ScalarField::zeros(&g),
                ScalarField::zeros(&g),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ProblemError::GeometryMismatch { .. }));
    }

    #[test]
    fn indicator_energy_with_zero_smoothness_sums_chosen_data() {
        // Each voxel assigned to its per-voxel cheaper leaf: energy is the
        // sum of the per-voxel minima.
        let p = binary_problem(&[4], vec![0.9, 0.1, 0.4, 0.6], vec![0.2, 0.8, 0.5, 0.3], 0.0);
        let h = p.hierarchy();
        let a = h.id_of("A").unwrap();
        let b = h.id_of("B").unwrap();
        let assignments = vec![b, a, a, b];
        let labeling = Labeling::from_leaf_indicators(h, p.geometry(), &assignments);
        let e = primal_energy(&p, &labeling).unwrap();
        assert!((e - (0.2 + 0.1 + 0.4 + 0.3)).abs() <= 1e-15);
    }

    #[test]
    fn two_voxel_boundary_costs_twice_lambda() {
        // Labels differ across the single interior face; both leaf
        // indicators jump there, so the boundary term is 2 * lambda.
        let lambda = 0.3;
        let p = binary_problem(&[2], vec![0.0, 1.0], vec![1.0, 0.0], lambda);
        let h = p.hierarchy();
        let a = h.id_of("A").unwrap();
        let b = h.id_of("B").unwrap();
        let labeling = Labeling::from_leaf_indicators(h, p.geometry(), &[a, b]);
        let e = primal_energy(&p, &labeling).unwrap();
        assert!((e - (0.0 + 0.0 + 2.0 * lambda)).abs() <= 1e-15);
    }

    #[test]
    fn uniform_fractional_labeling_averages_data() {
        // u_A = u_B = 1/2 everywhere: no gradients, energy is the mean of
        // the data terms.
        let p = binary_problem(&[3], vec![0.6, 0.0, 0.3], vec![0.0, 0.4, 0.1], 0.7);
        let h = p.hierarchy();
        let g = p.geometry().clone();
        let mut labeling = Labeling::new(h.node_count());
        labeling.set(h.id_of("A").unwrap(), ScalarField::constant(&g, 0.5));
        labeling.set(h.id_of("B").unwrap(), ScalarField::constant(&g, 0.5));
        let e = primal_energy(&p, &labeling).unwrap();
        let expected = 0.5 * (0.6 + 0.0 + 0.3) + 0.5 * (0.0 + 0.4 + 0.1);
        assert!((e - expected).abs() <= 1e-15);
    }

    #[test]
    fn energy_is_affine_in_data_scaling() {
        // Scaling all data terms scales the data part of the energy.
        let d_a = vec![0.9, 0.1, 0.4, 0.6];
        let d_b = vec![0.2, 0.8, 0.5, 0.3];
        let p1 = binary_problem(&[4], d_a.clone(), d_b.clone(), 0.2);
        let p2 = binary_problem(
            &[4],
            d_a.iter().map(|v| 2.0 * v).collect(),
            d_b.iter().map(|v| 2.0 * v).collect(),
            0.2,
        );
        let p0 = binary_problem(&[4], d_a, d_b, 0.0);
        let h = p1.hierarchy();
        let a = h.id_of("A").unwrap();
        let b = h.id_of("B").unwrap();
        let labeling = Labeling::from_leaf_indicators(h, p1.geometry(), &[a, b, a, b]);
        let e1 = primal_energy(&p1, &labeling).unwrap();
        let e2 = primal_energy(&p2, &labeling).unwrap();
        let data_part = primal_energy(&p0, &labeling).unwrap();
        assert!((e2 - e1 - data_part).abs() <= 1e-12);
    }

    #[test]
    fn missing_leaf_is_reported() {
        let p = binary_problem(&[2], vec![0.0, 0.0], vec![0.0, 0.0], 0.0);
        let labeling = Labeling::new(p.hierarchy().node_count());
        let err = primal_energy(&p, &labeling).unwrap_err();
        assert!(matches!(err, ProblemError::MissingLeaf(_)));
    }

    #[test]
    fn branch_weights_synthesize_from_leaves() {
        let h = crate::hierarchy::build_hierarchy(&[
            ("S", None),
            ("C", Some("S")),
            ("T", Some("S")),
            ("B", Some("C")),
            ("M", Some("C")),
        ])
        .unwrap();
        let g = GridGeometry::new(&[2]).unwrap();
        let mut labeling = Labeling::new(h.node_count());
        labeling.set(
            h.id_of("T").unwrap(),
            ScalarField::from_values(&g, vec![0.2, 0.0]).unwrap(),
        );
        labeling.set(
            h.id_of("B").unwrap(),
            ScalarField::from_values(&g, vec![0.5, 1.0]).unwrap(),
        );
        labeling.set(
            h.id_of("M").unwrap(),
            ScalarField::from_values(&g, vec![0.3, 0.0]).unwrap(),
        );
        let resolved = labeling.resolve(&h, &g).unwrap();
        let c = h.id_of("C").unwrap();
        assert_eq!(resolved[c.index()].values(), &[0.8, 1.0]);
        let root = h.root();
        assert_eq!(resolved[root.index()].values(), &[1.0, 1.0]);
        assert!(labeling.constraint_violations(&h, &g, 1e-9).is_empty());
    }
}
