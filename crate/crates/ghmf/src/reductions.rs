//! Reductions between segmentation models.
//!
//! * Flat Potts models embed as a two-level hierarchy ([`from_potts`]).
//! * Linearly ordered (Ishikawa) models embed as a chain with one dummy
//!   leaf per level ([`from_ishikawa`]); level weights are recovered from
//!   a solved labeling with [`reconstruct_ishikawa`].
//! * [`pushdown_data`] rewrites any problem into the equivalent
//!   leaf-only, non-negative form the solver's initializer requires,
//!   returning the per-voxel offset that separates the two energies.

use thiserror::Error;

use crate::fields::{GridGeometry, ScalarField};
use crate::hierarchy::{build_hierarchy, HierarchyError, LabelId};
use crate::problem::{GhmfProblem, Labeling, ProblemError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ReductionError {
    #[error("a Potts model needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("an ordered model needs at least 2 levels, got {0}")]
    InvalidLevels(usize),
    #[error("labeling does not fit the reconstruction map: {0}")]
    MapMismatch(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Flat multi-label model: every label has its own data term and all
/// labels share one boundary weight.
#[derive(Debug, Clone)]
pub struct PottsSpec<T: Scalar> {
    pub labels: Vec<String>,
    pub geometry: GridGeometry,
    /// One data term per label, in `labels` order.
    pub data_terms: Vec<ScalarField<T>>,
    /// Boundary weight shared by every label.
    pub smoothness: ScalarField<T>,
}

/// Name reserved for implicit roots created by the reductions and the
/// problem-file parser.
pub(crate) const ROOT_NAME: &str = "ROOT";

/// Embeds a Potts model as a hierarchy: an implicit root with one leaf per
/// label, data terms copied, every leaf carrying the shared boundary
/// weight, and nothing on the root.
pub fn from_potts<T: Scalar>(spec: &PottsSpec<T>) -> Result<GhmfProblem<T>, ReductionError> {
    if spec.labels.len() < 2 {
        return Err(ReductionError::TooFewLabels(spec.labels.len()));
    }
    if spec.data_terms.len() != spec.labels.len() {
        return Err(ReductionError::Problem(ProblemError::WrongArity {
            want: spec.labels.len(),
            got: spec.data_terms.len(),
        }));
    }
    let mut entries: Vec<(&str, Option<&str>)> = vec![(ROOT_NAME, None)];
    for name in &spec.labels {
        entries.push((name.as_str(), Some(ROOT_NAME)));
    }
    let hierarchy = build_hierarchy(&entries)?;
    let n = hierarchy.node_count();
    let mut data: Vec<Option<ScalarField<T>>> = vec![None; n];
    let mut smooth: Vec<ScalarField<T>> = vec![ScalarField::zeros(&spec.geometry); n];
    for (name, term) in spec.labels.iter().zip(&spec.data_terms) {
        let id = hierarchy.id_of(name).expect("label was just declared");
        data[id.index()] = Some(term.clone());
        smooth[id.index()] = spec.smoothness.clone();
    }
    Ok(GhmfProblem::new(
        hierarchy,
        spec.geometry.clone(),
        data,
        smooth,
    )?)
}

/// One level of an ordered model.
#[derive(Debug, Clone)]
pub struct IshikawaLevel<T: Scalar> {
    /// Data term `D_i`; the level-0 term is a constant contribution since
    /// the level-0 weight is fixed to one.
    pub data: ScalarField<T>,
    /// Boundary weight `S_i` of the level's indicator; the level-0 weight
    /// is never used.
    pub smoothness: ScalarField<T>,
}

/// Linearly ordered model over levels `0..=N` whose per-level indicators
/// must be monotone: `u_0 = 1 >= u_1 >= ... >= u_N >= 0`.
#[derive(Debug, Clone)]
pub struct IshikawaSpec<T: Scalar> {
    pub geometry: GridGeometry,
    /// Levels `0..=N` in order; at least two (N >= 1).
    pub levels: Vec<IshikawaLevel<T>>,
}

/// Where each ordered-model level lives inside the constructed hierarchy.
#[derive(Debug, Clone)]
pub struct ReconstructionMap {
    /// `level_labels[i]` is the node carrying level `i` (`L_i`); `L_0` is
    /// the root, `L_N` the only non-dummy leaf.
    pub level_labels: Vec<LabelId>,
    /// `dummy_labels[i - 1]` is the dummy leaf `B_i` holding the mass that
    /// stops at level `i - 1`, for `i` in `1..=N`.
    pub dummy_labels: Vec<LabelId>,
}

impl ReconstructionMap {
    /// Number of levels above level zero (`N`).
    pub fn level_count(&self) -> usize {
        self.dummy_labels.len()
    }
}

/// Embeds an ordered model as a chain hierarchy: each `L_i` below the top
/// splits into the next level `L_{i+1}` and a dummy leaf `B_{i+1}` with
/// zero data and zero boundary weight, so `u_{B_{i+1}} = u_{L_i} -
/// u_{L_{i+1}}` carries exactly the mass that stops at level `i`. Level
/// data terms are copied onto the `L_i` (the solver normalizes them down
/// to the leaves before iterating).
pub fn from_ishikawa<T: Scalar>(
    spec: &IshikawaSpec<T>,
) -> Result<(GhmfProblem<T>, ReconstructionMap), ReductionError> {
    if spec.levels.len() < 2 {
        return Err(ReductionError::InvalidLevels(spec.levels.len()));
    }
    let n_levels = spec.levels.len() - 1; // N
    let level_names: Vec<String> = (0..=n_levels).map(|i| format!("L{i}")).collect();
    let dummy_names: Vec<String> = (1..=n_levels).map(|i| format!("B{i}")).collect();
    let mut entries: Vec<(&str, Option<&str>)> = vec![(level_names[0].as_str(), None)];
    for i in 1..=n_levels {
        entries.push((level_names[i].as_str(), Some(level_names[i - 1].as_str())));
        entries.push((dummy_names[i - 1].as_str(), Some(level_names[i - 1].as_str())));
    }
    let hierarchy = build_hierarchy(&entries)?;
    let n = hierarchy.node_count();
    let mut data: Vec<Option<ScalarField<T>>> = vec![None; n];
    let mut smooth: Vec<ScalarField<T>> = vec![ScalarField::zeros(&spec.geometry); n];
    let mut level_labels = Vec::with_capacity(n_levels + 1);
    let mut dummy_labels = Vec::with_capacity(n_levels);
    for (i, level) in spec.levels.iter().enumerate() {
        let id = hierarchy
            .id_of(&level_names[i])
            .expect("level node was just declared");
        data[id.index()] = Some(level.data.clone());
        smooth[id.index()] = level.smoothness.clone();
        level_labels.push(id);
    }
    for name in &dummy_names {
        let id = hierarchy.id_of(name).expect("dummy was just declared");
        data[id.index()] = Some(ScalarField::zeros(&spec.geometry));
        dummy_labels.push(id);
    }
    let problem = GhmfProblem::new(hierarchy, spec.geometry.clone(), data, smooth)?;
    Ok((
        problem,
        ReconstructionMap {
            level_labels,
            dummy_labels,
        },
    ))
}

/// Recovers the per-level weights `u_{L_i}` for `i` in `0..=N` from a
/// solved labeling of the hierarchy built by [`from_ishikawa`]: the top
/// level is copied from its leaf and each level below adds back the mass
/// parked in its dummy sibling (`u_{L_i} = u_{L_{i+1}} + u_{B_{i+1}}`).
/// Level zero is constant one.
pub fn reconstruct_ishikawa<T: Scalar>(
    labeling: &Labeling<T>,
    map: &ReconstructionMap,
) -> Result<Vec<ScalarField<T>>, ReductionError> {
    let n_levels = map.level_count();
    if map.level_labels.len() != n_levels + 1 {
        return Err(ReductionError::MapMismatch(format!(
            "{} level labels for {} dummies",
            map.level_labels.len(),
            n_levels
        )));
    }
    let top = labeling
        .get(map.level_labels[n_levels])
        .ok_or_else(|| ReductionError::MapMismatch("top level weight missing".to_string()))?;
    let geometry = top.geometry().clone();
    let mut levels: Vec<Option<ScalarField<T>>> = vec![None; n_levels + 1];
    levels[n_levels] = Some(top.clone());
    for i in (1..n_levels).rev() {
        let above = levels[i + 1].as_ref().unwrap();
        let dummy = labeling.get(map.dummy_labels[i]).ok_or_else(|| {
            ReductionError::MapMismatch(format!("dummy weight for level {i} missing"))
        })?;
        if dummy.geometry() != &geometry {
            return Err(ReductionError::MapMismatch(
                "level fields disagree on geometry".to_string(),
            ));
        }
        let above_values = above.values();
        let dummy_values = dummy.values();
        levels[i] = Some(ScalarField::from_fn(&geometry, |x| {
            above_values[x] + dummy_values[x]
        }));
    }
    levels[0] = Some(ScalarField::constant(&geometry, T::one()));
    Ok(levels.into_iter().map(|f| f.unwrap()).collect())
}

/// Rewrites a problem into the equivalent normalized form: walks the tree
/// top-down adding each branch's data term into all of its children, then
/// subtracts the per-voxel minimum over the leaves so every leaf term is
/// non-negative with a zero minimum at each voxel. Returns the rewritten
/// problem and the subtracted offset field; for any labeling satisfying
/// the hierarchy constraints,
/// `E_original(u) = E_rewritten(u) + offset.sum()`.
/// A problem already in normalized minimum-zero form is returned unchanged
/// with a zero offset.
pub fn pushdown_data<T: Scalar>(problem: &GhmfProblem<T>) -> (GhmfProblem<T>, ScalarField<T>) {
    let hierarchy = problem.hierarchy();
    let geometry = problem.geometry();
    let mut data: Vec<Option<ScalarField<T>>> = problem.data_terms().to_vec();

    for label in hierarchy.preorder() {
        if hierarchy.is_leaf(label) {
            continue;
        }
        if let Some(own) = data[label.index()].take() {
            for &child in hierarchy.children(label) {
                let own_values = own.values();
                data[child.index()] = Some(match data[child.index()].take() {
                    Some(existing) => {
                        let existing_values = existing.values();
                        ScalarField::from_fn(geometry, |i| existing_values[i] + own_values[i])
                    }
                    None => own.clone(),
                });
            }
        }
    }

    let leaves = hierarchy.leaves();
    let offset = ScalarField::from_fn(geometry, |i| {
        leaves.iter().fold(T::infinity(), |acc, &leaf| {
            let v = data[leaf.index()]
                .as_ref()
                .map_or(T::zero(), |f| f.values()[i]);
            acc.min(v)
        })
    });

    if offset.values().iter().any(|&v| v != T::zero()) {
        for &leaf in &leaves {
            let offset_values = offset.values();
            data[leaf.index()] = Some(match data[leaf.index()].take() {
                Some(existing) => {
                    let existing_values = existing.values();
                    ScalarField::from_fn(geometry, |i| existing_values[i] - offset_values[i])
                }
                None => ScalarField::from_fn(geometry, |i| -offset_values[i]),
            });
        }
    }

    let rewritten = GhmfProblem::new(
        hierarchy.clone(),
        geometry.clone(),
        data,
        problem.smoothness_terms().to_vec(),
    )
    .expect("pushdown preserves problem validity");
    (rewritten, offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::primal_energy;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn geom(dims: &[usize]) -> GridGeometry {
        GridGeometry::new(dims).unwrap()
    }

    fn constant_field(g: &GridGeometry, v: f64) -> ScalarField<f64> {
        ScalarField::constant(g, v)
    }

    #[test]
    fn potts_builds_flat_tree_with_shared_smoothness() {
        let g = geom(&[2, 2]);
        let spec = PottsSpec {
            labels: vec!["bg".to_string(), "fg".to_string(), "edge".to_string()],
            geometry: g.clone(),
            data_terms: vec![
                constant_field(&g, 0.1),
                constant_field(&g, 0.2),
                constant_field(&g, 0.3),
            ],
            smoothness: constant_field(&g, 0.5),
        };
        let p = from_potts(&spec).unwrap();
        let h = p.hierarchy();
        assert_eq!(h.node_count(), 4);
        assert_eq!(h.leaves().len(), 3);
        assert_eq!(h.depth(), 1);
        assert!(p.data_term(h.root()).is_none());
        for &leaf in &h.leaves() {
            assert_eq!(p.smoothness(leaf).values()[0], 0.5);
            assert!(p.data_term(leaf).is_some());
        }
        assert!(p.is_normalized());
    }

    #[test]
    fn potts_needs_two_labels() {
        let g = geom(&[2]);
        let spec = PottsSpec {
            labels: vec!["only".to_string()],
            geometry: g.clone(),
            data_terms: vec![constant_field(&g, 0.0)],
            smoothness: constant_field(&g, 0.0),
        };
        assert!(matches!(
            from_potts(&spec).unwrap_err(),
            ReductionError::TooFewLabels(1)
        ));
    }

    #[test]
    fn ishikawa_two_levels_builds_five_nodes() {
        let g = geom(&[4]);
        let level = |d: f64, s: f64| IshikawaLevel {
            data: constant_field(&g, d),
            smoothness: constant_field(&g, s),
        };
        let spec = IshikawaSpec {
            geometry: g.clone(),
            levels: vec![level(0.0, 0.0), level(0.5, 0.1), level(0.9, 0.2)],
        };
        let (p, map) = from_ishikawa(&spec).unwrap();
        let h = p.hierarchy();
        assert_eq!(h.node_count(), 5);
        assert_eq!(map.level_count(), 2);
        // Chain: L0 -> {L1, B1}, L1 -> {L2, B2}.
        assert_eq!(h.name(h.root()), "L0");
        assert_eq!(h.parent(map.level_labels[1]), Some(h.root()));
        assert_eq!(h.parent(map.dummy_labels[0]), Some(h.root()));
        assert_eq!(h.parent(map.level_labels[2]), Some(map.level_labels[1]));
        assert_eq!(h.parent(map.dummy_labels[1]), Some(map.level_labels[1]));
        assert!(h.is_leaf(map.level_labels[2]));
        // Dummies carry zero data and zero boundary weight; levels carry
        // their own terms.
        for &dummy in &map.dummy_labels {
            assert!(p.data_term(dummy).unwrap().values().iter().all(|&v| v == 0.0));
            assert!(p.smoothness(dummy).values().iter().all(|&v| v == 0.0));
        }
        assert_eq!(p.smoothness(map.level_labels[1]).values()[0], 0.1);
        assert_eq!(p.smoothness(map.level_labels[2]).values()[0], 0.2);
        // Branch data terms make this un-normalized until pushed down.
        assert!(!p.is_normalized());
    }

    #[test]
    fn ishikawa_needs_two_levels() {
        let g = geom(&[2]);
        let spec: IshikawaSpec<f64> = IshikawaSpec {
            geometry: g.clone(),
            levels: vec![IshikawaLevel {
                data: constant_field(&g, 0.0),
                smoothness: constant_field(&g, 0.0),
            }],
        };
        assert!(matches!(
            from_ishikawa(&spec).unwrap_err(),
            ReductionError::InvalidLevels(1)
        ));
    }

    #[test]
    fn reconstruction_is_a_suffix_sum_over_dummies() {
        // Independent oracle: u_{L_i} = u_{L_N} + sum_{j > i} u_{B_j}.
        let g = geom(&[3]);
        let level = |d: f64| IshikawaLevel {
            data: constant_field(&g, d),
            smoothness: constant_field(&g, 0.0),
        };
        let spec = IshikawaSpec {
            geometry: g.clone(),
            levels: vec![level(0.0), level(0.1), level(0.2), level(0.3)],
        };
        let (p, map) = from_ishikawa(&spec).unwrap();
        let mut labeling = Labeling::new(p.hierarchy().node_count());
        let top = vec![0.1, 0.5, 0.2];
        let b_fields = [
            vec![0.2, 0.1, 0.3], // B1
            vec![0.3, 0.2, 0.1], // B2
            vec![0.4, 0.2, 0.4], // B3
        ];
        labeling.set(
            map.level_labels[3],
            ScalarField::from_values(&g, top.clone()).unwrap(),
        );
        for (k, values) in b_fields.iter().enumerate() {
            labeling.set(
                map.dummy_labels[k],
                ScalarField::from_values(&g, values.clone()).unwrap(),
            );
        }
        let levels = reconstruct_ishikawa(&labeling, &map).unwrap();
        assert_eq!(levels.len(), 4);
        for x in 0..3 {
            for i in 1..=3 {
                let expected: f64 =
                    top[x] + (i + 1..=3).map(|j| b_fields[j - 1][x]).sum::<f64>();
                assert!((levels[i].values()[x] - expected).abs() <= 1e-15);
            }
            assert_eq!(levels[0].values()[x], 1.0);
        }
        // Monotone because all dummy masses are non-negative.
        for i in 0..3 {
            for x in 0..3 {
                assert!(levels[i + 1].values()[x] <= levels[i].values()[x] + 1e-15);
            }
        }
    }

    #[test]
    fn reconstruction_reports_missing_fields() {
        let g = geom(&[2]);
        let level = |d: f64| IshikawaLevel {
            data: constant_field(&g, d),
            smoothness: constant_field(&g, 0.0),
        };
        let spec = IshikawaSpec {
            geometry: g.clone(),
            levels: vec![level(0.0), level(0.1), level(0.2)],
        };
        let (p, map) = from_ishikawa(&spec).unwrap();
        let labeling: Labeling<f64> = Labeling::new(p.hierarchy().node_count());
        assert!(matches!(
            reconstruct_ishikawa(&labeling, &map).unwrap_err(),
            ReductionError::MapMismatch(_)
        ));
    }

    /// root -> A -> {B, C} with data on the branch A.
    fn chain_problem(d_a: f64, d_b: f64, d_c: f64) -> GhmfProblem<f64> {
        let h = build_hierarchy(&[
            ("S", None),
            ("A", Some("S")),
            ("B", Some("A")),
            ("C", Some("A")),
        ])
        .unwrap();
        let g = geom(&[1]);
        let mut data = vec![None; 4];
        data[h.id_of("A").unwrap().index()] = Some(constant_field(&g, d_a));
        data[h.id_of("B").unwrap().index()] = Some(constant_field(&g, d_b));
        data[h.id_of("C").unwrap().index()] = Some(constant_field(&g, d_c));
        let smooth = vec![ScalarField::zeros(&g); 4];
        GhmfProblem::new(h, g, data, smooth).unwrap()
    }

    #[test]
    fn pushdown_moves_branch_data_and_shifts_minimum() {
        // A carries 2; leaves B, C carry 1 and 3. Pushed: B = 3, C = 5;
        // after shifting the minimum: B = 0, C = 2, offset = 3.
        let p = chain_problem(2.0, 1.0, 3.0);
        let (pushed, offset) = pushdown_data(&p);
        let h = pushed.hierarchy();
        assert!(pushed.data_term(h.id_of("A").unwrap()).is_none());
        assert!(pushed.data_term(h.root()).is_none());
        assert_eq!(
            pushed.data_term(h.id_of("B").unwrap()).unwrap().values(),
            &[0.0]
        );
        assert_eq!(
            pushed.data_term(h.id_of("C").unwrap()).unwrap().values(),
            &[2.0]
        );
        assert_eq!(offset.values(), &[3.0]);
        assert!(pushed.is_normalized());
    }

    #[test]
    fn pushdown_shifts_negative_leaf_terms_up_to_zero() {
        // Leaves at -1 and -4 shift to 3 and 0 with offset -4.
        let h = build_hierarchy(&[("S", None), ("B", Some("S")), ("C", Some("S"))]).unwrap();
        let g = geom(&[1]);
        let mut data = vec![None; 3];
        data[h.id_of("B").unwrap().index()] = Some(constant_field(&g, -1.0));
        data[h.id_of("C").unwrap().index()] = Some(constant_field(&g, -4.0));
        let p = GhmfProblem::new(h, g, data, vec![ScalarField::zeros(&geom(&[1])); 3]).unwrap();
        let (pushed, offset) = pushdown_data(&p);
        let h = pushed.hierarchy();
        assert_eq!(
            pushed.data_term(h.id_of("B").unwrap()).unwrap().values(),
            &[3.0]
        );
        assert_eq!(
            pushed.data_term(h.id_of("C").unwrap()).unwrap().values(),
            &[0.0]
        );
        assert_eq!(offset.values(), &[-4.0]);
    }

    #[test]
    fn pushdown_is_identity_on_min_zero_leaf_problems() {
        let h = build_hierarchy(&[("S", None), ("B", Some("S")), ("C", Some("S"))]).unwrap();
        let g = geom(&[2]);
        let mut data = vec![None; 3];
        data[h.id_of("B").unwrap().index()] =
            Some(ScalarField::from_values(&g, vec![0.0, 2.0]).unwrap());
        data[h.id_of("C").unwrap().index()] =
            Some(ScalarField::from_values(&g, vec![1.0, 0.0]).unwrap());
        let p = GhmfProblem::new(h, g, data, vec![ScalarField::zeros(&geom(&[2])); 3]).unwrap();
        let (pushed, offset) = pushdown_data(&p);
        assert!(offset.values().iter().all(|&v| v == 0.0));
        let h = pushed.hierarchy();
        assert_eq!(
            pushed.data_term(h.id_of("B").unwrap()).unwrap().values(),
            &[0.0, 2.0]
        );
        assert_eq!(
            pushed.data_term(h.id_of("C").unwrap()).unwrap().values(),
            &[1.0, 0.0]
        );
    }

    #[test]
    fn pushdown_changes_energy_by_offset_sum_on_feasible_labelings() {
        let mut rng = StdRng::seed_from_u64(41);
        let h = build_hierarchy(&[
            ("S", None),
            ("C", Some("S")),
            ("T", Some("S")),
            ("B", Some("C")),
            ("M", Some("C")),
        ])
        .unwrap();
        let g = geom(&[2, 2]);
        let n = g.voxel_count();
        let mut data: Vec<Option<ScalarField<f64>>> = vec![None; 5];
        for name in ["S", "C", "T", "B", "M"] {
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            data[h.id_of(name).unwrap().index()] =
                Some(ScalarField::from_values(&g, values).unwrap());
        }
        let smooth: Vec<ScalarField<f64>> =
            (0..5).map(|_| constant_field(&g, rng.gen_range(0.0..0.5))).collect();
        let p = GhmfProblem::new(h.clone(), g.clone(), data, smooth).unwrap();
        let (pushed, offset) = pushdown_data(&p);
        let offset_sum: f64 = offset.values().iter().sum();

        for _ in 0..20 {
            // Random leaf weights on the simplex at every voxel.
            let leaves = h.leaves();
            let mut weights: Vec<Vec<f64>> = vec![vec![0.0; n]; leaves.len()];
            for x in 0..n {
                let raw: Vec<f64> = (0..leaves.len()).map(|_| rng.gen_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for (k, w) in raw.iter().enumerate() {
                    weights[k][x] = w / total;
                }
            }
            let mut labeling = Labeling::new(h.node_count());
            for (k, &leaf) in leaves.iter().enumerate() {
                labeling.set(leaf, ScalarField::from_values(&g, weights[k].clone()).unwrap());
            }
            let e_original = primal_energy(&p, &labeling).unwrap();
            let e_pushed = primal_energy(&pushed, &labeling).unwrap();
            assert!(
                (e_original - e_pushed - offset_sum).abs() <= 1e-12,
                "energy difference {} != offset sum {}",
                e_original - e_pushed,
                offset_sum
            );
        }
    }
}
