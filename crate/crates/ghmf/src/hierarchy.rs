//! Rooted label tree: leaves partition the image, branches are unions of
//! their children, and the root stands for the whole image.
//!
//! Nodes are addressed by dense [`LabelId`]s so per-label data can live in
//! plain vectors. A hierarchy built through [`build_hierarchy`] is always
//! structurally valid; [`Hierarchy::validate`] re-checks the invariants on
//! hierarchies assembled by hand and reports every violation it finds.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Dense index of a label; assigned in first-appearance order by
/// [`build_hierarchy`] and usable directly as a vector index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelId(usize);

impl LabelId {
    pub(crate) fn new(index: usize) -> Self {
        LabelId(index)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for LabelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One label in the tree.
#[derive(Debug, Clone)]
pub struct Node {
    name: String,
    parent: Option<LabelId>,
    children: Vec<LabelId>,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parent(&self) -> Option<LabelId> {
        self.parent
    }

    pub fn children(&self) -> &[LabelId] {
        &self.children
    }
}

/// Structural problems in a label tree.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("no root: every node has a parent")]
    NoRoot,
    #[error("multiple parentless nodes: '{0}' and '{1}'")]
    MultipleRoots(String, String),
    #[error("cycle through node '{0}'")]
    CycleDetected(String),
    #[error("parent '{0}' is never declared")]
    UnknownParent(String),
    #[error("node '{0}' is not reachable from the root")]
    Disconnected(String),
    #[error("duplicate node name '{0}'")]
    DuplicateName(String),
    #[error("parent/child links of node '{0}' are inconsistent")]
    InconsistentLinks(String),
}

/// A validated rooted label tree.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    nodes: Vec<Node>,
    root: LabelId,
}

/// Builds a hierarchy from `(name, parent)` entries; a `None` parent
/// declares the root. Label ids are dense and follow first-appearance
/// order (an entry's name, then its parent name); children keep their
/// declaration order.
pub fn build_hierarchy(entries: &[(&str, Option<&str>)]) -> Result<Hierarchy, HierarchyError> {
    let mut ids: HashMap<&str, LabelId> = HashMap::new();
    let mut names: Vec<&str> = Vec::new();

    // First pass: assign ids in first-appearance order and record parents.
    let mut parent_names: Vec<Option<&str>> = Vec::new();
    let mut declared: Vec<bool> = Vec::new();
    for &(name, parent) in entries {
        let id = *ids.entry(name).or_insert_with(|| {
            names.push(name);
            parent_names.push(None);
            declared.push(false);
            LabelId(names.len() - 1)
        });
        if declared[id.0] {
            return Err(HierarchyError::DuplicateName(name.to_string()));
        }
        declared[id.0] = true;
        parent_names[id.0] = parent;
        if let Some(p) = parent {
            ids.entry(p).or_insert_with(|| {
                names.push(p);
                parent_names.push(None);
                declared.push(false);
                LabelId(names.len() - 1)
            });
        }
    }

    // Every name referenced as a parent must itself be declared.
    for &(_, parent) in entries {
        if let Some(p) = parent {
            if !declared[ids[p].0] {
                return Err(HierarchyError::UnknownParent(p.to_string()));
            }
        }
    }

    let parents: Vec<Option<LabelId>> = (0..names.len())
        .map(|i| parent_names[i].map(|p| ids[p]))
        .collect();

    // Cycles first: a two-node cycle has no parentless node either, and the
    // cycle is the more precise diagnosis.
    if let Some(name) = find_cycle(&parents, &names) {
        return Err(HierarchyError::CycleDetected(name));
    }

    let roots: Vec<usize> = (0..names.len()).filter(|&i| parents[i].is_none()).collect();
    let root = match roots.len() {
        0 => return Err(HierarchyError::NoRoot),
        1 => LabelId(roots[0]),
        _ => {
            return Err(HierarchyError::MultipleRoots(
                names[roots[0]].to_string(),
                names[roots[1]].to_string(),
            ))
        }
    };

    let mut nodes: Vec<Node> = names
        .iter()
        .zip(&parents)
        .map(|(&name, &parent)| Node {
            name: name.to_string(),
            parent,
            children: Vec::new(),
        })
        .collect();
    for &(name, _) in entries {
        let id = ids[name];
        if let Some(p) = parents[id.0] {
            nodes[p.0].children.push(id);
        }
    }

    let hierarchy = Hierarchy { nodes, root };
    if let Some(unreached) = hierarchy.first_unreachable() {
        return Err(HierarchyError::Disconnected(
            hierarchy.nodes[unreached.0].name.clone(),
        ));
    }
    Ok(hierarchy)
}

/// Walks parent links looking for a cycle; returns the name of a node on it.
fn find_cycle(parents: &[Option<LabelId>], names: &[&str]) -> Option<String> {
    // 0 = unseen, 1 = on the current walk, 2 = known acyclic.
    let mut mark = vec![0u8; parents.len()];
    for start in 0..parents.len() {
        if mark[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut at = start;
        loop {
            if mark[at] == 1 {
                return Some(names[at].to_string());
            }
            if mark[at] == 2 {
                break;
            }
            mark[at] = 1;
            path.push(at);
            match parents[at] {
                Some(p) => at = p.0,
                None => break,
            }
        }
        for i in path {
            mark[i] = 2;
        }
    }
    None
}

impl Hierarchy {
    /// Assembles a hierarchy without checking the tree invariants.
    /// [`Hierarchy::validate`] reports what is wrong with the result;
    /// the traversals assume a valid tree.
    pub fn from_raw_parts(nodes: Vec<Node>, root: LabelId) -> Self {
        Hierarchy { nodes, root }
    }

    /// Builds a raw node for [`Hierarchy::from_raw_parts`].
    pub fn raw_node(name: &str, parent: Option<LabelId>, children: Vec<LabelId>) -> Node {
        Node {
            name: name.to_string(),
            parent,
            children,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> LabelId {
        self.root
    }

    pub fn node(&self, id: LabelId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn name(&self, id: LabelId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn parent(&self, id: LabelId) -> Option<LabelId> {
        self.nodes[id.0].parent
    }

    pub fn children(&self, id: LabelId) -> &[LabelId] {
        &self.nodes[id.0].children
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .map(LabelId)
    }

    /// A leaf has no children; the root of a single-node tree is a leaf.
    pub fn is_leaf(&self, id: LabelId) -> bool {
        self.nodes[id.0].children.is_empty()
    }

    pub fn is_branch(&self, id: LabelId) -> bool {
        !self.is_leaf(id)
    }

    /// All label ids in dense order.
    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        (0..self.nodes.len()).map(LabelId)
    }

    /// Leaves in id order.
    pub fn leaves(&self) -> Vec<LabelId> {
        self.labels().filter(|&l| self.is_leaf(l)).collect()
    }

    /// Edges on the longest root-to-node path.
    pub fn depth(&self) -> usize {
        self.preorder()
            .into_iter()
            .map(|l| {
                let mut d = 0;
                let mut at = l;
                while let Some(p) = self.parent(at) {
                    d += 1;
                    at = p;
                }
                d
            })
            .max()
            .unwrap_or(0)
    }

    /// Every node after all of its descendants (children in declaration
    /// order). Assumes a valid tree.
    pub fn postorder(&self) -> Vec<LabelId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        // (node, next child position) pairs.
        let mut stack = vec![(self.root, 0usize)];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            let children = self.children(node);
            if *next < children.len() {
                let child = children[*next];
                *next += 1;
                stack.push((child, 0));
            } else {
                order.push(node);
                stack.pop();
            }
        }
        order
    }

    /// Every node before all of its descendants. Assumes a valid tree.
    pub fn preorder(&self) -> Vec<LabelId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(node) = stack.pop() {
            order.push(node);
            // Push in reverse so children come out in declaration order.
            for &child in self.children(node).iter().rev() {
                stack.push(child);
            }
        }
        order
    }

    /// Re-checks the tree invariants, returning every violation found
    /// (empty means valid). Works on arbitrary raw node sets.
    pub fn validate(&self) -> Vec<HierarchyError> {
        let mut violations = Vec::new();
        let n = self.nodes.len();

        let mut seen: HashMap<&str, usize> = HashMap::new();
        for node in &self.nodes {
            *seen.entry(node.name.as_str()).or_insert(0) += 1;
        }
        for (name, count) in &seen {
            if *count > 1 {
                violations.push(HierarchyError::DuplicateName(name.to_string()));
            }
        }

        // Parent/child links must agree in both directions.
        for (i, node) in self.nodes.iter().enumerate() {
            let mut consistent = true;
            if let Some(p) = node.parent {
                consistent &= p.0 < n
                    && self.nodes[p.0]
                        .children
                        .iter()
                        .filter(|&&c| c.0 == i)
                        .count()
                        == 1;
            }
            for &child in &node.children {
                consistent &= child.0 < n && self.nodes[child.0].parent == Some(LabelId(i));
            }
            let mut sorted = node.children.clone();
            sorted.sort();
            sorted.dedup();
            consistent &= sorted.len() == node.children.len();
            if !consistent {
                violations.push(HierarchyError::InconsistentLinks(node.name.clone()));
            }
        }

        let parents: Vec<Option<LabelId>> = self
            .nodes
            .iter()
            .map(|node| node.parent.filter(|p| p.0 < n))
            .collect();
        let names: Vec<&str> = self.nodes.iter().map(|node| node.name.as_str()).collect();
        if let Some(name) = find_cycle(&parents, &names) {
            violations.push(HierarchyError::CycleDetected(name));
        }

        let roots: Vec<usize> = (0..n).filter(|&i| self.nodes[i].parent.is_none()).collect();
        match roots.len() {
            0 if n > 0 => violations.push(HierarchyError::NoRoot),
            0 => {}
            1 => {}
            _ => violations.push(HierarchyError::MultipleRoots(
                names[roots[0]].to_string(),
                names[roots[1]].to_string(),
            )),
        }

        if self.root.0 >= n || self.nodes[self.root.0].parent.is_some() {
            violations.push(HierarchyError::InconsistentLinks(format!(
                "designated root {}",
                self.root
            )));
        } else if let Some(unreached) = self.first_unreachable() {
            violations.push(HierarchyError::Disconnected(
                self.nodes[unreached.0].name.clone(),
            ));
        }

        violations
    }

    /// First node (in id order) not reachable from the root via child links.
    fn first_unreachable(&self) -> Option<LabelId> {
        let n = self.nodes.len();
        let mut reached = vec![false; n];
        let mut stack = vec![self.root.0];
        while let Some(i) = stack.pop() {
            if i >= n || reached[i] {
                continue;
            }
            reached[i] = true;
            for &child in &self.nodes[i].children {
                stack.push(child.0);
            }
        }
        (0..n).find(|&i| !reached[i]).map(LabelId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// The cardiac example tree: root -> {C, T}, C -> {B, M, Sc}.
    pub(crate) fn cardiac() -> Hierarchy {
        build_hierarchy(&[
            ("S", None),
            ("C", Some("S")),
            ("T", Some("S")),
            ("B", Some("C")),
            ("M", Some("C")),
            ("Sc", Some("C")),
        ])
        .unwrap()
    }

    #[test]
    fn builds_cardiac_tree() {
        let h = cardiac();
        assert_eq!(h.node_count(), 6);
        assert_eq!(h.name(h.root()), "S");
        let leaf_names: Vec<&str> = h.leaves().iter().map(|&l| h.name(l)).collect();
        assert_eq!(leaf_names, ["T", "B", "M", "Sc"]);
        let c = h.id_of("C").unwrap();
        assert!(h.is_branch(c));
        assert_eq!(h.children(c).len(), 3);
        assert_eq!(h.parent(c), Some(h.root()));
        assert_eq!(h.depth(), 2);
        assert!(h.validate().is_empty());
    }

    #[test]
    fn builds_minimal_binary_tree() {
        let h = build_hierarchy(&[("S", None), ("A", Some("S")), ("B", Some("S"))]).unwrap();
        assert_eq!(h.node_count(), 3);
        assert_eq!(h.leaves().len(), 2);
        assert_eq!(h.depth(), 1);
    }

    #[test]
    fn two_node_cycle_is_detected() {
        let err = build_hierarchy(&[("A", Some("B")), ("B", Some("A"))]).unwrap_err();
        assert!(matches!(err, HierarchyError::CycleDetected(_)));
    }

    #[test]
    fn empty_input_has_no_root() {
        assert_eq!(build_hierarchy(&[]).unwrap_err(), HierarchyError::NoRoot);
    }

    #[test]
    fn undeclared_parent_is_an_error() {
        let err = build_hierarchy(&[("S", None), ("A", Some("X"))]).unwrap_err();
        assert_eq!(err, HierarchyError::UnknownParent("X".to_string()));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let err =
            build_hierarchy(&[("S", None), ("A", Some("S")), ("A", Some("S"))]).unwrap_err();
        assert_eq!(err, HierarchyError::DuplicateName("A".to_string()));
    }

    #[test]
    fn two_parentless_nodes_are_multiple_roots() {
        let err = build_hierarchy(&[("S", None), ("R", None), ("A", Some("S"))]).unwrap_err();
        assert!(matches!(err, HierarchyError::MultipleRoots(_, _)));
    }

    #[test]
    fn validate_reports_multiple_roots_on_raw_nodes() {
        let nodes = vec![
            Hierarchy::raw_node("S", None, vec![]),
            Hierarchy::raw_node("R", None, vec![]),
        ];
        let h = Hierarchy::from_raw_parts(nodes, LabelId(0));
        let violations = h.validate();
        assert!(violations
            .iter()
            .any(|v| matches!(v, HierarchyError::MultipleRoots(_, _))));
        // "R" is also unreachable from the designated root.
        assert!(violations
            .iter()
            .any(|v| matches!(v, HierarchyError::Disconnected(name) if name == "R")));
    }

    #[test]
    fn validate_accepts_single_node_tree() {
        let h = build_hierarchy(&[("S", None)]).unwrap();
        assert!(h.validate().is_empty());
        assert_eq!(h.leaves(), vec![h.root()]);
        assert_eq!(h.postorder(), vec![h.root()]);
    }

    #[test]
    fn validate_reports_inconsistent_links() {
        // Child claims a parent whose children list does not include it.
        let nodes = vec![
            Hierarchy::raw_node("S", None, vec![]),
            Hierarchy::raw_node("A", Some(LabelId(0)), vec![]),
        ];
        let h = Hierarchy::from_raw_parts(nodes, LabelId(0));
        assert!(h
            .validate()
            .iter()
            .any(|v| matches!(v, HierarchyError::InconsistentLinks(name) if name == "A")));
    }

    #[test]
    fn postorder_of_cardiac_tree_puts_children_first() {
        let h = cardiac();
        let order: Vec<&str> = h.postorder().iter().map(|&l| h.name(l)).collect();
        assert_eq!(order, ["B", "M", "Sc", "C", "T", "S"]);
        let order: Vec<&str> = h.preorder().iter().map(|&l| h.name(l)).collect();
        assert_eq!(order, ["S", "C", "B", "M", "Sc", "T"]);
    }

    #[test]
    fn postorder_of_chain_is_leaf_to_root() {
        let h = build_hierarchy(&[("S", None), ("A", Some("S")), ("B", Some("A"))]).unwrap();
        let order: Vec<&str> = h.postorder().iter().map(|&l| h.name(l)).collect();
        assert_eq!(order, ["B", "A", "S"]);
        let order: Vec<&str> = h.preorder().iter().map(|&l| h.name(l)).collect();
        assert_eq!(order, ["S", "A", "B"]);
    }

    proptest! {
        /// Postorder and preorder are permutations of all nodes, postorder
        /// places every node after its children, preorder before them.
        #[test]
        fn traversals_are_consistent_permutations(extra_leaves in 0usize..6, chain in 0usize..4) {
            let mut entries: Vec<(String, Option<String>)> =
                vec![("S".to_string(), None)];
            for i in 0..extra_leaves {
                entries.push((format!("L{i}"), Some("S".to_string())));
            }
            let mut parent = "S".to_string();
            for i in 0..chain {
                let name = format!("C{i}");
                entries.push((name.clone(), Some(parent.clone())));
                parent = name;
            }
            let borrowed: Vec<(&str, Option<&str>)> = entries
                .iter()
                .map(|(n, p)| (n.as_str(), p.as_deref()))
                .collect();
            let h = build_hierarchy(&borrowed).unwrap();

            for order in [h.postorder(), h.preorder()] {
                let mut sorted: Vec<usize> = order.iter().map(|l| l.index()).collect();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..h.node_count()).collect::<Vec<_>>());
            }
            let post = h.postorder();
            let pos = |l: LabelId| post.iter().position(|&x| x == l).unwrap();
            for l in h.labels() {
                for &child in h.children(l) {
                    prop_assert!(pos(child) < pos(l));
                }
            }
            let pre = h.preorder();
            let pos = |l: LabelId| pre.iter().position(|&x| x == l).unwrap();
            for l in h.labels() {
                for &child in h.children(l) {
                    prop_assert!(pos(child) > pos(l));
                }
            }
        }
    }
}
