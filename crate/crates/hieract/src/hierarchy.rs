//! Multi-level semantic label trees: coarse level 0 down to the fine leaf
//! level, with one unique root-to-leaf path per fine label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Deepest tree this crate will accept (levels 0..=7).
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("empty node list")]
    Empty,
    #[error("node ids must be dense and in input order (expected {expected}, got {got})")]
    NonDenseIds { expected: usize, got: usize },
    #[error("cycle detected through node '{0}'")]
    CycleDetected(String),
    #[error("node '{name}' at level {level} has a missing or invalid parent")]
    OrphanNode { name: String, level: usize },
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("level {0} is declared but contains no nodes")]
    EmptyLevel(usize),
    #[error("internal node '{0}' has no children")]
    ChildlessInternal(String),
    #[error("node '{0}' is a leaf and has no sub-labels")]
    LeafHasNoChildren(String),
    #[error("hierarchy depth {0} exceeds the supported maximum of {MAX_DEPTH}")]
    TooDeep(usize),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("invalid hierarchy file: {0}")]
    File(String),
}

/// One label in the tree. `parent` is `None` exactly at level 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelNode {
    pub id: usize,
    pub name: String,
    pub level: usize,
    pub parent: Option<usize>,
}

/// Root-to-leaf path for one fine label; `node_ids[i]` is the unique
/// ancestor at level `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafPath {
    pub leaf_id: usize,
    pub node_ids: Vec<usize>,
}

/// A validated, immutable label tree. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct LabelHierarchy {
    nodes: Vec<LabelNode>,
    levels: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    index_in_level: Vec<usize>,
    paths: Vec<LeafPath>,
}

/// Per-transition branching statistics reported by [`LabelHierarchy::balance_metrics`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BranchingStats {
    /// Parent level of the transition (children live at `level + 1`).
    pub level: usize,
    pub min_children: usize,
    pub max_children: usize,
    pub mean_children: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub depth: usize,
    pub level_sizes: Vec<usize>,
    pub transitions: Vec<BranchingStats>,
}

/// Validate a node list and build the tree. Ids must be dense `0..n` in
/// input order; every invariant in the module docs is checked here so the
/// rest of the crate can index without rechecking.
pub fn build_hierarchy(nodes: Vec<LabelNode>) -> Result<LabelHierarchy, HierarchyError> {
    if nodes.is_empty() {
        return Err(HierarchyError::Empty);
    }
    for (i, n) in nodes.iter().enumerate() {
        if n.id != i {
            return Err(HierarchyError::NonDenseIds {
                expected: i,
                got: n.id,
            });
        }
    }
    let num_levels = nodes.iter().map(|n| n.level).max().unwrap() + 1;
    if num_levels > MAX_DEPTH {
        return Err(HierarchyError::TooDeep(num_levels));
    }

    // Parent ids must exist before we can walk ancestor chains.
    for n in &nodes {
        match n.parent {
            Some(p) if p >= nodes.len() => {
                return Err(HierarchyError::OrphanNode {
                    name: n.name.clone(),
                    level: n.level,
                })
            }
            _ => {}
        }
    }
    // Cycle walk: any chain longer than the node count has looped.
    for n in &nodes {
        let mut cursor = n.parent;
        let mut steps = 0usize;
        while let Some(p) = cursor {
            steps += 1;
            if steps > nodes.len() {
                return Err(HierarchyError::CycleDetected(n.name.clone()));
            }
            cursor = nodes[p].parent;
        }
    }
    // Level/parent consistency: parent present iff level > 0, parent one level up.
    for n in &nodes {
        match n.parent {
            None if n.level != 0 => {
                return Err(HierarchyError::OrphanNode {
                    name: n.name.clone(),
                    level: n.level,
                })
            }
            Some(p) => {
                if n.level == 0 || nodes[p].level + 1 != n.level {
                    return Err(HierarchyError::OrphanNode {
                        name: n.name.clone(),
                        level: n.level,
                    });
                }
            }
            None => {}
        }
    }

    let mut levels: Vec<Vec<usize>> = vec![Vec::new(); num_levels];
    let mut index_in_level = vec![0usize; nodes.len()];
    for n in &nodes {
        index_in_level[n.id] = levels[n.level].len();
        levels[n.level].push(n.id);
    }
    for (lvl, ids) in levels.iter().enumerate() {
        if ids.is_empty() {
            return Err(HierarchyError::EmptyLevel(lvl));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in ids {
            if !seen.insert(nodes[id].name.as_str()) {
                return Err(HierarchyError::DuplicateName(nodes[id].name.clone()));
            }
        }
    }

    let mut children: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for n in &nodes {
        if let Some(p) = n.parent {
            children[p].push(n.id);
        }
    }
    let leaf_level = num_levels - 1;
    for n in &nodes {
        if n.level < leaf_level && children[n.id].is_empty() {
            return Err(HierarchyError::ChildlessInternal(n.name.clone()));
        }
    }

    let mut paths = Vec::with_capacity(levels[leaf_level].len());
    for &leaf in &levels[leaf_level] {
        let mut chain = Vec::with_capacity(num_levels);
        let mut cursor = Some(leaf);
        while let Some(id) = cursor {
            chain.push(id);
            cursor = nodes[id].parent;
        }
        chain.reverse();
        debug_assert_eq!(chain.len(), num_levels);
        paths.push(LeafPath {
            leaf_id: leaf,
            node_ids: chain,
        });
    }

    Ok(LabelHierarchy {
        nodes,
        levels,
        children,
        index_in_level,
        paths,
    })
}

impl LabelHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: usize) -> Result<&LabelNode, HierarchyError> {
        self.nodes.get(id).ok_or(HierarchyError::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[LabelNode] {
        &self.nodes
    }

    /// Node ids at one level, in file order.
    pub fn level(&self, level: usize) -> &[usize] {
        &self.levels[level]
    }

    pub fn level_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len()).collect()
    }

    /// Position of a node within its own level.
    pub fn index_in_level(&self, id: usize) -> usize {
        self.index_in_level[id]
    }

    pub fn num_leaves(&self) -> usize {
        self.levels[self.num_levels() - 1].len()
    }

    pub fn leaf_names(&self) -> Vec<&str> {
        self.levels[self.num_levels() - 1]
            .iter()
            .map(|&id| self.nodes[id].name.as_str())
            .collect()
    }

    /// The set Sub(node): all children one level finer.
    pub fn sub_labels(&self, node_id: usize) -> Result<&[usize], HierarchyError> {
        let node = self.node(node_id)?;
        if node.level == self.num_levels() - 1 {
            return Err(HierarchyError::LeafHasNoChildren(node.name.clone()));
        }
        Ok(&self.children[node_id])
    }

    /// One root-to-leaf path per fine label, in leaf-level order.
    pub fn leaf_paths(&self) -> &[LeafPath] {
        &self.paths
    }

    pub fn balance_metrics(&self) -> BalanceReport {
        let mut transitions = Vec::new();
        for lvl in 0..self.num_levels().saturating_sub(1) {
            let counts: Vec<usize> = self.levels[lvl]
                .iter()
                .map(|&id| self.children[id].len())
                .collect();
            let min = *counts.iter().min().unwrap();
            let max = *counts.iter().max().unwrap();
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            transitions.push(BranchingStats {
                level: lvl,
                min_children: min,
                max_children: max,
                mean_children: mean,
            });
        }
        BalanceReport {
            depth: self.num_levels(),
            level_sizes: self.level_sizes(),
            transitions,
        }
    }

    /// Lookup by name; when a name occurs at several levels the coarsest
    /// match wins.
    pub fn find_by_name(&self, name: &str) -> Option<&LabelNode> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

/// On-disk hierarchy document: level arrays coarse→fine plus a child→parent
/// name map. Names must be unique across the whole tree so the parent map
/// is unambiguous.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct HierarchyFile {
    pub levels: Vec<Vec<String>>,
    pub parents: BTreeMap<String, String>,
}

impl HierarchyFile {
    pub fn from_json(text: &str) -> Result<Self, HierarchyError> {
        serde_json::from_str(text).map_err(|e| HierarchyError::File(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy file serializes")
    }

    /// Stable content hash over the canonical JSON form.
    pub fn canonical_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("hierarchy file serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    pub fn build(&self) -> Result<LabelHierarchy, HierarchyError> {
        for (level, names) in self.levels.iter().enumerate() {
            if names.is_empty() {
                return Err(HierarchyError::EmptyLevel(level));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for name in self.levels.iter().flatten() {
            if !seen.insert(name.as_str()) {
                return Err(HierarchyError::DuplicateName(name.clone()));
            }
        }
        let mut id_by_name: std::collections::HashMap<&str, usize> =
            std::collections::HashMap::new();
        let mut nodes = Vec::new();
        for (level, names) in self.levels.iter().enumerate() {
            for name in names {
                let id = nodes.len();
                id_by_name.insert(name.as_str(), id);
                nodes.push(LabelNode {
                    id,
                    name: name.clone(),
                    level,
                    parent: None,
                });
            }
        }
        for node in nodes.iter_mut() {
            if node.level == 0 {
                continue;
            }
            let parent_name =
                self.parents
                    .get(&node.name)
                    .ok_or_else(|| HierarchyError::OrphanNode {
                        name: node.name.clone(),
                        level: node.level,
                    })?;
            node.parent = id_by_name.get(parent_name.as_str()).copied();
            // A parent name that resolves to the wrong level is caught by
            // build_hierarchy; a name that resolves nowhere is an orphan.
            if node.parent.is_none() {
                return Err(HierarchyError::OrphanNode {
                    name: node.name.clone(),
                    level: node.level,
                });
            }
        }
        build_hierarchy(nodes)
    }
}

impl From<&LabelHierarchy> for HierarchyFile {
    fn from(h: &LabelHierarchy) -> Self {
        let levels = (0..h.num_levels())
            .map(|lvl| {
                h.level(lvl)
                    .iter()
                    .map(|&id| h.nodes[id].name.clone())
                    .collect()
            })
            .collect();
        let mut parents = BTreeMap::new();
        for n in h.nodes() {
            if let Some(p) = n.parent {
                parents.insert(n.name.clone(), h.nodes[p].name.clone());
            }
        }
        HierarchyFile { levels, parents }
    }
}

pub fn load_hierarchy(path: &std::path::Path) -> Result<LabelHierarchy, HierarchyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HierarchyError::File(format!("{}: {e}", path.display())))?;
    HierarchyFile::from_json(&text)?.build()
}

fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets::s3dis_fixture;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn two_level() -> LabelHierarchy {
        // A -> {A1, A2}, B -> {B1}
        build_hierarchy(vec![
            LabelNode { id: 0, name: "A".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "B".into(), level: 0, parent: None },
            LabelNode { id: 2, name: "A1".into(), level: 1, parent: Some(0) },
            LabelNode { id: 3, name: "A2".into(), level: 1, parent: Some(0) },
            LabelNode { id: 4, name: "B1".into(), level: 1, parent: Some(1) },
        ])
        .unwrap()
    }

    fn chain(depth: usize) -> LabelHierarchy {
        let nodes = (0..depth)
            .map(|i| LabelNode {
                id: i,
                name: format!("n{i}"),
                level: i,
                parent: if i == 0 { None } else { Some(i - 1) },
            })
            .collect();
        build_hierarchy(nodes).unwrap()
    }

    #[test]
    fn s3dis_fixture_has_expected_level_sizes() {
        let h = s3dis_fixture();
        assert_eq!(h.level_sizes(), vec![3, 6, 13]);
    }

    #[test]
    fn empty_declared_level_is_rejected() {
        // Single root declared as a 2-level tree: level 1 exists in intent
        // only. Modelled as a root plus a node claiming level 2.
        let err = build_hierarchy(vec![
            LabelNode { id: 0, name: "root".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "leaf".into(), level: 2, parent: Some(0) },
        ])
        .unwrap_err();
        // Parent one level up fails first as an orphan; a genuinely empty
        // mid level needs a valid deeper chain.
        assert!(matches!(err, HierarchyError::OrphanNode { .. }));

        let file = HierarchyFile {
            levels: vec![vec!["root".into()], vec![]],
            parents: BTreeMap::new(),
        };
        let err = file.build().unwrap_err();
        assert!(matches!(err, HierarchyError::EmptyLevel(1)), "{err}");
    }

    #[test]
    fn same_level_parent_is_an_orphan() {
        let err = build_hierarchy(vec![
            LabelNode { id: 0, name: "a".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "b".into(), level: 1, parent: Some(0) },
            LabelNode { id: 2, name: "c".into(), level: 1, parent: Some(1) },
        ])
        .unwrap_err();
        assert!(matches!(err, HierarchyError::OrphanNode { name, .. } if name == "c"));
    }

    #[test]
    fn parent_cycle_is_detected() {
        let err = build_hierarchy(vec![
            LabelNode { id: 0, name: "a".into(), level: 1, parent: Some(1) },
            LabelNode { id: 1, name: "b".into(), level: 2, parent: Some(0) },
        ])
        .unwrap_err();
        assert!(matches!(err, HierarchyError::CycleDetected(_)), "{err}");
    }

    #[test]
    fn duplicate_name_within_level_is_rejected() {
        let err = build_hierarchy(vec![
            LabelNode { id: 0, name: "a".into(), level: 0, parent: None },
            LabelNode { id: 1, name: "x".into(), level: 1, parent: Some(0) },
            LabelNode { id: 2, name: "x".into(), level: 1, parent: Some(0) },
        ])
        .unwrap_err();
        assert!(matches!(err, HierarchyError::DuplicateName(n) if n == "x"));
    }

    #[test]
    fn depth_cap_enforced() {
        let nodes: Vec<LabelNode> = (0..MAX_DEPTH + 1)
            .map(|i| LabelNode {
                id: i,
                name: format!("n{i}"),
                level: i,
                parent: if i == 0 { None } else { Some(i - 1) },
            })
            .collect();
        let err = build_hierarchy(nodes).unwrap_err();
        assert!(matches!(err, HierarchyError::TooDeep(_)));
    }

    #[test]
    fn sub_labels_returns_children() {
        let h = two_level();
        assert_eq!(h.sub_labels(0).unwrap(), &[2, 3]);
        assert_eq!(h.sub_labels(1).unwrap(), &[4]);
        assert!(matches!(
            h.sub_labels(2),
            Err(HierarchyError::LeafHasNoChildren(_))
        ));
    }

    #[test]
    fn sub_labels_on_chain_is_singleton() {
        let h = chain(4);
        for id in 0..3 {
            assert_eq!(h.sub_labels(id).unwrap().len(), 1);
        }
    }

    #[test]
    fn leaf_paths_enumerate_all_leaves() {
        let h = two_level();
        let paths = h.leaf_paths();
        assert_eq!(paths.len(), 3);
        assert_eq!(paths[0].node_ids, vec![0, 2]); // A, A1
        assert_eq!(paths[1].node_ids, vec![0, 3]); // A, A2
        assert_eq!(paths[2].node_ids, vec![1, 4]); // B, B1
    }

    #[test]
    fn s3dis_has_13_paths_of_length_3() {
        let h = s3dis_fixture();
        let paths = h.leaf_paths();
        assert_eq!(paths.len(), 13);
        assert!(paths.iter().all(|p| p.node_ids.len() == 3));
    }

    #[test]
    fn chain_has_one_full_depth_path() {
        let h = chain(4);
        let paths = h.leaf_paths();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].node_ids.len(), 4);
    }

    #[test]
    fn balance_metrics_on_s3dis() {
        let report = s3dis_fixture().balance_metrics();
        assert_eq!(report.depth, 3);
        assert_eq!(report.level_sizes, vec![3, 6, 13]);
        assert!((report.transitions[0].mean_children - 2.0).abs() < 1e-12);
        assert!((report.transitions[1].mean_children - 13.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn balance_metrics_on_regular_trees() {
        // perfect binary, 3 levels
        let mut nodes = vec![LabelNode { id: 0, name: "r".into(), level: 0, parent: None }];
        for i in 0..2 {
            nodes.push(LabelNode {
                id: 1 + i,
                name: format!("m{i}"),
                level: 1,
                parent: Some(0),
            });
        }
        for i in 0..4 {
            nodes.push(LabelNode {
                id: 3 + i,
                name: format!("l{i}"),
                level: 2,
                parent: Some(1 + i / 2),
            });
        }
        let h = build_hierarchy(nodes).unwrap();
        let report = h.balance_metrics();
        for t in &report.transitions {
            assert_eq!(t.min_children, 2);
            assert_eq!(t.max_children, 2);
        }
        let chain_report = chain(4).balance_metrics();
        for t in &chain_report.transitions {
            assert_eq!((t.min_children, t.max_children), (1, 1));
        }
    }

    fn random_hierarchy_file(rng: &mut ChaCha8Rng) -> HierarchyFile {
        let depth = rng.gen_range(2..=4usize);
        let mut levels: Vec<Vec<String>> = vec![(0..rng.gen_range(1..=3))
            .map(|i| format!("l0_{i}"))
            .collect()];
        let mut parents = BTreeMap::new();
        for lvl in 1..depth {
            let mut names = Vec::new();
            // every parent gets 1..=4 children
            for (pi, parent) in levels[lvl - 1].clone().iter().enumerate() {
                for c in 0..rng.gen_range(1..=4usize) {
                    let name = format!("l{lvl}_{pi}_{c}");
                    parents.insert(name.clone(), parent.clone());
                    names.push(name);
                }
            }
            levels.push(names);
        }
        HierarchyFile { levels, parents }
    }

    #[test]
    fn file_round_trip_is_structurally_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let file = random_hierarchy_file(&mut rng);
            let h = file.build().unwrap();
            let back = HierarchyFile::from(&h);
            assert_eq!(file, back);
            // and through JSON text as well
            let reparsed = HierarchyFile::from_json(&back.to_json()).unwrap();
            assert_eq!(file, reparsed);
        }
    }

    #[test]
    fn paths_edges_and_partition_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let h = random_hierarchy_file(&mut rng).build().unwrap();
            // path position i is the unique ancestor at level i
            for p in h.leaf_paths() {
                for (i, &id) in p.node_ids.iter().enumerate() {
                    assert_eq!(h.node(id).unwrap().level, i);
                    if i > 0 {
                        assert_eq!(h.node(id).unwrap().parent, Some(p.node_ids[i - 1]));
                    }
                }
            }
            // edge consistency + disjoint cover of each level
            for lvl in 0..h.num_levels() - 1 {
                let mut covered = Vec::new();
                for &parent in h.level(lvl) {
                    for &child in h.sub_labels(parent).unwrap() {
                        assert_eq!(h.node(child).unwrap().parent, Some(parent));
                        covered.push(child);
                    }
                }
                covered.sort_unstable();
                let mut expected: Vec<usize> = h.level(lvl + 1).to_vec();
                expected.sort_unstable();
                assert_eq!(covered, expected);
            }
        }
    }

    #[test]
    fn file_with_mutual_parents_is_a_cycle() {
        let file = HierarchyFile {
            levels: vec![vec!["r".into()], vec!["x".into(), "y".into()]],
            parents: BTreeMap::from([("x".into(), "y".into()), ("y".into(), "x".into())]),
        };
        let err = file.build().unwrap_err();
        assert!(matches!(err, HierarchyError::CycleDetected(_)), "{err}");
    }

    #[test]
    fn file_with_missing_parent_entry_is_orphan() {
        let file = HierarchyFile {
            levels: vec![vec!["r".into()], vec!["x".into()]],
            parents: BTreeMap::new(),
        };
        let err = file.build().unwrap_err();
        assert!(matches!(err, HierarchyError::OrphanNode { .. }));
    }
}
