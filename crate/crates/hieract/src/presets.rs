//! Built-in label trees used by the simulator and as test fixtures.

use std::collections::BTreeMap;

use crate::hierarchy::{HierarchyFile, LabelHierarchy};

/// The 13 fine indoor classes arranged under 6 mid and 3 coarse groups.
pub fn s3dis_file() -> HierarchyFile {
    let levels = vec![
        vec!["structure".into(), "furniture".into(), "other".into()],
        vec![
            "horizontal_surface".into(),
            "vertical_structure".into(),
            "opening".into(),
            "seating".into(),
            "work_surface".into(),
            "miscellaneous".into(),
        ],
        vec![
            "ceiling".into(),
            "floor".into(),
            "wall".into(),
            "beam".into(),
            "column".into(),
            "window".into(),
            "door".into(),
            "chair".into(),
            "sofa".into(),
            "table".into(),
            "bookcase".into(),
            "board".into(),
            "clutter".into(),
        ],
    ];
    let parents = BTreeMap::from(
        [
            ("horizontal_surface", "structure"),
            ("vertical_structure", "structure"),
            ("opening", "structure"),
            ("seating", "furniture"),
            ("work_surface", "furniture"),
            ("miscellaneous", "other"),
            ("ceiling", "horizontal_surface"),
            ("floor", "horizontal_surface"),
            ("wall", "vertical_structure"),
            ("beam", "vertical_structure"),
            ("column", "vertical_structure"),
            ("window", "opening"),
            ("door", "opening"),
            ("chair", "seating"),
            ("sofa", "seating"),
            ("table", "work_surface"),
            ("bookcase", "work_surface"),
            ("board", "work_surface"),
            ("clutter", "miscellaneous"),
        ]
        .map(|(c, p)| (c.to_string(), p.to_string())),
    );
    HierarchyFile { levels, parents }
}

pub fn s3dis_fixture() -> LabelHierarchy {
    s3dis_file().build().expect("builtin fixture is valid")
}

/// A deliberately incoherent grouping of the same 13 leaves, standing in
/// for an embedding-clustered tree. Same shape, scrambled membership.
pub fn s3dis_scrambled_file() -> HierarchyFile {
    let levels = vec![
        vec!["group_a".into(), "group_b".into(), "group_c".into()],
        vec![
            "cluster_0".into(),
            "cluster_1".into(),
            "cluster_2".into(),
            "cluster_3".into(),
            "cluster_4".into(),
            "cluster_5".into(),
        ],
        vec![
            "ceiling".into(),
            "floor".into(),
            "wall".into(),
            "beam".into(),
            "column".into(),
            "window".into(),
            "door".into(),
            "chair".into(),
            "sofa".into(),
            "table".into(),
            "bookcase".into(),
            "board".into(),
            "clutter".into(),
        ],
    ];
    let parents = BTreeMap::from(
        [
            ("cluster_0", "group_a"),
            ("cluster_1", "group_a"),
            ("cluster_2", "group_b"),
            ("cluster_3", "group_b"),
            ("cluster_4", "group_c"),
            ("cluster_5", "group_c"),
            ("ceiling", "cluster_3"),
            ("floor", "cluster_5"),
            ("wall", "cluster_1"),
            ("beam", "cluster_4"),
            ("column", "cluster_0"),
            ("window", "cluster_2"),
            ("door", "cluster_5"),
            ("chair", "cluster_2"),
            ("sofa", "cluster_4"),
            ("table", "cluster_1"),
            ("bookcase", "cluster_3"),
            ("board", "cluster_0"),
            ("clutter", "cluster_2"),
        ]
        .map(|(c, p)| (c.to_string(), p.to_string())),
    );
    HierarchyFile { levels, parents }
}

pub fn s3dis_scrambled_fixture() -> LabelHierarchy {
    s3dis_scrambled_file()
        .build()
        .expect("builtin fixture is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build_with_matching_leaf_sets() {
        let a = s3dis_fixture();
        let b = s3dis_scrambled_fixture();
        assert_eq!(a.level_sizes(), vec![3, 6, 13]);
        assert_eq!(b.level_sizes(), vec![3, 6, 13]);
        let mut la = a.leaf_names();
        let mut lb = b.leaf_names();
        la.sort_unstable();
        lb.sort_unstable();
        assert_eq!(la, lb);
    }
}
