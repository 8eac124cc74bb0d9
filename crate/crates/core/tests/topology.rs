mod common;

use proptest::prelude::*;
use strtr::topology::{
    adjacency_set, neighbor_table_spatial, normalize_adjacency, partition_adjacency, temporal_ring_table, PartitionStrategy,
    SkeletonDef, SkeletonGraph,
};
use strtr::Tensor;

fn graph(joints: usize, seed: u64, center: usize) -> SkeletonGraph {
    let g = common::random_graph(&mut common::rng(seed), joints);
    SkeletonGraph::new(joints, g.edges(), center % joints).unwrap()
}

fn adjacency_plus_identity(g: &SkeletonGraph) -> Vec<f64> {
    let v = g.joints();
    let mut a = vec![0.0; v * v];
    for i in 0..v {
        a[i * v + i] = 1.0;
        for &j in g.neighbors(i) {
            a[i * v + j] = 1.0;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_disjoint_and_cover_the_graph(joints in 2usize..14, seed in any::<u64>(), center in 0usize..14) {
        let g = graph(joints, seed, center);
        let expected = adjacency_plus_identity(&g);
        for strategy in [PartitionStrategy::Uniform, PartitionStrategy::SpatialConfig] {
            let parts = partition_adjacency(&g, strategy);
            let mut total = vec![0.0; joints * joints];
            for p in &parts {
                prop_assert!(p.data().iter().all(|&x| x == 0.0 || x == 1.0));
                total.iter_mut().zip(p.data()).for_each(|(t, x)| *t += x);
            }
            prop_assert_eq!(&total, &expected);
        }
    }

    #[test]
    fn normalization_keeps_the_zero_pattern(joints in 2usize..14, seed in any::<u64>(), center in 0usize..14) {
        let g = graph(joints, seed, center);
        let pattern = adjacency_plus_identity(&g);
        let full = normalize_adjacency(&g.adjacency_matrix()).unwrap();
        for i in 0..joints {
            for j in 0..joints {
                let x = full.data()[i * joints + j];
                prop_assert!(x.is_finite() && x >= 0.0);
                prop_assert_eq!(x == 0.0, pattern[i * joints + j] == 0.0);
                prop_assert_eq!(x, full.data()[j * joints + i]);
            }
        }
        let set = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
        for (b, n) in set.binary.iter().zip(&set.normalized) {
            for (x, y) in b.data().iter().zip(n.data()) {
                prop_assert_eq!(*x == 0.0, *y == 0.0);
            }
        }
    }

    #[test]
    fn spatial_table_lists_each_neighbor_once(joints in 2usize..14, seed in any::<u64>(), include_self in any::<bool>()) {
        let g = graph(joints, seed, 0);
        let table = neighbor_table_spatial(&g, include_self);
        prop_assert_eq!(table.nodes(), joints);
        for n in 0..joints {
            let mask = table.mask_row(n);
            let live = mask.iter().filter(|&&m| m).count();
            prop_assert_eq!(live, g.degree(n) + usize::from(include_self));
            // live slots come first, padding after
            prop_assert!(mask.windows(2).all(|w| w[0] || !w[1]));
            let mut listed = table.neighbors(n);
            let mut expected: Vec<usize> = g.neighbors(n).to_vec();
            if include_self {
                expected.push(n);
            }
            listed.sort_unstable();
            expected.sort_unstable();
            prop_assert_eq!(listed, expected);
        }
    }

    #[test]
    fn ring_is_invariant_under_cyclic_relabeling(frames in 2usize..40, shift in 0usize..40) {
        let ring = temporal_ring_table(frames).unwrap();
        let s = shift % frames;
        for t in 0..frames {
            let mut moved: Vec<usize> = ring.neighbors(t).iter().map(|&n| (n + s) % frames).collect();
            let mut target = ring.neighbors((t + s) % frames);
            moved.sort_unstable();
            target.sort_unstable();
            prop_assert_eq!(moved, target);
        }
    }
}

#[test]
fn ring_degree_counts() {
    for frames in 3..12 {
        let ring = temporal_ring_table(frames).unwrap();
        let mut seen = vec![0; frames];
        for t in 0..frames {
            assert_eq!(ring.neighbors(t).len(), 2);
            for n in ring.neighbors(t) {
                seen[n] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 2));
    }
    assert!(temporal_ring_table(1).is_err());
}

#[test]
fn two_node_normalization() {
    let a = Tensor::matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
    assert_eq!(normalize_adjacency(&a).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
}

#[test]
fn skeleton_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("skeleton.json");
    std::fs::write(&path, r#"{"V": 4, "edges": [[0, 1], [1, 2], [1, 3]], "center": 1}"#).unwrap();
    let def = SkeletonDef::load(&path).unwrap();
    let g = def.build().unwrap();
    assert_eq!(g.joints(), 4);
    assert_eq!(g.degree(1), 3);

    std::fs::write(&path, r#"{"V": 4, "edges": [[0, 1], [2, 3]], "center": 0}"#).unwrap();
    assert!(SkeletonDef::load(&path).unwrap().build().is_err());
}

#[test]
fn ntu_layout_partitions() {
    let g = SkeletonDef::ntu25().build().unwrap();
    assert_eq!(g.edges().len(), 24);
    let set = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
    assert_eq!(set.partitions(), 3);
    assert_eq!(set.binary[0], Tensor::eye(25));
}
