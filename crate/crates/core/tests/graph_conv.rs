mod common;

use common::{eval, random_graph, random_tensor, rng};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use strtr::gradcheck::check_session;
use strtr::graph_conv::{gcn_forward, tcn_forward, to_channels_last, GcnLayer, StGcnBlock, TcnLayer};
use strtr::params::{Init, ParamKind, ParamStore};
use strtr::topology::{adjacency_set, AdjacencySet, PartitionStrategy};
use strtr::Tensor;

/// Moves joint `v` of a `(B, T, V, C)` tensor to position `perm[v]`.
fn permute_joints(x: &Tensor, perm: &[usize]) -> Tensor {
    let &[b, t, v, c] = x.shape() else { panic!("rank 4 expected") };
    let mut out = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ti in 0..t {
            for (j, &pj) in perm.iter().enumerate() {
                for ci in 0..c {
                    out.data_mut()[((bi * t + ti) * v + pj) * c + ci] = x.data()[((bi * t + ti) * v + j) * c + ci];
                }
            }
        }
    }
    out
}

/// `P M Pᵀ` for the joint permutation `perm`.
fn conjugate(m: &Tensor, perm: &[usize]) -> Tensor {
    let v = perm.len();
    let mut out = Tensor::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            out.data_mut()[perm[i] * v + perm[j]] = m.data()[i * v + j];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gcn_is_equivariant_to_joint_relabeling(joints in 2usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, joints);
        let adj = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
        let mut perm: Vec<usize> = (0..joints).collect();
        perm.shuffle(&mut r);
        let relabeled = AdjacencySet {
            binary: adj.binary.iter().map(|m| conjugate(m, &perm)).collect(),
            normalized: adj.normalized.iter().map(|m| conjugate(m, &perm)).collect(),
        };
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut Init::new(&mut store, seed), "gcn", 3, joints, 4, 5, false);
        store.set(layer.bias, random_tensor(&mut r, &[5], 1.0));
        let x = random_tensor(&mut r, &[2, 3, joints, 4], 1.0);

        let y = eval(&store, &[x.clone()], |s, v| gcn_forward(s, v[0], &adj, &layer));
        let y_perm = eval(&store, &[permute_joints(&x, &perm)], |s, v| gcn_forward(s, v[0], &relabeled, &layer));
        prop_assert!(permute_joints(&y, &perm).max_abs_diff(&y_perm) < 1e-12);
    }

    #[test]
    fn tcn_commutes_with_joint_permutation(joints in 1usize..8, frames in 1usize..10, stride in 1usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let layer = TcnLayer::new(&mut Init::new(&mut store, seed), "tcn", 3, 5, stride).unwrap();
        let mut perm: Vec<usize> = (0..joints).collect();
        perm.shuffle(&mut r);
        let x = random_tensor(&mut r, &[1, frames, joints, 3], 1.0);
        let y = eval(&store, &[x.clone()], |s, v| tcn_forward(s, v[0], &layer));
        prop_assert_eq!(y.shape()[1], frames.div_ceil(stride));
        let y_perm = eval(&store, &[permute_joints(&x, &perm)], |s, v| tcn_forward(s, v[0], &layer));
        prop_assert!(permute_joints(&y, &perm).max_abs_diff(&y_perm) < 1e-12);
    }

    #[test]
    fn gcn_without_bias_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 5);
        let adj = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
        let mut store = ParamStore::new();
        let layer = GcnLayer::new(&mut Init::new(&mut store, seed), "gcn", 3, 5, 3, 4, false);
        let x = random_tensor(&mut r, &[1, 2, 5, 3], 1.0);
        let y = random_tensor(&mut r, &[1, 2, 5, 3], 1.0);
        let mix = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let f = |t: &Tensor| eval(&store, &[t.clone()], |s, v| gcn_forward(s, v[0], &adj, &layer));
        let (fx, fy, fm) = (f(&x), f(&y), f(&mix));
        let combined: Vec<f64> = fx.data().iter().zip(fy.data()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(common::max_diff(fm.data(), &combined) < 1e-12);
    }
}

fn block_gradcheck(adaptive: bool, residual: bool, seed: u64) -> f64 {
    let g = strtr::topology::SkeletonDef::binary_tree(5).build().unwrap();
    let adj = adjacency_set(&g, PartitionStrategy::SpatialConfig).unwrap();
    let mut store = ParamStore::new();
    let outputs = if residual { 3 } else { 4 };
    let block = StGcnBlock::new(&mut Init::new(&mut store, seed), "block", 3, 5, 3, outputs, 3, 1, adaptive).unwrap();
    assert_eq!(block.residual, residual);
    let mut r = rng(seed);
    // (B, C, V, T) = (1, 3, 5, 6)
    let x = to_channels_last(&random_tensor(&mut r, &[1, 3, 5, 6], 1.0)).unwrap();
    let readout = random_tensor(&mut r, &[1, 6, 5, outputs], 1.0);
    let params: Vec<_> = store.ids().filter(|&id| store.entry(id).kind == ParamKind::Weight).collect();
    let report = check_session(&store, &[x, readout], &params, 1e-4, None, |s, v| {
        let y = block.forward(s, v[0], &adj)?;
        let y = s.tape.mul(y, v[1])?;
        s.tape.sum(y)
    })
    .unwrap();
    report.max_relative_error()
}

#[test]
fn block_gradients_match_finite_differences() {
    for (adaptive, residual) in [(false, false), (false, true), (true, false)] {
        let err = block_gradcheck(adaptive, residual, 3);
        assert!(err <= 1e-3, "adaptive={adaptive} residual={residual}: {err:e}");
    }
}
