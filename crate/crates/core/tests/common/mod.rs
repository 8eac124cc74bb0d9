#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strtr::params::{Init, Mode, ParamStore, Session};
use strtr::rtr::oracle::{joint_update_oracle, relay_update_oracle, Group, PlainAttention, PlainRelPos};
use strtr::rtr::{sju_update, sru_update, tju_update, tru_update, MultiHeadAttention, RelPosBias};
use strtr::topology::{neighbor_table_spatial, temporal_ring_table, SkeletonGraph};
use strtr::{Precision, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Random spanning tree plus a few extra edges, so degrees (and padding) vary.
pub fn random_graph(rng: &mut ChaCha8Rng, joints: usize) -> SkeletonGraph {
    let mut edges = Vec::new();
    for v in 1..joints {
        edges.push((rng.random_range(0..v), v));
    }
    for _ in 0..rng.random_range(0..joints) {
        let a = rng.random_range(0..joints);
        let b = rng.random_range(0..joints);
        if a != b && !edges.contains(&(a, b)) && !edges.contains(&(b, a)) {
            edges.push((a, b));
        }
    }
    SkeletonGraph::new(joints, &edges, 0).unwrap()
}

/// Attention parameters with every tensor (including the output bias)
/// randomized.
pub fn random_attention(rng: &mut ChaCha8Rng, channels: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let seed = rng.random();
    let attn = MultiHeadAttention::new(&mut Init::new(&mut store, seed), "attn", channels, heads).unwrap();
    let bias = attn.output.bias.unwrap();
    store.set(bias, random_tensor(rng, &[channels], 0.5));
    (store, attn)
}

pub fn identity_attention(channels: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut Init::new(&mut store, 0), "attn", channels, heads).unwrap();
    for id in [attn.query, attn.key, attn.value, attn.output.weight] {
        store.set(id, Tensor::eye(channels));
    }
    (store, attn)
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn groups(t: &Tensor, n: usize) -> Vec<Group> {
    rows(t).chunks(n).map(<[Vec<f64>]>::to_vec).collect()
}

pub fn flatten(groups: &[Group]) -> Vec<f64> {
    groups.iter().flatten().flatten().copied().collect()
}

/// Row `i` of the result is row `perm[i]` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let mut out = Vec::with_capacity(t.len());
    for &p in perm {
        out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
    }
    Tensor::new(t.shape(), out).unwrap()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Evaluates `f` on constant inputs in a 64-bit eval session.
pub fn eval<F>(store: &ParamStore, inputs: &[Tensor], f: F) -> Tensor
where
    F: FnOnce(&mut Session, &[Var]) -> strtr::Result<Var>,
{
    let mut s = Session::new(store, Mode::Eval, Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.constant(t.clone())).collect();
    let out = f(&mut s, &vars).unwrap();
    s.tape.value(out).clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    Sju,
    Sru,
    Tju,
    TjuRelative,
    Tru,
}

pub const ALL_UPDATES: [UpdateKind; 5] = [UpdateKind::Sju, UpdateKind::Sru, UpdateKind::Tju, UpdateKind::TjuRelative, UpdateKind::Tru];

/// One randomized matrix-vs-loop comparison; returns the max abs difference.
///
/// Spatial cases use random 5-joint graphs (varying degree, so padded
/// slots); temporal cases use random tracks of 2..=6 frames.
pub fn oracle_case(kind: UpdateKind, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let channels = heads * rng.random_range(1..4);
    let groups_count = rng.random_range(1..4);
    let (mut store, attn) = random_attention(&mut rng, channels, heads);
    let spatial = matches!(kind, UpdateKind::Sju | UpdateKind::Sru);
    let (n, neighbors, table) = if spatial {
        let g = random_graph(&mut rng, 5);
        let neighbors: Vec<Vec<usize>> = (0..5).map(|v| g.neighbors(v).to_vec()).collect();
        (5, neighbors, neighbor_table_spatial(&g, true))
    } else {
        let t = if seed % 5 == 0 { 2 } else { rng.random_range(2..=6) };
        let ring = temporal_ring_table(t).unwrap();
        let neighbors: Vec<Vec<usize>> = (0..t).map(|x| ring.neighbors(x)).collect();
        (t, neighbors, ring)
    };
    let relative = (kind == UpdateKind::TjuRelative).then(|| {
        let seed = rng.random();
        let bias = RelPosBias::new(&mut Init::new(&mut store, seed), "rel", n, channels);
        store.set(bias.bias, random_tensor(&mut rng, &[channels], 0.5));
        bias
    });
    let nodes = random_tensor(&mut rng, &[groups_count * n, channels], 1.0);
    let relay = random_tensor(&mut rng, &[groups_count, channels], 1.0);
    let plain = PlainAttention::from_store(&store, &attn);
    let node_groups = groups(&nodes, n);
    let relay_rows = rows(&relay);

    match kind {
        UpdateKind::Sju | UpdateKind::Tju | UpdateKind::TjuRelative => {
            let got = eval(&store, &[nodes, relay], |s, v| match kind {
                UpdateKind::Sju => sju_update(s, &attn, v[0], v[1], &table),
                _ => tju_update(s, &attn, v[0], v[1], &table, relative.as_ref()),
            });
            let plain_rel = relative.as_ref().map(|r| PlainRelPos::from_store(&store, r));
            let want = joint_update_oracle(&plain, &node_groups, &relay_rows, &neighbors, plain_rel.as_ref());
            max_diff(got.data(), &flatten(&want))
        }
        UpdateKind::Sru | UpdateKind::Tru => {
            let got = eval(&store, &[relay, nodes], |s, v| match kind {
                UpdateKind::Sru => sru_update(s, &attn, v[0], v[1]),
                _ => tru_update(s, &attn, v[0], v[1]),
            });
            let want = relay_update_oracle(&plain, &relay_rows, &node_groups);
            max_diff(got.data(), &want.concat())
        }
    }
}
