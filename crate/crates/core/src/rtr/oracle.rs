//! Reference implementation of the node updates with explicit loops over
//! each node's real constituents. No gathering, padding or masking: used to
//! check the batched matrix form.

use crate::nn::{LayerNorm, Linear, LN_EPS};
use crate::params::ParamStore;
use crate::rtr::attention::MultiHeadAttention;
use crate::rtr::relpos::RelPosBias;
use crate::rtr::stream::{FeedForward, RtrStream, StreamKind, UpdateUnit};

/// Row-vector affine map `x · W + b`.
#[derive(Debug, Clone)]
pub struct PlainLinear {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl PlainLinear {
    pub fn from_store(store: &ParamStore, l: &Linear) -> Self {
        let w = store.get(l.weight);
        Self {
            weight: w.data().chunks(l.outputs).map(<[f64]>::to_vec).collect(),
            bias: l.bias.map_or_else(|| vec![0.0; l.outputs], |b| store.get(b).data().to_vec()),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: (0..dim).map(|i| (0..dim).map(|j| f64::from(u8::from(i == j))).collect()).collect(),
            bias: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weight[i]) {
                *o += xi * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PlainAttention {
    pub heads: usize,
    pub query: PlainLinear,
    pub key: PlainLinear,
    pub value: PlainLinear,
    pub output: PlainLinear,
}

fn matrix(store: &ParamStore, id: crate::params::ParamId) -> PlainLinear {
    let t = store.get(id);
    let cols = t.shape()[1];
    PlainLinear {
        weight: t.data().chunks(cols).map(<[f64]>::to_vec).collect(),
        bias: vec![0.0; cols],
    }
}

impl PlainAttention {
    pub fn from_store(store: &ParamStore, attn: &MultiHeadAttention) -> Self {
        Self {
            heads: attn.heads,
            query: matrix(store, attn.query),
            key: matrix(store, attn.key),
            value: matrix(store, attn.value),
            output: PlainLinear::from_store(store, &attn.output),
        }
    }

    /// Every projection the identity.
    pub fn identity(dim: usize, heads: usize) -> Self {
        Self {
            heads,
            query: PlainLinear::identity(dim),
            key: PlainLinear::identity(dim),
            value: PlainLinear::identity(dim),
            output: PlainLinear::identity(dim),
        }
    }

    /// Attention of `query` over `constituents`; `positions` optionally
    /// carries a projected relative encoding per constituent and the global
    /// position bias.
    pub fn attend(&self, query: &[f64], constituents: &[&[f64]], positions: Option<(&[Option<Vec<f64>>], &[f64])>) -> Vec<f64> {
        let c = query.len();
        let dk = c / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.query.apply(query);
        let keys: Vec<Vec<f64>> = constituents.iter().map(|y| self.key.apply(y)).collect();
        let values: Vec<Vec<f64>> = constituents.iter().map(|y| self.value.apply(y)).collect();
        let mut mixed = vec![0.0; c];
        for h in 0..self.heads {
            let lanes = h * dk..(h + 1) * dk;
            let mut logits = Vec::with_capacity(constituents.len());
            for (j, k) in keys.iter().enumerate() {
                let mut a = 0.0;
                for d in lanes.clone() {
                    a += q[d] * k[d];
                }
                if let Some((rows, bias)) = positions {
                    if let Some(r) = &rows[j] {
                        for d in lanes.clone() {
                            a += (q[d] + bias[d]) * r[d];
                        }
                    }
                }
                logits.push(a * scale);
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (e, v) in exps.iter().zip(&values) {
                for d in lanes.clone() {
                    mixed[d] += e / total * v[d];
                }
            }
        }
        self.output.apply(&mixed)
    }
}

/// Relative-position terms in plain form: encodings already projected by
/// the position key.
#[derive(Debug, Clone)]
pub struct PlainRelPos {
    pub projected: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub frames: usize,
}

impl PlainRelPos {
    pub fn from_store(store: &ParamStore, rel: &RelPosBias) -> Self {
        let table = store.get(rel.table);
        let c = table.shape()[1];
        let key = matrix(store, rel.key);
        Self {
            projected: table.data().chunks(c).map(|r| key.apply(r)).collect(),
            bias: store.get(rel.bias).data().to_vec(),
            frames: rel.frames,
        }
    }

    fn row(&self, i: usize, j: usize) -> Vec<f64> {
        self.projected[i + self.frames - 1 - j].clone()
    }
}

/// One group of nodes: `nodes[x]` is a `C`-vector.
pub type Group = Vec<Vec<f64>>;

/// Joint update for every node of every group: node `x` attends over
/// itself, `neighbors[x]` and its group's relay.
pub fn joint_update_oracle(
    attn: &PlainAttention,
    groups: &[Group],
    relays: &[Vec<f64>],
    neighbors: &[Vec<usize>],
    relative: Option<&PlainRelPos>,
) -> Vec<Group> {
    groups
        .iter()
        .zip(relays)
        .map(|(nodes, relay)| {
            (0..nodes.len())
                .map(|x| {
                    let mut members: Vec<usize> = vec![x];
                    members.extend(neighbors[x].iter().copied().filter(|&y| y != x));
                    let mut cons: Vec<&[f64]> = members.iter().map(|&y| nodes[y].as_slice()).collect();
                    cons.push(relay);
                    match relative {
                        Some(rel) => {
                            let mut rows: Vec<Option<Vec<f64>>> = members.iter().map(|&y| Some(rel.row(x, y))).collect();
                            rows.push(None);
                            attn.attend(&nodes[x], &cons, Some((&rows, &rel.bias)))
                        }
                        None => attn.attend(&nodes[x], &cons, None),
                    }
                })
                .collect()
        })
        .collect()
}

/// Relay update: each relay attends over itself and every node of its group.
pub fn relay_update_oracle(attn: &PlainAttention, relays: &[Vec<f64>], groups: &[Group]) -> Vec<Vec<f64>> {
    relays
        .iter()
        .zip(groups)
        .map(|(relay, nodes)| {
            let mut cons: Vec<&[f64]> = vec![relay];
            cons.extend(nodes.iter().map(Vec::as_slice));
            attn.attend(relay, &cons, None)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlainNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl PlainNorm {
    fn from_store(store: &ParamStore, n: &LayerNorm) -> Self {
        Self {
            gamma: store.get(n.gamma).data().to_vec(),
            beta: store.get(n.beta).data().to_vec(),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let c = x.len() as f64;
        let mean = x.iter().sum::<f64>() / c;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - mean) * inv * self.gamma[j] + self.beta[j])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PlainUnit {
    pub norm: PlainNorm,
    pub attn: PlainAttention,
    pub ffn_norm: PlainNorm,
    pub up: PlainLinear,
    pub down: PlainLinear,
}

impl PlainUnit {
    fn from_store(store: &ParamStore, u: &UpdateUnit) -> Self {
        let FeedForward { norm, up, down } = &u.ffn;
        Self {
            norm: PlainNorm::from_store(store, &u.norm),
            attn: PlainAttention::from_store(store, &u.attn),
            ffn_norm: PlainNorm::from_store(store, norm),
            up: PlainLinear::from_store(store, up),
            down: PlainLinear::from_store(store, down),
        }
    }

    fn ffn(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.up.apply(&self.ffn_norm.apply(x)).into_iter().map(|v| v.max(0.0)).collect();
        x.iter().zip(self.down.apply(&h)).map(|(a, b)| a + b).collect()
    }
}

fn add_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Whole stream evaluated group by group. `neighbors[x]` lists the real
/// neighbors of node `x` (bone neighbors, or ring neighbors for frames).
/// Returns updated groups and their relays.
pub fn stream_oracle(store: &ParamStore, stream: &RtrStream, groups: &[Group], neighbors: &[Vec<usize>]) -> (Vec<Group>, Vec<Vec<f64>>) {
    let mut groups = groups.to_vec();
    let mut relays: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let n = g.len() as f64;
            (0..g[0].len()).map(|d| g.iter().map(|v| v[d]).sum::<f64>() / n).collect()
        })
        .collect();
    for layer in &stream.layers {
        let joint = PlainUnit::from_store(store, &layer.joint);
        let relay = PlainUnit::from_store(store, &layer.relay);
        let relative = match stream.kind {
            StreamKind::Temporal => layer.relative.as_ref().map(|r| PlainRelPos::from_store(store, r)),
            StreamKind::Spatial => None,
        };

        let normed: Vec<Group> = groups.iter().map(|g| g.iter().map(|v| joint.norm.apply(v)).collect()).collect();
        let normed_relay: Vec<Vec<f64>> = relays.iter().map(|r| joint.norm.apply(r)).collect();
        let delta = joint_update_oracle(&joint.attn, &normed, &normed_relay, neighbors, relative.as_ref());
        groups = groups
            .iter()
            .zip(&delta)
            .map(|(g, d)| add_rows(g, d).iter().map(|v| joint.ffn(v)).collect())
            .collect();

        let normed: Vec<Group> = groups.iter().map(|g| g.iter().map(|v| relay.norm.apply(v)).collect()).collect();
        let normed_relay: Vec<Vec<f64>> = relays.iter().map(|r| relay.norm.apply(r)).collect();
        let delta = relay_update_oracle(&relay.attn, &normed_relay, &normed);
        relays = add_rows(&relays, &delta).iter().map(|r| relay.ffn(r)).collect();
    }
    (groups, relays)
}
