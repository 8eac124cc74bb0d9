//! Masked multi-head attention over gathered constituencies, and the four
//! node-update blocks built from it.
//!
//! Every query attends over a fixed-width row of key slots. Joint updates use
//! `[self, neighbors..., PAD..., relay]`; relay updates use
//! `[relay, node_0, ..., node_{n-1}]`.

use crate::autodiff::{softmax_in_place, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamId, Session};
use crate::rtr::drop::drop_mask_rows;
use crate::rtr::export::Block;
use crate::rtr::relpos::RelPosBias;
use crate::topology::NeighborTable;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub channels: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible by {heads} heads")));
        }
        let std = (1.0 / channels as f64).sqrt();
        init.push(name);
        let attn = Self {
            heads,
            channels,
            query: init.normal("query", &[channels, channels], std),
            key: init.normal("key", &[channels, channels], std),
            value: init.normal("value", &[channels, channels], std),
            output: Linear::new(init, "output", channels, channels, true),
        };
        init.pop();
        Ok(attn)
    }

    pub fn param_count(channels: usize) -> usize {
        3 * channels * channels + Linear::param_count(channels, channels, true)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Key slots per query. `None` marks a masked (padded) slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slots {
    pub width: usize,
    pub index: Vec<Option<usize>>,
}

impl Slots {
    pub fn queries(&self) -> usize {
        self.index.len() / self.width
    }

    /// Slots for joint-node updates: each node sees its table row (which
    /// should already contain the node itself) followed by its group's relay.
    ///
    /// Sources are laid out as `[nodes (groups·n); relays (groups)]`.
    pub fn joint(groups: usize, table: &NeighborTable) -> Self {
        let n = table.nodes();
        let width = table.width() + 1;
        let mut index = Vec::with_capacity(groups * n * width);
        for g in 0..groups {
            for x in 0..n {
                index.extend((0..table.width()).map(|j| table.slot(x, j).map(|y| g * n + y)));
                index.push(Some(groups * n + g));
            }
        }
        Self { width, index }
    }

    /// Slots for relay updates: `[relay, every node of the group]`.
    pub fn relay(groups: usize, n: usize) -> Self {
        let width = n + 1;
        let mut index = Vec::with_capacity(groups * width);
        for g in 0..groups {
            index.push(Some(groups * n + g));
            index.extend((0..n).map(|y| Some(g * n + y)));
        }
        Self { width, index }
    }
}

/// Plain softmax of `(q · k_j) · scale` over the unmasked slots; masked slots
/// get exactly zero.
pub fn attention_scores(q: &[f64], keys: &[Vec<f64>], scale: f64, mask: &[bool]) -> Result<Vec<f64>> {
    if keys.len() != mask.len() {
        return Err(Error::shape("attention_scores", &[keys.len()], &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("attention_scores", "every slot is masked"));
    }
    let live: Vec<usize> = (0..keys.len()).filter(|&j| mask[j]).collect();
    let mut logits: Vec<f64> = live
        .iter()
        .map(|&j| q.iter().zip(&keys[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    softmax_in_place(&mut logits);
    let mut out = vec![0.0; keys.len()];
    for (&j, w) in live.iter().zip(logits) {
        out[j] = w;
    }
    Ok(out)
}

/// Output of [`attend`].
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `(queries, C)` after the output projection.
    pub output: Var,
    /// `(queries · heads, width)` softmax weights.
    pub weights: Var,
}

/// Relative-position term for the temporal joint update: the relative
/// encoding table, and one table row per slot (`None` for relay and padding).
pub struct RelativeTerm<'a> {
    pub bias: &'a RelPosBias,
    pub offsets: Vec<Option<usize>>,
}

/// Matrix-form masked multi-head attention.
pub fn attend(
    s: &mut Session,
    attn: &MultiHeadAttention,
    queries: Var,
    sources: Var,
    slots: &Slots,
    relative: Option<&RelativeTerm>,
) -> Result<Attended> {
    let c = attn.channels;
    let (h, dk) = (attn.heads, attn.head_dim());
    let nq = s.tape.shape(queries)[0];
    if s.tape.shape(queries) != [nq, c] || s.tape.shape(sources).get(1) != Some(&c) || s.tape.shape(sources).len() != 2 {
        return Err(Error::shape("attend", s.tape.shape(queries), s.tape.shape(sources)));
    }
    let m = slots.width;
    if slots.queries() != nq || slots.index.len() != nq * m {
        return Err(Error::shape("attend", &[nq, m], &[slots.index.len()]));
    }
    if let Some(q) = (0..nq).find(|&q| slots.index[q * m..(q + 1) * m].iter().all(Option::is_none)) {
        return Err(Error::invalid("attend", format!("query {q} has every slot masked")));
    }

    let wq = s.param(attn.query);
    let wk = s.param(attn.key);
    let wv = s.param(attn.value);
    let q = s.tape.matmul(queries, wq)?;
    let k = s.tape.matmul(sources, wk)?;
    let v = s.tape.matmul(sources, wv)?;
    let kg = s.tape.gather_rows(k, &slots.index)?;
    let vg = s.tape.gather_rows(v, &slots.index)?;

    let per_head_keys = |s: &mut Session, g: Var| -> Result<Var> {
        let g = s.tape.reshape(g, &[nq, m, h, dk])?;
        let g = s.tape.permute(g, &[0, 2, 3, 1])?;
        s.tape.reshape(g, &[nq * h, dk, m])
    };
    let q3 = s.tape.reshape(q, &[nq * h, 1, dk])?;
    let k3 = per_head_keys(s, kg)?;
    let logits = s.tape.bmm(q3, k3)?;
    let mut logits = s.tape.reshape(logits, &[nq * h, m])?;

    if let Some(rel) = relative {
        if rel.offsets.len() != slots.index.len() {
            return Err(Error::shape("attend", &[slots.index.len()], &[rel.offsets.len()]));
        }
        let table = s.param(rel.bias.table);
        let wr = s.param(rel.bias.key);
        let bias = s.param(rel.bias.bias);
        let rk = s.tape.matmul(table, wr)?;
        let rg = s.tape.gather_rows(rk, &rel.offsets)?;
        let r3 = per_head_keys(s, rg)?;
        let qb = s.tape.add_row(q, bias)?;
        let qb = s.tape.reshape(qb, &[nq * h, 1, dk])?;
        let pos = s.tape.bmm(qb, r3)?;
        let pos = s.tape.reshape(pos, &[nq * h, m])?;
        logits = s.tape.add(logits, pos)?;
    }

    let logits = s.tape.mul_scalar(logits, 1.0 / (dk as f64).sqrt())?;
    let mut live: Vec<bool> = (0..nq)
        .flat_map(|qi| {
            let row = &slots.index[qi * m..(qi + 1) * m];
            (0..h).flat_map(move |_| row.iter().map(Option::is_some))
        })
        .collect();
    if let Some((p, rng)) = s.drop_state() {
        live = drop_mask_rows(&live, m, p, rng)?;
    }
    let masked: Vec<bool> = live.iter().map(|&l| !l).collect();
    let logits = s.tape.masked_fill(logits, &masked)?;
    let weights = s.tape.softmax(logits)?;

    let vg = s.tape.reshape(vg, &[nq, m, h, dk])?;
    let vg = s.tape.permute(vg, &[0, 2, 1, 3])?;
    let vg = s.tape.reshape(vg, &[nq * h, m, dk])?;
    let w3 = s.tape.reshape(weights, &[nq * h, 1, m])?;
    let o = s.tape.bmm(w3, vg)?;
    let o = s.tape.reshape(o, &[nq, c])?;
    let output = attn.output.forward(s, o)?;
    Ok(Attended { output, weights })
}

fn group_rows(s: &Session, x: Var, n: usize, op: &'static str) -> Result<usize> {
    let rows = s.tape.shape(x)[0];
    if n == 0 || rows % n != 0 {
        return Err(Error::invalid(op, format!("{rows} rows do not split into groups of {n}")));
    }
    Ok(rows / n)
}

/// Mean of each group of `n` consecutive rows: `(groups·n, C) → (groups, C)`.
pub fn relay_init(s: &mut Session, nodes: Var, n: usize) -> Result<Var> {
    let groups = group_rows(s, nodes, n, "relay_init")?;
    let c = s.tape.shape(nodes)[1];
    let x = s.tape.reshape(nodes, &[groups, n, c])?;
    s.tape.mean_axis(x, 1)
}

fn record(s: &mut Session, block: Block, weights: Var, group_size: Option<usize>, heads: usize) {
    if let Some(rec) = s.recorder.as_mut() {
        let w = s.tape.value(weights);
        rec.capture(block, w.data(), w.shape()[1], heads, group_size);
    }
}

fn joint_update(
    s: &mut Session,
    attn: &MultiHeadAttention,
    nodes: Var,
    relay: Var,
    table: &NeighborTable,
    relative: Option<&RelPosBias>,
    block: Block,
) -> Result<Var> {
    let n = table.nodes();
    let groups = group_rows(s, nodes, n, block.op_name())?;
    if s.tape.shape(relay)[0] != groups {
        return Err(Error::shape(block.op_name(), s.tape.shape(nodes), s.tape.shape(relay)));
    }
    let slots = Slots::joint(groups, table);
    let sources = s.tape.concat(&[nodes, relay], 0)?;
    let term = relative
        .map(|bias| -> Result<RelativeTerm> {
            if bias.frames < n {
                return Err(Error::invalid(
                    block.op_name(),
                    format!("relative table covers {} frames, sequence has {n}", bias.frames),
                ));
            }
            let mut offsets = Vec::with_capacity(slots.index.len());
            for _ in 0..groups {
                for x in 0..n {
                    offsets.extend((0..table.width()).map(|j| table.slot(x, j).map(|y| bias.offset_row(x, y))));
                    offsets.push(None);
                }
            }
            Ok(RelativeTerm { bias, offsets })
        })
        .transpose()?;
    let out = attend(s, attn, nodes, sources, &slots, term.as_ref())?;
    record(s, block, out.weights, Some(n), attn.heads);
    Ok(out.output)
}

fn relay_update(s: &mut Session, attn: &MultiHeadAttention, relay: Var, nodes: Var, block: Block) -> Result<Var> {
    let groups = s.tape.shape(relay)[0];
    let rows = s.tape.shape(nodes)[0];
    if groups == 0 || rows % groups != 0 {
        return Err(Error::shape(block.op_name(), s.tape.shape(nodes), s.tape.shape(relay)));
    }
    let n = rows / groups;
    let slots = Slots::relay(groups, n);
    let sources = s.tape.concat(&[nodes, relay], 0)?;
    let out = attend(s, attn, relay, sources, &slots, None)?;
    record(s, block, out.weights, None, attn.heads);
    Ok(out.output)
}

/// Spatial joint-node update. `joints` is `(frames·V, C)` with one frame per
/// group of `V` rows, `relay` is `(frames, C)`, and `table` must already list
/// each joint in its own row.
pub fn sju_update(s: &mut Session, attn: &MultiHeadAttention, joints: Var, relay: Var, table: &NeighborTable) -> Result<Var> {
    joint_update(s, attn, joints, relay, table, None, Block::Sju)
}

/// Spatial relay update over `{relay} ∪ all joints of the frame`.
pub fn sru_update(s: &mut Session, attn: &MultiHeadAttention, relay: Var, joints: Var) -> Result<Var> {
    relay_update(s, attn, relay, joints, Block::Sru)
}

/// Temporal joint-node update over the ring `{t-1, t, t+1} ∪ relay`.
/// `frames` is `(tracks·T, C)`, `ring` comes from `temporal_ring_table(T)`.
pub fn tju_update(
    s: &mut Session,
    attn: &MultiHeadAttention,
    frames: Var,
    relay: Var,
    ring: &NeighborTable,
    relative: Option<&RelPosBias>,
) -> Result<Var> {
    if ring.nodes() < 2 {
        return Err(Error::invalid("tju_update", "need at least 2 frames"));
    }
    joint_update(s, attn, frames, relay, &ring.with_self(), relative, Block::Tju)
}

/// Temporal relay update over `{relay} ∪ all frames of the track`.
pub fn tru_update(s: &mut Session, attn: &MultiHeadAttention, relay: Var, frames: Var) -> Result<Var> {
    relay_update(s, attn, relay, frames, Block::Tru)
}
