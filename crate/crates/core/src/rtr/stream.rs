//! Stacked node-update layers for the spatial and temporal streams.
//!
//! Each layer runs, in order and with pre-norm residuals:
//! joint update, joint FFN, relay update (reading the new joints), relay FFN.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, Session};
use crate::rtr::attention::{relay_init, sju_update, sru_update, tju_update, tru_update, MultiHeadAttention};
use crate::rtr::export::Stream;
use crate::rtr::relpos::RelPosBias;
use crate::topology::NeighborTable;

pub const FFN_EXPANSION: usize = 4;

/// Position-wise two-layer network with a pre-norm residual.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let hidden = FFN_EXPANSION * channels;
        init.scoped(name, |init| Self {
            norm: LayerNorm::new(init, "norm", channels),
            up: Linear::new(init, "up", channels, hidden, true),
            down: Linear::new(init, "down", hidden, channels, true),
        })
    }

    pub fn param_count(channels: usize) -> usize {
        let hidden = FFN_EXPANSION * channels;
        LayerNorm::param_count(channels) + Linear::param_count(channels, hidden, true) + Linear::param_count(hidden, channels, true)
    }
}

/// `x + down(relu(up(norm(x))))`, row by row.
pub fn ffn_apply(s: &mut Session, ffn: &FeedForward, x: Var) -> Result<Var> {
    let h = ffn.norm.forward(s, x)?;
    let h = ffn.up.forward(s, h)?;
    let h = s.tape.relu(h)?;
    let h = ffn.down.forward(s, h)?;
    s.tape.add(x, h)
}

/// Attention plus FFN for one node kind (joint or relay).
#[derive(Debug, Clone)]
pub struct UpdateUnit {
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
}

impl UpdateUnit {
    pub fn new(init: &mut Init, name: &str, channels: usize, heads: usize) -> Result<Self> {
        init.push(name);
        let unit = Self {
            norm: LayerNorm::new(init, "norm", channels),
            attn: MultiHeadAttention::new(init, "attn", channels, heads)?,
            ffn: FeedForward::new(init, "ffn", channels),
        };
        init.pop();
        Ok(unit)
    }

    pub fn param_count(channels: usize) -> usize {
        LayerNorm::param_count(channels) + MultiHeadAttention::param_count(channels) + FeedForward::param_count(channels)
    }
}

#[derive(Debug, Clone)]
pub struct RtrLayer {
    pub joint: UpdateUnit,
    pub relay: UpdateUnit,
    pub relative: Option<RelPosBias>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone)]
pub struct RtrStream {
    pub kind: StreamKind,
    pub channels: usize,
    pub layers: Vec<RtrLayer>,
}

impl RtrStream {
    /// `relative_frames` adds learned relative-position terms to temporal
    /// joint updates over sequences of up to that many frames.
    pub fn new(
        init: &mut Init,
        name: &str,
        kind: StreamKind,
        channels: usize,
        heads: usize,
        layers: usize,
        relative_frames: Option<usize>,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a relative-transformer stream needs at least one layer".into()));
        }
        if relative_frames.is_some() && kind == StreamKind::Spatial {
            return Err(Error::Config("relative positions only apply to the temporal stream".into()));
        }
        init.push(name);
        let built = (0..layers)
            .map(|l| {
                init.push(format!("layer{l}"));
                let layer = (|| {
                    Ok(RtrLayer {
                        joint: UpdateUnit::new(init, "joint", channels, heads)?,
                        relay: UpdateUnit::new(init, "relay", channels, heads)?,
                        relative: relative_frames.map(|t| RelPosBias::new(init, "relative", t, channels)),
                    })
                })();
                init.pop();
                layer
            })
            .collect::<Result<Vec<_>>>();
        init.pop();
        Ok(Self {
            kind,
            channels,
            layers: built?,
        })
    }

    pub fn param_count(channels: usize, layers: usize, relative_frames: Option<usize>) -> usize {
        let per_layer = 2 * UpdateUnit::param_count(channels) + relative_frames.map_or(0, |t| RelPosBias::param_count(t, channels));
        layers * per_layer
    }
}

fn set_context(s: &mut Session, ctx: Option<(Stream, usize)>) {
    if let Some(rec) = s.recorder.as_mut() {
        rec.context = ctx;
    }
}

/// Runs every layer over `nodes` `(groups·n, C)`; returns updated nodes and
/// the `(groups, C)` relay.
fn run_layers(s: &mut Session, stream: &RtrStream, nodes: Var, n: usize, table: &NeighborTable) -> Result<(Var, Var)> {
    let label = match stream.kind {
        StreamKind::Spatial => Stream::S,
        StreamKind::Temporal => Stream::T,
    };
    let mut y = nodes;
    let mut r = relay_init(s, y, n)?;
    for (l, layer) in stream.layers.iter().enumerate() {
        set_context(s, Some((label, l)));
        let ny = layer.joint.norm.forward(s, y)?;
        let nr = layer.joint.norm.forward(s, r)?;
        let dy = match stream.kind {
            StreamKind::Spatial => sju_update(s, &layer.joint.attn, ny, nr, table)?,
            StreamKind::Temporal => tju_update(s, &layer.joint.attn, ny, nr, table, layer.relative.as_ref())?,
        };
        y = s.tape.add(y, dy)?;
        y = ffn_apply(s, &layer.joint.ffn, y)?;

        let nr = layer.relay.norm.forward(s, r)?;
        let ny = layer.relay.norm.forward(s, y)?;
        let dr = match stream.kind {
            StreamKind::Spatial => sru_update(s, &layer.relay.attn, nr, ny)?,
            StreamKind::Temporal => tru_update(s, &layer.relay.attn, nr, ny)?,
        };
        r = s.tape.add(r, dr)?;
        r = ffn_apply(s, &layer.relay.ffn, r)?;
    }
    set_context(s, None);
    Ok((y, r))
}

fn dims(s: &Session, x: Var, channels: usize, op: &'static str) -> Result<[usize; 4]> {
    match *s.tape.shape(x) {
        [b, t, v, c] if c == channels => Ok([b, t, v, c]),
        ref other => Err(Error::shape(op, other, &[channels])),
    }
}

/// Spatial stream over channels-last `(B, T, V, C)` features, one frame per
/// group. `table` lists each joint with itself and its bone neighbors.
/// Returns joints `(B, T, V, C)` and relays `(B, T, C)`.
pub fn s_rtr_forward(s: &mut Session, stream: &RtrStream, x: Var, table: &NeighborTable) -> Result<(Var, Var)> {
    if stream.kind != StreamKind::Spatial {
        return Err(Error::invalid("s_rtr_forward", "stream is not spatial"));
    }
    let [b, t, v, c] = dims(s, x, stream.channels, "s_rtr_forward")?;
    if table.nodes() != v {
        return Err(Error::shape("s_rtr_forward", &[v], &[table.nodes()]));
    }
    let rows = s.tape.reshape(x, &[b * t * v, c])?;
    let (y, r) = run_layers(s, stream, rows, v, table)?;
    let y = s.tape.reshape(y, &[b, t, v, c])?;
    let r = s.tape.reshape(r, &[b, t, c])?;
    Ok((y, r))
}

/// Temporal stream over channels-last `(B, T, V, C)` features, one joint
/// track per group on the frame ring. Returns joints `(B, T, V, C)` and
/// relays `(B, V, C)`.
pub fn t_rtr_forward(s: &mut Session, stream: &RtrStream, x: Var, ring: &NeighborTable) -> Result<(Var, Var)> {
    if stream.kind != StreamKind::Temporal {
        return Err(Error::invalid("t_rtr_forward", "stream is not temporal"));
    }
    let [b, t, v, c] = dims(s, x, stream.channels, "t_rtr_forward")?;
    if ring.nodes() != t {
        return Err(Error::shape("t_rtr_forward", &[t], &[ring.nodes()]));
    }
    let tracks = s.tape.permute(x, &[0, 2, 1, 3])?;
    let rows = s.tape.reshape(tracks, &[b * v * t, c])?;
    let (y, r) = run_layers(s, stream, rows, t, ring)?;
    let y = s.tape.reshape(y, &[b, v, t, c])?;
    let y = s.tape.permute(y, &[0, 2, 1, 3])?;
    let r = s.tape.reshape(r, &[b, v, c])?;
    Ok((y, r))
}
