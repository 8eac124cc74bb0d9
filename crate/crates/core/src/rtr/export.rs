//! Attention-weight capture for inspection.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    S,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Block {
    Sju,
    Sru,
    Tju,
    Tru,
}

impl Block {
    pub fn stream(self) -> Stream {
        match self {
            Block::Sju | Block::Sru => Stream::S,
            Block::Tju | Block::Tru => Stream::T,
        }
    }

    pub(crate) fn op_name(self) -> &'static str {
        match self {
            Block::Sju => "sju_update",
            Block::Sru => "sru_update",
            Block::Tju => "tju_update",
            Block::Tru => "tru_update",
        }
    }
}

/// Softmax weights of one query row for one head.
///
/// `frame_or_joint` is the group the query belongs to: a frame in the spatial
/// stream, a joint track in the temporal stream. `node` is the query's index
/// inside that group, or `None` for relay queries. Weights follow the slot
/// order `[self, neighbors..., padding..., relay]` for node queries and
/// `[relay, nodes...]` for relay queries; padded slots hold exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub stream: Stream,
    pub layer: usize,
    pub head: usize,
    pub block: Block,
    pub frame_or_joint: usize,
    pub node: Option<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct AttentionRecorder {
    pub records: Vec<AttentionRecord>,
    pub(crate) context: Option<(Stream, usize)>,
}

impl AttentionRecorder {
    /// Stores `(queries · heads, width)` weights. `group_size` is the number
    /// of node queries per group, `None` when the queries are relays.
    pub(crate) fn capture(&mut self, block: Block, data: &[f64], width: usize, heads: usize, group_size: Option<usize>) {
        let (stream, layer) = self.context.unwrap_or((block.stream(), 0));
        for (row, weights) in data.chunks(width).enumerate() {
            let (query, head) = (row / heads, row % heads);
            let (frame_or_joint, node) = match group_size {
                Some(n) => (query / n, Some(query % n)),
                None => (query, None),
            };
            self.records.push(AttentionRecord {
                stream,
                layer,
                head,
                block,
                frame_or_joint,
                node,
                weights: weights.to_vec(),
            });
        }
    }
}
