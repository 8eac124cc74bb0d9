//! Relative-position attention scores.
//!
//! Weights act on row vectors: the query of embedding `e` is `e · W_q`.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId};
use crate::tensor::Tensor;

/// Parameters of the standalone four-term relative score.
#[derive(Debug, Clone)]
pub struct RelPosParams {
    /// `(d, d)` query projection.
    pub query: Tensor,
    /// `(d, d)` content-key projection.
    pub content_key: Tensor,
    /// `(d, d)` position-key projection.
    pub position_key: Tensor,
    /// `(2·max_len - 1, d)`; row `k` encodes offset `k - (max_len - 1)`.
    pub encodings: Tensor,
    /// Global bias paired with content keys.
    pub content_bias: Vec<f64>,
    /// Global bias paired with position keys.
    pub position_bias: Vec<f64>,
}

impl RelPosParams {
    pub fn zeros(dim: usize, max_len: usize) -> Self {
        Self {
            query: Tensor::zeros(&[dim, dim]),
            content_key: Tensor::zeros(&[dim, dim]),
            position_key: Tensor::zeros(&[dim, dim]),
            encodings: Tensor::zeros(&[2 * max_len - 1, dim]),
            content_bias: vec![0.0; dim],
            position_bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.content_bias.len()
    }

    pub fn max_len(&self) -> usize {
        self.encodings.shape()[0].div_ceil(2)
    }
}

fn vec_mat(v: &[f64], m: &Tensor) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut out = vec![0.0; cols];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&m.data()[i * cols..(i + 1) * cols]) {
            *o += vi * w;
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Score of query position `i` against key position `j`:
/// content-content + content-position + bias-content + bias-position.
pub fn rel_pos_score(i: usize, j: usize, e_i: &[f64], e_j: &[f64], p: &RelPosParams) -> Result<f64> {
    let d = p.dim();
    if e_i.len() != d || e_j.len() != d {
        return Err(Error::shape("rel_pos_score", &[e_i.len(), e_j.len()], &[d]));
    }
    let offset = i as i64 - j as i64;
    let reach = p.max_len() as i64 - 1;
    if offset.abs() > reach {
        return Err(Error::invalid("rel_pos_score", format!("offset {offset} outside table of reach {reach}")));
    }
    let row = (offset + reach) as usize;
    let r = &p.encodings.data()[row * d..(row + 1) * d];
    let q = vec_mat(e_i, &p.query);
    let k_content = vec_mat(e_j, &p.content_key);
    let k_position = vec_mat(r, &p.position_key);
    Ok(dot(&q, &k_content) + dot(&q, &k_position) + dot(&p.content_bias, &k_content) + dot(&p.position_bias, &k_position))
}

/// Learned position terms added to temporal joint-update logits: the
/// query (plus a global bias) against projected relative encodings.
#[derive(Debug, Clone)]
pub struct RelPosBias {
    /// `(2·frames - 1, C)` relative encodings.
    pub table: ParamId,
    /// `(C, C)` projection of the encodings.
    pub key: ParamId,
    /// `(C)` global position bias.
    pub bias: ParamId,
    pub frames: usize,
}

impl RelPosBias {
    pub fn new(init: &mut Init, name: &str, frames: usize, channels: usize) -> Self {
        let std = (1.0 / channels as f64).sqrt();
        init.scoped(name, |init| Self {
            table: init.normal("table", &[2 * frames - 1, channels], 1.0),
            key: init.normal("key", &[channels, channels], std),
            bias: init.constant("bias", &[channels], 0.0),
            frames,
        })
    }

    pub fn param_count(frames: usize, channels: usize) -> usize {
        (2 * frames - 1) * channels + channels * channels + channels
    }

    /// Table row for query position `i` and key position `j`.
    pub fn offset_row(&self, i: usize, j: usize) -> usize {
        i + self.frames - 1 - j
    }
}
