//! The full classifier: input normalization, graph-convolution trunk,
//! parallel spatial and temporal relative-transformer streams, pooled
//! fusion and an MLP head.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph_conv::{to_channels_last, StGcnBlock};
use crate::nn::{BatchNorm, Linear};
use crate::params::{Init, Mode, ParamStore, Session};
use crate::rtr::{s_rtr_forward, t_rtr_forward, AttentionRecord, RtrStream, StreamKind};
use crate::tensor::{Precision, Tensor};
use crate::topology::{
    adjacency_set, neighbor_table_spatial, temporal_ring_table, AdjacencySet, NeighborTable, PartitionStrategy, SkeletonDef,
    SkeletonGraph,
};

/// Standard deviation of the output layer; small so an untrained model
/// predicts close to uniformly.
pub const OUTPUT_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "V")]
    pub joints: usize,
    #[serde(rename = "T_in")]
    pub frames: usize,
    #[serde(rename = "C_in")]
    pub in_channels: usize,
    /// Output channels of each trunk block.
    pub channels: Vec<usize>,
    /// Node-update layers per relative-transformer stream.
    pub rtr_layers: usize,
    pub heads: usize,
    pub classes: usize,
    /// Adds learned relative-position terms to temporal joint updates.
    pub relative_positions: bool,
    /// Drop-attention probability during training.
    pub drop_attention: f64,
    pub partition: PartitionStrategy,
    /// Learned adjacency offsets and data-dependent similarity in the trunk.
    pub adaptive: bool,
    pub temporal_kernel: usize,
    pub head_hidden: usize,
    /// Bone graph; `None` picks the NTU layout for 25 joints and a binary
    /// tree otherwise.
    pub skeleton: Option<SkeletonDef>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joints: 25,
            frames: 18,
            in_channels: 3,
            channels: vec![64, 64, 64, 128, 128, 128, 256, 256, 256],
            rtr_layers: 3,
            heads: 8,
            classes: 60,
            relative_positions: false,
            drop_attention: 0.0,
            partition: PartitionStrategy::SpatialConfig,
            adaptive: false,
            temporal_kernel: 9,
            head_hidden: 256,
            skeleton: None,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient checks and the desk-scale
    /// learning run: 5 joints, 6 frames, two 8-channel blocks.
    pub fn tiny() -> Self {
        Self {
            joints: 5,
            frames: 6,
            in_channels: 3,
            channels: vec![8, 8],
            rtr_layers: 1,
            heads: 2,
            classes: 4,
            temporal_kernel: 3,
            head_hidden: 16,
            ..Self::default()
        }
    }

    pub fn skeleton_def(&self) -> SkeletonDef {
        self.skeleton.clone().unwrap_or_else(|| SkeletonDef::default_for(self.joints))
    }

    /// Temporal stride of each trunk block: 2 where the width grows (after
    /// the first block), 1 elsewhere.
    pub fn strides(&self) -> Vec<usize> {
        let mut prev = None;
        self.channels
            .iter()
            .map(|&c| {
                let s = match prev {
                    Some(p) if c > p => 2,
                    _ => 1,
                };
                prev = Some(c);
                s
            })
            .collect()
    }

    /// Frames reaching the transformer streams.
    pub fn trunk_frames(&self) -> usize {
        self.strides().iter().fold(self.frames, |t, &s| t.div_ceil(s))
    }

    pub fn width(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn partitions(&self) -> usize {
        match self.partition {
            PartitionStrategy::Uniform => 1,
            PartitionStrategy::SpatialConfig => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.joints == 0 || self.frames == 0 || self.in_channels == 0 {
            return fail("V, T_in and C_in must be positive".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail("channel plan must be a non-empty list of positive widths".into());
        }
        if self.heads == 0 {
            return fail("head count must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c % self.heads != 0) {
            return fail(format!("channel width {c} is not divisible by {} heads", self.heads));
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.rtr_layers == 0 {
            return fail("need at least one relative-transformer layer".into());
        }
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 {
            return fail(format!("temporal kernel must be odd, got {}", self.temporal_kernel));
        }
        if self.head_hidden == 0 {
            return fail("head hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_attention) {
            return fail(format!("drop-attention probability {} outside [0, 1)", self.drop_attention));
        }
        if self.trunk_frames() < 2 {
            return fail(format!("only {} frame(s) reach the temporal stream; need 2", self.trunk_frames()));
        }
        if self.skeleton_def().joints != self.joints {
            return fail(format!("skeleton has {} joints, config says {}", self.skeleton_def().joints, self.joints));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (v, k) = (self.joints, self.partitions());
        let mut total = BatchNorm::param_count(v * self.in_channels);
        let mut prev = self.in_channels;
        for &c in &self.channels {
            total += StGcnBlock::param_count(k, v, prev, c, self.temporal_kernel, self.adaptive);
            prev = c;
        }
        let c = self.width();
        let relative = self.relative_positions.then(|| self.trunk_frames());
        total += RtrStream::param_count(c, self.rtr_layers, None) + RtrStream::param_count(c, self.rtr_layers, relative);
        total + Linear::param_count(4 * c, self.head_hidden, true) + Linear::param_count(self.head_hidden, self.classes, true)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub graph: SkeletonGraph,
    pub adjacency: AdjacencySet,
    pub spatial_table: NeighborTable,
    pub ring: NeighborTable,
    pub input_norm: BatchNorm,
    pub blocks: Vec<StGcnBlock>,
    pub spatial: RtrStream,
    pub temporal: RtrStream,
    pub hidden: Linear,
    pub output: Linear,
}

/// Builds and initializes a model; the same seed gives identical parameters.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let graph = cfg.skeleton_def().build()?;
    let adjacency = adjacency_set(&graph, cfg.partition)?;
    let spatial_table = neighbor_table_spatial(&graph, true);
    let ring = temporal_ring_table(cfg.trunk_frames())?;

    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let input_norm = BatchNorm::new(&mut init, "input_norm", cfg.joints * cfg.in_channels);
    let mut blocks = Vec::with_capacity(cfg.channels.len());
    let mut prev = cfg.in_channels;
    for (i, (&c, stride)) in cfg.channels.iter().zip(cfg.strides()).enumerate() {
        blocks.push(StGcnBlock::new(
            &mut init,
            &format!("trunk{i}"),
            cfg.partitions(),
            cfg.joints,
            prev,
            c,
            cfg.temporal_kernel,
            stride,
            cfg.adaptive,
        )?);
        prev = c;
    }
    let c = cfg.width();
    let spatial = RtrStream::new(&mut init, "spatial", StreamKind::Spatial, c, cfg.heads, cfg.rtr_layers, None)?;
    let relative = cfg.relative_positions.then(|| cfg.trunk_frames());
    let temporal = RtrStream::new(&mut init, "temporal", StreamKind::Temporal, c, cfg.heads, cfg.rtr_layers, relative)?;
    let hidden = Linear::new(&mut init, "head.hidden", 4 * c, cfg.head_hidden, true);
    let output = Linear::with_std(&mut init, "head.output", cfg.head_hidden, cfg.classes, true, OUTPUT_INIT_STD);

    Ok(Model {
        config: cfg.clone(),
        store,
        graph,
        adjacency,
        spatial_table,
        ring,
        input_norm,
        blocks,
        spatial,
        temporal,
        hidden,
        output,
    })
}

fn pool(s: &mut Session, x: Var) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let (b, c) = (shape[0], *shape.last().unwrap());
    let flat = s.tape.reshape(x, &[b, shape.iter().product::<usize>() / (b * c), c])?;
    s.tape.mean_axis(flat, 1)
}

impl Model {
    /// Class logits `(B, classes)` for channels-last input `(B, T, V, C_in)`.
    pub fn logits(&self, s: &mut Session, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = s.tape.shape(x).to_vec();
        let expected = [cfg.frames, cfg.joints, cfg.in_channels];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape("model_forward", &shape, &expected));
        }
        let b = shape[0];
        let flat = s.tape.reshape(x, &[b * cfg.frames, cfg.joints * cfg.in_channels])?;
        let flat = self.input_norm.forward(s, flat)?;
        let mut y = s.tape.reshape(flat, &shape)?;
        for block in &self.blocks {
            y = block.forward(s, y, &self.adjacency)?;
        }
        let (sj, sr) = s_rtr_forward(s, &self.spatial, y, &self.spatial_table)?;
        let (tj, tr) = t_rtr_forward(s, &self.temporal, y, &self.ring)?;
        let pooled = [pool(s, sj)?, pool(s, sr)?, pool(s, tj)?, pool(s, tr)?];
        let fused = s.tape.concat(&pooled, 1)?;
        let h = self.hidden.forward(s, fused)?;
        let h = s.tape.relu(h)?;
        self.output.forward(s, h)
    }

    /// Eval-mode class probabilities for channels-first input `(B, C_in, V, T)`.
    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        self.probabilities_channels_last(&to_channels_last(batch)?)
    }

    /// Eval-mode class probabilities for `(B, T, V, C_in)` input.
    pub fn probabilities_channels_last(&self, x: &Tensor) -> Result<Tensor> {
        let mut s = Session::new(&self.store, Mode::Eval, Precision::F32);
        let xv = s.tape.constant(x.clone());
        let logits = self.logits(&mut s, xv)?;
        let probs = s.tape.softmax(logits)?;
        Ok(s.tape.value(probs).clone())
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Eval-mode attention weights of every update block for one `(T, V, C_in)`
    /// sequence.
    pub fn attention_records(&self, seq: &Tensor) -> Result<Vec<AttentionRecord>> {
        let x = Tensor::new(&[1, seq.shape()[0], seq.shape()[1], seq.shape()[2]], seq.data().to_vec())?;
        let mut s = Session::new(&self.store, Mode::Eval, Precision::F32).record_attention();
        let xv = s.tape.constant(x);
        self.logits(&mut s, xv)?;
        Ok(s.take_records())
    }
}

/// Eval-mode class probabilities `(B, classes)` for `(B, C_in, V, T)` input.
pub fn model_forward(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.probabilities(batch)
}

/// `bone[t, v] = joint[t, v] - joint[t, parent(v)]`; the root bone is zero.
pub fn bone_features(seq: &Tensor, g: &SkeletonGraph) -> Result<Tensor> {
    let &[t, v, c] = seq.shape() else {
        return Err(Error::invalid("bone_features", format!("expected (T, V, C), got {:?}", seq.shape())));
    };
    if v != g.joints() {
        return Err(Error::shape("bone_features", seq.shape(), &[g.joints()]));
    }
    let parents = g.parents();
    let d = seq.data();
    let mut out = vec![0.0; d.len()];
    for ti in 0..t {
        for (vi, parent) in parents.iter().enumerate() {
            if let Some(p) = *parent {
                for ci in 0..c {
                    out[(ti * v + vi) * c + ci] = d[(ti * v + vi) * c + ci] - d[(ti * v + p) * c + ci];
                }
            }
        }
    }
    Tensor::new(seq.shape(), out)
}

/// Score-level fusion: row-renormalized mean of two probability matrices.
pub fn ensemble_scores(p1: &Tensor, p2: &Tensor) -> Result<Tensor> {
    if p1.shape() != p2.shape() || p1.rank() != 2 {
        return Err(Error::shape("ensemble_scores", p1.shape(), p2.shape()));
    }
    let k = p1.shape()[1];
    let mut out: Vec<f64> = p1.data().iter().zip(p2.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    for row in out.chunks_mut(k) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|x| *x /= total);
        }
    }
    Tensor::new(p1.shape(), out)
}

/// Resamples a `(T, V, C)` sequence to `frames` frames at evenly spaced
/// positions (frame centers), repeating frames when upsampling.
pub fn sample_frames(seq: &Tensor, frames: usize) -> Result<Tensor> {
    let &[t, v, c] = seq.shape() else {
        return Err(Error::invalid("sample_frames", format!("expected (T, V, C), got {:?}", seq.shape())));
    };
    if frames == 0 {
        return Err(Error::invalid("sample_frames", "target frame count must be positive"));
    }
    let row = v * c;
    let mut out = Vec::with_capacity(frames * row);
    for i in 0..frames {
        let src = ((2 * i + 1) * t / (2 * frames)).min(t - 1);
        out.extend_from_slice(&seq.data()[src * row..(src + 1) * row]);
    }
    Tensor::new(&[frames, v, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_strides_halve_at_width_changes() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.strides(), vec![1, 1, 1, 2, 1, 1, 2, 1, 1]);
        assert_eq!(cfg.trunk_frames(), 5);
        assert_eq!(ModelConfig::tiny().trunk_frames(), 6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny();
        cfg.channels = vec![8, 7];
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny();
        cfg.classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny();
        cfg.frames = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sampling_keeps_identity_length() {
        let seq = Tensor::new(&[4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(sample_frames(&seq, 4).unwrap(), seq);
        assert_eq!(sample_frames(&seq, 2).unwrap().data(), &[1.0, 3.0]);
        assert_eq!(sample_frames(&seq, 8).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn ensemble_of_equal_scores_is_idempotent() {
        let p = Tensor::new(&[1, 3], vec![0.2, 0.3, 0.5]).unwrap();
        assert!(ensemble_scores(&p, &p).unwrap().max_abs_diff(&p) < 1e-15);
    }
}
