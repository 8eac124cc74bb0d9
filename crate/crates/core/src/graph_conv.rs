//! Spatial graph convolution, its adaptive variant, and per-joint temporal
//! convolution.
//!
//! Feature maps are channels-last `(B, T, V, C)` throughout.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::BatchNorm;
use crate::params::{Init, ParamId, Session};
use crate::tensor::Tensor;
use crate::topology::AdjacencySet;

fn dims4(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 4]> {
    match *tape.shape(x) {
        [b, t, v, c] => Ok([b, t, v, c]),
        ref s => Err(Error::invalid(op, format!("expected (B, T, V, C), got {s:?}"))),
    }
}

/// `out[b, t, i, :] = Σ_j m[i, j] · x[b, t, j, :]` for a shared `V×V` matrix.
pub fn propagate(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let [b, t, v, c] = dims4(tape, x, "propagate")?;
    if tape.shape(m) != [v, v] {
        return Err(Error::shape("propagate", tape.shape(x), tape.shape(m)));
    }
    let xp = tape.permute(x, &[2, 0, 1, 3])?;
    let xp = tape.reshape(xp, &[v, b * t * c])?;
    let y = tape.matmul(m, xp)?;
    let y = tape.reshape(y, &[v, b, t, c])?;
    tape.permute(y, &[1, 2, 0, 3])
}

/// Same as [`propagate`] with one `V×V` matrix per sample, `m: (B, V, V)`.
pub fn propagate_batched(tape: &mut Tape, x: Var, m: Var) -> Result<Var> {
    let [b, t, v, c] = dims4(tape, x, "propagate_batched")?;
    if tape.shape(m) != [b, v, v] {
        return Err(Error::shape("propagate_batched", tape.shape(x), tape.shape(m)));
    }
    let xp = tape.permute(x, &[0, 2, 1, 3])?;
    let xp = tape.reshape(xp, &[b, v, t * c])?;
    let y = tape.bmm(m, xp)?;
    let y = tape.reshape(y, &[b, v, t, c])?;
    tape.permute(y, &[0, 2, 1, 3])
}

/// Learned additive adjacency `B_k` and the embedded-Gaussian similarity
/// generator for `C_k`.
#[derive(Debug, Clone)]
pub struct AdaptiveParts {
    pub offsets: Vec<ParamId>,
    pub theta: Vec<ParamId>,
    pub phi: Vec<ParamId>,
    pub embed: usize,
    /// When false, `C_k` is left out entirely.
    pub similarity: bool,
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weights: Vec<ParamId>,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub adaptive: Option<AdaptiveParts>,
}

impl GcnLayer {
    pub fn embed_width(outputs: usize) -> usize {
        (outputs / 4).max(1)
    }

    pub fn new(init: &mut Init, name: &str, partitions: usize, joints: usize, inputs: usize, outputs: usize, adaptive: bool) -> Self {
        init.scoped(name, |init| {
            let std = (2.0 / (partitions * inputs) as f64).sqrt();
            let weights = (0..partitions).map(|k| init.normal(&format!("weight{k}"), &[inputs, outputs], std)).collect();
            let bias = init.constant("bias", &[outputs], 0.0);
            let adaptive = adaptive.then(|| {
                let embed = Self::embed_width(outputs);
                let estd = (1.0 / inputs as f64).sqrt();
                AdaptiveParts {
                    offsets: (0..partitions).map(|k| init.constant(&format!("offset{k}"), &[joints, joints], 0.0)).collect(),
                    theta: (0..partitions).map(|k| init.normal(&format!("theta{k}"), &[inputs, embed], estd)).collect(),
                    phi: (0..partitions).map(|k| init.normal(&format!("phi{k}"), &[inputs, embed], estd)).collect(),
                    embed,
                    similarity: true,
                }
            });
            Self {
                weights,
                bias,
                inputs,
                outputs,
                adaptive,
            }
        })
    }

    pub fn param_count(partitions: usize, joints: usize, inputs: usize, outputs: usize, adaptive: bool) -> usize {
        let base = partitions * inputs * outputs + outputs;
        if adaptive {
            base + partitions * (joints * joints + 2 * inputs * Self::embed_width(outputs))
        } else {
            base
        }
    }

    pub fn partitions(&self) -> usize {
        self.weights.len()
    }
}

fn check_partitions(adj: &AdjacencySet, layer: &GcnLayer) -> Result<()> {
    if adj.partitions() != layer.partitions() {
        return Err(Error::invalid(
            "gcn_forward",
            format!("layer has {} partitions, adjacency has {}", layer.partitions(), adj.partitions()),
        ));
    }
    Ok(())
}

fn mix_channels(s: &mut Session, x: Var, weight: ParamId) -> Result<Var> {
    let [b, t, v, c] = dims4(&s.tape, x, "gcn_forward")?;
    let w = s.param(weight);
    let out = s.tape.shape(w)[1];
    let flat = s.tape.reshape(x, &[b * t * v, c])?;
    let y = s.tape.matmul(flat, w)?;
    s.tape.reshape(y, &[b, t, v, out])
}

fn add_bias(s: &mut Session, x: Var, bias: ParamId) -> Result<Var> {
    let b = s.param(bias);
    s.tape.add_row(x, b)
}

/// `f_out = Σ_k (Ā_k f_in) W_k + bias`, the same map at every frame.
pub fn gcn_forward(s: &mut Session, x: Var, adj: &AdjacencySet, layer: &GcnLayer) -> Result<Var> {
    check_partitions(adj, layer)?;
    let mut total: Option<Var> = None;
    for (abar, &w) in adj.normalized.iter().zip(&layer.weights) {
        let m = s.tape.constant(abar.clone());
        let p = propagate(&mut s.tape, x, m)?;
        let y = mix_channels(s, p, w)?;
        total = Some(match total {
            Some(acc) => s.tape.add(acc, y)?,
            None => y,
        });
    }
    add_bias(s, total.expect("at least one partition"), layer.bias)
}

/// Row-softmax of `θ(x) φ(x)ᵀ` over joints, one `V×V` matrix per sample.
pub fn similarity_matrix(s: &mut Session, x: Var, theta: ParamId, phi: ParamId) -> Result<Var> {
    let [b, t, v, _] = dims4(&s.tape, x, "agcn_forward")?;
    let embed = |s: &mut Session, p: ParamId| -> Result<Var> {
        let e = mix_channels(s, x, p)?;
        let ce = s.tape.shape(e)[3];
        let e = s.tape.permute(e, &[0, 2, 1, 3])?;
        s.tape.reshape(e, &[b, v, t * ce])
    };
    let th = embed(s, theta)?;
    let ph = embed(s, phi)?;
    let width = s.tape.shape(th)[2];
    let pht = s.tape.permute(ph, &[0, 2, 1])?;
    let scores = s.tape.bmm(th, pht)?;
    let scores = s.tape.mul_scalar(scores, 1.0 / width as f64)?;
    s.tape.softmax(scores)
}

/// `f_out = Σ_k ((Ā_k + B_k + C_k) f_in) W_k + bias`.
pub fn agcn_forward(s: &mut Session, x: Var, adj: &AdjacencySet, layer: &GcnLayer) -> Result<Var> {
    check_partitions(adj, layer)?;
    let parts = layer
        .adaptive
        .as_ref()
        .ok_or_else(|| Error::invalid("agcn_forward", "layer has no adaptive parameters"))?;
    let mut total: Option<Var> = None;
    for k in 0..layer.partitions() {
        let abar = s.tape.constant(adj.normalized[k].clone());
        let offset = s.param(parts.offsets[k]);
        let m = s.tape.add(abar, offset)?;
        let mut p = propagate(&mut s.tape, x, m)?;
        if parts.similarity {
            let ck = similarity_matrix(s, x, parts.theta[k], parts.phi[k])?;
            let q = propagate_batched(&mut s.tape, x, ck)?;
            p = s.tape.add(p, q)?;
        }
        let y = mix_channels(s, p, layer.weights[k])?;
        total = Some(match total {
            Some(acc) => s.tape.add(acc, y)?,
            None => y,
        });
    }
    add_bias(s, total.expect("at least one partition"), layer.bias)
}

/// Depthwise convolution along time, one odd-length kernel per channel.
#[derive(Debug, Clone)]
pub struct TcnLayer {
    /// `(K_t, C)`
    pub weight: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl TcnLayer {
    pub fn new(init: &mut Init, name: &str, channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid("tcn", format!("kernel size must be odd, got {kernel}")));
        }
        if stride == 0 {
            return Err(Error::invalid("tcn", "stride must be positive"));
        }
        let std = (1.0 / kernel as f64).sqrt();
        let weight = init.scoped(name, |init| init.normal("weight", &[kernel, channels], std));
        Ok(Self { weight, kernel, stride })
    }

    pub fn param_count(channels: usize, kernel: usize) -> usize {
        channels * kernel
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }
}

pub fn tcn_forward(s: &mut Session, x: Var, layer: &TcnLayer) -> Result<Var> {
    let [b, t, v, c] = dims4(&s.tape, x, "tcn_forward")?;
    if layer.kernel % 2 == 0 {
        return Err(Error::invalid("tcn_forward", format!("kernel size must be odd, got {}", layer.kernel)));
    }
    let pad = (layer.kernel - 1) / 2;
    let out_t = layer.output_frames(t);
    let w = s.param(layer.weight);
    if s.tape.shape(w) != [layer.kernel, c] {
        return Err(Error::shape("tcn_forward", s.tape.shape(x), s.tape.shape(w)));
    }
    let frames = s.tape.reshape(x, &[b * t, v * c])?;
    let mut total: Option<Var> = None;
    for k in 0..layer.kernel {
        let index: Vec<Option<usize>> = (0..b)
            .flat_map(|bi| {
                (0..out_t).map(move |to| {
                    let src = (to * layer.stride + k) as isize - pad as isize;
                    (0..t as isize).contains(&src).then(|| bi * t + src as usize)
                })
            })
            .collect();
        if index.iter().all(Option::is_none) {
            continue;
        }
        let g = s.tape.gather_rows(frames, &index)?;
        let g = s.tape.reshape(g, &[b * out_t * v, c])?;
        let wk = s.tape.narrow(w, 0, k, 1)?;
        let wk = s.tape.reshape(wk, &[c])?;
        let y = s.tape.mul_row(g, wk)?;
        total = Some(match total {
            Some(acc) => s.tape.add(acc, y)?,
            None => y,
        });
    }
    let total = total.expect("centre tap always lands inside the sequence");
    s.tape.reshape(total, &[b, out_t, v, c])
}

/// GCN → BN → ReLU → TCN → BN → (+ residual) → ReLU.
#[derive(Debug, Clone)]
pub struct StGcnBlock {
    pub gcn: GcnLayer,
    pub bn_spatial: BatchNorm,
    pub tcn: TcnLayer,
    pub bn_temporal: BatchNorm,
    pub residual: bool,
}

impl StGcnBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        partitions: usize,
        joints: usize,
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        adaptive: bool,
    ) -> Result<Self> {
        init.push(name);
        let block = (|| {
            Ok(Self {
                gcn: GcnLayer::new(init, "gcn", partitions, joints, inputs, outputs, adaptive),
                bn_spatial: BatchNorm::new(init, "bn_spatial", outputs),
                tcn: TcnLayer::new(init, "tcn", outputs, kernel, stride)?,
                bn_temporal: BatchNorm::new(init, "bn_temporal", outputs),
                residual: inputs == outputs && stride == 1,
            })
        })();
        init.pop();
        block
    }

    pub fn param_count(partitions: usize, joints: usize, inputs: usize, outputs: usize, kernel: usize, adaptive: bool) -> usize {
        GcnLayer::param_count(partitions, joints, inputs, outputs, adaptive)
            + 2 * BatchNorm::param_count(outputs)
            + TcnLayer::param_count(outputs, kernel)
    }

    pub fn forward(&self, s: &mut Session, x: Var, adj: &AdjacencySet) -> Result<Var> {
        let y = if self.gcn.adaptive.is_some() {
            agcn_forward(s, x, adj, &self.gcn)?
        } else {
            gcn_forward(s, x, adj, &self.gcn)?
        };
        let y = channel_norm(s, y, &self.bn_spatial)?;
        let y = s.tape.relu(y)?;
        let y = tcn_forward(s, y, &self.tcn)?;
        let mut y = channel_norm(s, y, &self.bn_temporal)?;
        if self.residual {
            y = s.tape.add(y, x)?;
        }
        s.tape.relu(y)
    }
}

/// Batch norm over the channel axis of a `(B, T, V, C)` map.
pub fn channel_norm(s: &mut Session, x: Var, bn: &BatchNorm) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let c = *shape.last().unwrap();
    let flat = s.tape.reshape(x, &[shape.iter().product::<usize>() / c, c])?;
    let y = bn.forward(s, flat)?;
    s.tape.reshape(y, &shape)
}

/// Converts `(B, C, V, T)` into the channels-last layout used here.
pub fn to_channels_last(t: &Tensor) -> Result<Tensor> {
    t.permute(&[0, 3, 2, 1])
}

/// Inverse of [`to_channels_last`].
pub fn to_channels_first(t: &Tensor) -> Result<Tensor> {
    t.permute(&[0, 3, 2, 1])
}
