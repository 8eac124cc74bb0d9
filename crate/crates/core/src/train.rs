//! SGD training with a warmup-then-exponential-decay learning rate, random
//! rotation augmentation and evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::{argmax_rows, Metrics};
use crate::network::{sample_frames, Model};
use crate::nn::apply_stats;
use crate::params::{Mode, ParamKind, ParamStore, Session};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    /// Per-step decay factor after warmup.
    pub decay_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Maximum rotation per axis, radians.
    pub augment_max_angle: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 120,
            warmup_steps: 700,
            lr_start: 4e-7,
            lr_peak: 5e-4,
            decay_gamma: 0.9996,
            momentum: 0.9,
            weight_decay: 1e-4,
            augment_max_angle: 0.3,
            seed: 0,
        }
    }
}

pub const PRESETS: [&str; 5] = ["default", "ntu60", "ntu120", "uav", "desk"];

impl TrainConfig {
    /// Named settings. `ntu60`, `ntu120` and `uav` carry the published batch
    /// sizes, epoch counts and learning-rate ranges; `desk` is tuned for the
    /// small synthetic set.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        Ok(match name {
            "default" => base,
            "ntu60" => Self {
                batch_size: 32,
                epochs: 120,
                lr_start: 3e-7,
                lr_peak: 6e-4,
                decay_gamma: 0.9985,
                ..base
            },
            "ntu120" => Self {
                batch_size: 32,
                epochs: 120,
                lr_start: 2e-7,
                lr_peak: 8e-4,
                decay_gamma: 0.9991,
                ..base
            },
            "uav" => Self {
                batch_size: 128,
                epochs: 65,
                lr_start: 1e-7,
                lr_peak: 5e-4,
                decay_gamma: 0.9993,
                ..base
            },
            "desk" => Self {
                batch_size: 8,
                epochs: 200,
                warmup_steps: 90,
                lr_start: 1e-4,
                lr_peak: 0.01,
                decay_gamma: 0.999,
                ..base
            },
            other => return Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.lr_start > 0.0 && self.lr_start <= self.lr_peak) {
            return fail("need 0 < lr_start <= lr_peak");
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma < 1.0) {
            return fail("decay factor must lie in (0, 1)");
        }
        if self.warmup_steps == 0 {
            return fail("warmup needs at least one step");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.augment_max_angle < 0.0 {
            return fail("momentum must lie in [0, 1); weight decay and rotation angle must be non-negative");
        }
        Ok(())
    }
}

/// Linear warmup from `lr_start` to `lr_peak` over `warmup_steps`, then
/// `lr_peak · decay_gamma^(step - warmup_steps)`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        let f = step as f64 / cfg.warmup_steps as f64;
        cfg.lr_start * (1.0 - f) + cfg.lr_peak * f
    } else {
        let exponent = i32::try_from(step - cfg.warmup_steps).unwrap_or(i32::MAX);
        cfg.lr_peak * cfg.decay_gamma.powi(exponent)
    }
}

/// `velocity = momentum·velocity + grad + weight_decay·param`, then
/// `param -= lr·velocity`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Momentum state for every trainable tensor of a store. Parameters and
/// velocities are kept at 32-bit precision.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }

    /// Parameters with no gradient (untouched, or buffers) are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(Some(g)) = grads.get(id.index()) else { continue };
            if store.entry(id).kind != ParamKind::Weight {
                continue;
            }
            let mut p = store.get(id).clone();
            let v = &mut self.velocity[id.index()];
            sgd_step(p.data_mut(), g.data(), v, lr, self.momentum, self.weight_decay);
            Precision::F32.round_slice(p.data_mut());
            Precision::F32.round_slice(v);
            store.set(id, p);
        }
    }
}

/// Mean cross-entropy of `probs` rows against `labels`, `-log p[label]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[b, k] = probs.shape() else {
        return Err(Error::invalid("cross_entropy", "expected (B, K) probabilities"));
    };
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", probs.shape(), &[labels.len()]));
    }
    let mut total = 0.0;
    for (row, &l) in probs.data().chunks(k).zip(labels) {
        if l >= k {
            return Err(Error::invalid("cross_entropy", format!("label {l} out of range 0..{k}")));
        }
        total -= row[l].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / b as f64)
}

/// Rotates every joint of a `(T, V, 3)` sequence by one random rotation
/// `Rx·Ry·Rz`, each angle uniform in `[-max_angle, max_angle]`.
pub fn random_rotation_augment<R: Rng + ?Sized>(seq: &Tensor, max_angle: f64, rng: &mut R) -> Result<Tensor> {
    if seq.rank() != 3 || seq.shape()[2] != 3 {
        return Err(Error::invalid("random_rotation_augment", format!("expected (T, V, 3), got {:?}", seq.shape())));
    }
    let mut angle = || if max_angle > 0.0 { rng.random_range(-max_angle..=max_angle) } else { 0.0 };
    let (a, b, c) = (angle(), angle(), angle());
    let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
    let mul = |m: [[f64; 3]; 3], n: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| m[i][k] * n[k][j]).sum();
            }
        }
        out
    };
    let r = mul(mul(rx, ry), rz);
    let mut out = seq.clone();
    for p in out.data_mut().chunks_mut(3) {
        let v = [p[0], p[1], p[2]];
        for i in 0..3 {
            p[i] = r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
        }
    }
    Ok(out)
}

/// Stacks `(T, V, C)` samples into `(B, T_in, V, C)`, resampling time.
pub fn stack_batch(model: &Model, samples: &[&Tensor]) -> Result<Tensor> {
    let cfg = &model.config;
    let mut data = Vec::new();
    for s in samples {
        let shape = s.shape();
        if shape.len() != 3 || shape[1] != cfg.joints || shape[2] != cfg.in_channels {
            return Err(Error::shape("stack_batch", shape, &[cfg.frames, cfg.joints, cfg.in_channels]));
        }
        data.extend_from_slice(sample_frames(s, cfg.frames)?.data());
    }
    Tensor::new(&[samples.len(), cfg.frames, cfg.joints, cfg.in_channels], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when the dataset has no validation split.
    pub val_acc: Option<f64>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for r in history {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.train_acc, val));
    }
    out
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            step,
            cause: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Trains in place on the train split. Each epoch shuffles (seeded),
/// augments, and steps SGD per mini-batch; the validation split, when
/// present, is evaluated after every epoch. `on_epoch` sees each record
/// as it is produced.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.num_classes() != model.config.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            data.num_classes(),
            model.config.classes
        )));
    }
    let train_set: Vec<&Sample> = data.in_split(&[Split::Train]);
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let val_set: Vec<&Sample> = data.in_split(&[Split::Val]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model.store, cfg.momentum, cfg.weight_decay);
    let augment = cfg.augment_max_angle > 0.0 && model.config.in_channels == 3;
    let drop_p = model.config.drop_attention;
    let k = model.config.classes;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            lr = lr_schedule(step, cfg);
            let mut inputs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seq = &train_set[i].data;
                inputs.push(if augment { random_rotation_augment(seq, cfg.augment_max_angle, &mut rng)? } else { seq.clone() });
            }
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let x = stack_batch(model, &inputs.iter().collect::<Vec<_>>())?;
            let drop_seed: u64 = rng.random();

            let (loss, grads, stats, logits) = {
                let mut s = Session::new(&model.store, Mode::Train, Precision::F32);
                if drop_p > 0.0 {
                    s = s.with_drop_attention(drop_p, drop_seed);
                }
                let xv = s.tape.constant(x);
                let run = |s: &mut Session| -> Result<_> {
                    let logits = model.logits(s, xv)?;
                    let loss = s.tape.cross_entropy(logits, &labels)?;
                    let g = s.tape.backward(loss)?;
                    Ok((logits, loss, g))
                };
                let (logits, loss, g) = run(&mut s).map_err(|e| diverged(epoch, step, e))?;
                let loss_value = s.tape.value(loss).item();
                (loss_value, s.param_grads(&g), s.take_stats(), s.tape.value(logits).clone())
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    cause: format!("loss is {loss}"),
                });
            }
            apply_stats(&mut model.store, &stats);
            sgd.step(&mut model.store, &grads, lr);
            loss_sum += loss * chunk.len() as f64;
            correct += argmax_rows(logits.data(), k).iter().zip(&labels).filter(|(p, l)| p == l).count();
            step += 1;
        }
        let val_acc = if val_set.is_empty() { None } else { Some(evaluate_samples(model, &val_set)?.accuracy) };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Eval-mode class probabilities for samples, in batches.
pub fn predict(model: &Model, samples: &[&Sample]) -> Result<Tensor> {
    let k = model.config.classes;
    let mut out = Vec::with_capacity(samples.len() * k);
    for chunk in samples.chunks(64) {
        let x = stack_batch(model, &chunk.iter().map(|s| &s.data).collect::<Vec<_>>())?;
        out.extend_from_slice(model.probabilities_channels_last(&x)?.data());
    }
    Tensor::new(&[samples.len(), k], out)
}

pub fn evaluate_samples(model: &Model, samples: &[&Sample]) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty set".into()));
    }
    let probs = predict(model, samples)?;
    let preds = argmax_rows(probs.data(), model.config.classes);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&preds, &labels, model.config.classes)
}

/// Metrics over the samples of the given splits.
pub fn evaluate(model: &Model, data: &Dataset, splits: &[Split]) -> Result<Metrics> {
    evaluate_samples(model, &data.in_split(splits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 4e-7);
        assert_eq!(lr_schedule(700, &cfg), 5e-4);
        assert_eq!(lr_schedule(701, &cfg), 5e-4 * 0.9996);
    }

    #[test]
    fn plain_sgd() {
        let mut p = vec![1.0, 2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, vec![0.95, 2.1]);
    }

    #[test]
    fn uniform_cross_entropy() {
        let p = Tensor::full(&[2, 4], 0.25);
        assert!((cross_entropy(&p, &[0, 3]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let one_hot = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&one_hot, &[0]).unwrap(), 0.0);
    }

    #[test]
    fn unknown_preset() {
        assert!(TrainConfig::preset("imagenet").is_err());
        for name in PRESETS {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
    }
}
