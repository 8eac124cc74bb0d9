//! Small parameterized layers shared by the trunk, the transformer blocks and
//! the classification head. All of them act on `(rows, C)` matrices.

use crate::autodiff::{NormMode, Var};
use crate::error::Result;
use crate::params::{Init, Mode, ParamId, Session, StatsUpdate};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// `x · W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn new(init: &mut Init, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        Self::with_std(init, name, inputs, outputs, bias, std)
    }

    pub fn with_std(init: &mut Init, name: &str, inputs: usize, outputs: usize, bias: bool, std: f64) -> Self {
        init.scoped(name, |init| Self {
            weight: init.normal("weight", &[inputs, outputs], std),
            bias: bias.then(|| init.constant("bias", &[outputs], 0.0)),
            inputs,
            outputs,
        })
    }

    pub fn param_count(inputs: usize, outputs: usize, bias: bool) -> usize {
        inputs * outputs + if bias { outputs } else { 0 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        init.scoped(name, |init| Self {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
            running_mean: init.buffer("running_mean", &[channels], 0.0),
            running_var: init.buffer("running_var", &[channels], 1.0),
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    /// Train mode normalizes with batch statistics and queues a running
    /// average update; eval mode uses the running statistics.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let (y, stats) = s.tape.batch_norm(x, gamma, beta, NormMode::Batch, None, BN_EPS)?;
                s.push_stats(StatsUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch: stats.expect("batch mode returns statistics"),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.buffer(self.running_mean).data();
                let var = s.buffer(self.running_var).data();
                let (y, _) = s.tape.batch_norm(x, gamma, beta, NormMode::Fixed, Some((mean, var)), BN_EPS)?;
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        init.scoped(name, |init| Self {
            gamma: init.constant("gamma", &[channels], 1.0),
            beta: init.constant("beta", &[channels], 0.0),
        })
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        s.tape.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Blends batch statistics into running buffers.
pub fn apply_stats(store: &mut crate::params::ParamStore, updates: &[StatsUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.batch.mean), (u.var, &u.batch.var)] {
            let mut t = store.get(id).clone();
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b) as f32 as f64;
            }
            store.set(id, t);
        }
    }
}
