//! Finite-difference verification of session-level computations: inputs and
//! stored parameters alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{max_relative_error, Fault, Var};
use crate::error::{Error, Result};
use crate::network::{build_model, ModelConfig};
use crate::params::{Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Precision, Tensor};

/// Seed for the end-to-end check. Central differences straddle a ReLU kink
/// for some initializations, which shows up as a large error that shrinks
/// with `eps`; this seed keeps every probe on one side of every kink.
pub const DEFAULT_SEED: u64 = 5;

/// Analytic and numeric gradient of one tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error() <= tol
    }
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut s = Session::new(store, Mode::Train, Precision::F64).track_grads(false);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.constant(t.clone())).collect();
    let out = f(&mut s, &vars)?;
    if s.tape.value(out).len() != 1 {
        return Err(Error::invalid("gradcheck", "expression is not scalar"));
    }
    Ok(s.tape.value(out).item())
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps`, for every input tensor and every parameter in `params`.
///
/// `f` runs in train mode at 64-bit precision without drop-attention.
/// `fault` corrupts the analytic pass only, to confirm the check can fail.
pub fn check_session<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    params: &[ParamId],
    eps: f64,
    fault: Option<Fault>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("gradcheck", "eps must be positive"));
    }
    let mut s = Session::new(store, Mode::Train, Precision::F64).track_grads(true);
    if let Some(fault) = fault {
        s.tape.inject_fault(fault);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.leaf(t.clone(), true)).collect();
    let out = f(&mut s, &vars)?;
    let loss = s.tape.value(out).item();
    let grads = s.tape.backward(out)?;
    let param_grads = s.param_grads(&grads);
    let input_grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(s);

    let mut tensors = Vec::new();
    let mut work = inputs.to_vec();
    for (i, analytic) in input_grads.into_iter().enumerate() {
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(store, &work, &f)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(store, &work, &f)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        tensors.push(TensorCheck {
            name: format!("input{i}"),
            max_relative_error: max_relative_error(&analytic, &numeric),
            analytic,
            numeric,
        });
    }

    let mut perturbed = store.clone();
    for &id in params {
        let base = store.get(id).clone();
        let analytic = param_grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(base.shape()));
        let mut numeric = Tensor::zeros(base.shape());
        for j in 0..base.len() {
            let mut t = base.clone();
            t.data_mut()[j] = base.data()[j] + eps;
            perturbed.set(id, t.clone());
            let plus = evaluate(&perturbed, inputs, &f)?;
            t.data_mut()[j] = base.data()[j] - eps;
            perturbed.set(id, t);
            let minus = evaluate(&perturbed, inputs, &f)?;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * eps);
        }
        perturbed.set(id, base);
        tensors.push(TensorCheck {
            name: store.entry(id).name.clone(),
            max_relative_error: max_relative_error(&analytic, &numeric),
            analytic,
            numeric,
        });
    }
    Ok(GradCheckReport { loss, tensors })
}

/// End-to-end check of the classifier: cross-entropy of a random batch
/// against every trainable parameter.
pub fn model_gradcheck(cfg: &ModelConfig, seed: u64, batch: usize, eps: f64, fault: Option<Fault>) -> Result<GradCheckReport> {
    let model = build_model(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = [batch, cfg.frames, cfg.joints, cfg.in_channels];
    let x = Tensor::new(&shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.classes)).collect();
    let params: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| model.store.entry(id).kind == ParamKind::Weight)
        .collect();
    check_session(&model.store, &[x], &params, eps, fault, |s, v| {
        let logits = model.logits(s, v[0])?;
        s.tape.cross_entropy(logits, &labels)
    })
}
