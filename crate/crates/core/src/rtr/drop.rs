//! Drop-attention: random column masking on attention logits before softmax.

use rand::Rng;

use crate::autodiff::MASK_FILL;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid("drop_attention", format!("drop probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Drops each live slot of every `width`-wide row with probability `p`.
/// A row that would lose every live slot is redrawn, so rows with at least
/// one live slot keep at least one.
pub fn drop_mask_rows<R: Rng + ?Sized>(live: &[bool], width: usize, p: f64, rng: &mut R) -> Result<Vec<bool>> {
    check_probability(p)?;
    if width == 0 || live.len() % width != 0 {
        return Err(Error::invalid("drop_attention", format!("{} slots do not split into rows of {width}", live.len())));
    }
    let mut out = live.to_vec();
    if p == 0.0 {
        return Ok(out);
    }
    for (src, dst) in live.chunks(width).zip(out.chunks_mut(width)) {
        if !src.iter().any(|&l| l) {
            continue;
        }
        loop {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s && !rng.random_bool(p);
            }
            if dst.iter().any(|&l| l) {
                break;
            }
        }
    }
    Ok(out)
}

/// Applies drop-attention to raw logits whose last axis indexes key slots.
/// Already-masked entries (at the mask fill value) stay masked; eval mode
/// returns the logits unchanged.
pub fn drop_attention<R: Rng + ?Sized>(logits: &Tensor, p: f64, training: bool, rng: &mut R) -> Result<Tensor> {
    check_probability(p)?;
    if !training || p == 0.0 {
        return Ok(logits.clone());
    }
    let width = *logits.shape().last().expect("tensors have rank >= 1");
    let live: Vec<bool> = logits.data().iter().map(|&x| x > MASK_FILL).collect();
    let keep = drop_mask_rows(&live, width, p, rng)?;
    let mut out = logits.clone();
    for (x, k) in out.data_mut().iter_mut().zip(keep) {
        if !k {
            *x = MASK_FILL;
        }
    }
    Ok(out)
}
