//! A small style-based GAN: mapping network, modulated generator,
//! discriminator with R1, and the truncation trick.

mod model;
mod train;

pub use model::{r1_from_logits, GanArch, GanModel, Trainable, IMAGE_CHANNELS, LRELU_SLOPE};
pub use train::{train_gan, GanLogRow, GanTrainConfig, GanTrainOutcome, DISC_AUG_MAX_SHIFT};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `w' = w̄ + ψ (w − w̄)` applied to every row of `w` (`[N, d]`).
pub fn truncate(w: &Tensor, w_mean: &Tensor, psi: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::invalid(format!("truncation ψ must lie in [0, 1], got {psi}")));
    }
    let d = w_mean.numel();
    if w.ndim() != 2 || w.shape()[1] != d {
        return Err(Error::invalid(format!("w has shape {:?}, expected [N, {d}]", w.shape())));
    }
    let mut out = w.clone();
    for row in out.data_mut().chunks_mut(d) {
        for (v, m) in row.iter_mut().zip(w_mean.data()) {
            *v = m + psi * (*v - m);
        }
    }
    Ok(out)
}
