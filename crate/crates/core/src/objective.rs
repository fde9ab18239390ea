//! Minibatch training loss: Monte Carlo average of KL part, NLL and
//! consistency penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_PAIR_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Parameter draws per minibatch.
    pub mc_samples: usize,
    pub gamma: f64,
    /// Weight of `log q − log p` per minibatch.
    pub kl_scale: f64,
    pub pair_epsilon: f64,
}

impl LossConfig {
    pub fn new(mc_samples: usize, gamma: f64, kl_scale: f64) -> Result<Self> {
        let cfg = LossConfig {
            mc_samples,
            gamma,
            kl_scale,
            pair_epsilon: DEFAULT_PAIR_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(invalid!("at least one Monte Carlo sample is required"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if !(self.kl_scale > 0.0 && self.kl_scale.is_finite()) {
            return Err(invalid!("kl_scale must be positive, got {}", self.kl_scale));
        }
        if !(self.pair_epsilon >= 0.0) {
            return Err(invalid!("pair_epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Pair weights `γ / (B (‖x_i − x_j‖² + ε))` for `i ≠ j`, row-major `[B, B]`.
pub fn pair_weights(inputs: &Tensor, gamma: f64, pair_epsilon: f64) -> Result<Vec<f64>> {
    let b = *inputs.shape().first().ok_or_else(|| invalid!("inputs need a batch axis"))?;
    if b == 0 {
        return Err(invalid!("empty batch"));
    }
    let d = inputs.len() / b;
    let x = inputs.data();
    let mut w = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let dist: f64 = x[i * d..(i + 1) * d]
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, c)| (a - c) * (a - c))
                .sum();
            let v = gamma / (b as f64 * (dist + pair_epsilon));
            w[i * b + j] = v;
            w[j * b + i] = v;
        }
    }
    Ok(w)
}

/// `(1/B) Σ_{i≠j} γ ‖p_i − p_j‖² / (‖x_i − x_j‖² + ε)` over the batch.
pub fn consistency_term(
    tape: &mut Tape,
    probs: Var,
    inputs: &Tensor,
    gamma: f64,
    pair_epsilon: f64,
) -> Result<Var> {
    let b = tape.shape(probs)[0];
    if inputs.shape().first() != Some(&b) {
        return Err(Error::dim("consistency_term", tape.shape(probs), inputs.shape()));
    }
    if gamma == 0.0 {
        return tape.constant(&Tensor::scalar(0.0));
    }
    let w = pair_weights(inputs, gamma, pair_epsilon)?;
    tape.pairwise_penalty(probs, w)
}

/// Minibatch loss on `tape`:
/// `(1/T) Σ_t [kl_scale·(log q − log p)(θ_t) + NLL(θ_t) + consistency(θ_t)]`.
///
/// The convolutional trunk is deterministic, so it is evaluated once and
/// shared by all `T` draws of the dense head. Deterministic models use a
/// single pass since every draw would be identical.
pub fn minibatch_loss<R: Rng + ?Sized>(
    model: &mut Model,
    tape: &mut Tape,
    images: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<Var> {
    cfg.validate()?;
    let b = images.shape().first().copied().unwrap_or(0);
    if b == 0 || labels.is_empty() {
        return Err(invalid!("minibatch is empty"));
    }
    if labels.len() != b {
        return Err(Error::dim("minibatch labels", &[labels.len()], images.shape()));
    }
    let x = tape.constant(images)?;
    let features = model.trunk(tape, x)?;
    let draws = if model.is_bayesian() { cfg.mc_samples } else { 1 };
    let weights = if cfg.gamma > 0.0 {
        Some(pair_weights(images, cfg.gamma, cfg.pair_epsilon)?)
    } else {
        None
    };

    let mut total: Option<Var> = None;
    for _ in 0..draws {
        let logits = model.head(tape, features, rng)?;
        let (nll, probs) = tape.softmax_cross_entropy(logits, labels)?;
        let mut term = nll;
        if let Some(ratio) = model.log_ratio(tape)? {
            let kl = tape.scale(ratio, cfg.kl_scale)?;
            term = tape.add(kl, term)?;
        }
        if let Some(w) = &weights {
            let cc = tape.pairwise_penalty(probs, w.clone())?;
            term = tape.add(term, cc)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("at least one draw");
    if draws == 1 {
        Ok(total)
    } else {
        tape.scale(total, 1.0 / draws as f64)
    }
}
