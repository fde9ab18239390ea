//! Monte Carlo ensembles and the total / aleatoric / epistemic split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const DEFAULT_EVAL_SAMPLES: usize = 30;
const FEATURE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEnsemble {
    members: usize,
    samples: usize,
    classes: usize,
    /// `[S, N, C]`, row-major.
    member_probs: Vec<f64>,
    /// `[N, C]`.
    mean_probs: Vec<f64>,
}

impl PredictionEnsemble {
    /// Wraps member predictions `[S, N, C]` and computes their average.
    pub fn new(member_probs: Vec<f64>, members: usize, samples: usize, classes: usize) -> Result<Self> {
        if members == 0 || classes == 0 {
            return Err(invalid!("ensemble needs at least one member and one class"));
        }
        if member_probs.len() != members * samples * classes {
            return Err(invalid!(
                "expected {members}x{samples}x{classes} probabilities, got {}",
                member_probs.len()
            ));
        }
        for (i, row) in member_probs.chunks_exact(classes).enumerate() {
            let s: f64 = row.iter().sum();
            if !((s - 1.0).abs() <= 1e-6) || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(invalid!(
                    "member {} row {} is not a probability distribution",
                    i / samples.max(1),
                    i % samples.max(1)
                ));
            }
        }
        let mean_probs = offset_mean(&member_probs, members, samples * classes);
        Ok(PredictionEnsemble {
            members,
            samples,
            classes,
            member_probs,
            mean_probs,
        })
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn member_probs(&self) -> &[f64] {
        &self.member_probs
    }

    /// Predictions of member `s`, `[N, C]`.
    pub fn member(&self, s: usize) -> &[f64] {
        let len = self.samples * self.classes;
        &self.member_probs[s * len..(s + 1) * len]
    }

    pub fn mean_probs(&self) -> &[f64] {
        &self.mean_probs
    }

    pub fn mean_row(&self, n: usize) -> &[f64] {
        &self.mean_probs[n * self.classes..(n + 1) * self.classes]
    }
}

/// Average of `members` equally long blocks, computed as
/// `x_0 + Σ (x_s − x_0)/S` so identical members reproduce `x_0` exactly.
fn offset_mean(data: &[f64], members: usize, len: usize) -> Vec<f64> {
    let first = &data[..len];
    let mut out = first.to_vec();
    let s = members as f64;
    for block in data.chunks_exact(len).skip(1) {
        for ((o, &x), &x0) in out.iter_mut().zip(block).zip(first) {
            *o += (x - x0) / s;
        }
    }
    out
}

/// Shannon entropy in bits with `0·log 0 = 0`.
pub fn entropy_bits(p: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &v in p {
        if !(v >= 0.0) {
            return Err(invalid!("negative or NaN probability {v}"));
        }
        if v > 0.0 {
            h -= v * v.log2();
        }
    }
    Ok(h.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub total: Vec<f64>,
    pub aleatoric: Vec<f64>,
    pub epistemic: Vec<f64>,
}

/// Per-sample `H(p̂)`, mean member entropy, and their difference.
pub fn decompose_uncertainty(ens: &PredictionEnsemble) -> UncertaintyReport {
    let (s, n, c) = (ens.members, ens.samples, ens.classes);
    let mut member_h = Vec::with_capacity(s * n);
    for row in ens.member_probs.chunks_exact(c) {
        member_h.push(entropy_bits(row).expect("validated on construction"));
    }
    let aleatoric = if n == 0 { Vec::new() } else { offset_mean(&member_h, s, n) };
    let total: Vec<f64> = ens
        .mean_probs
        .chunks_exact(c)
        .map(|row| entropy_bits(row).expect("mean of valid rows"))
        .collect();
    let epistemic = total.iter().zip(&aleatoric).map(|(t, a)| t - a).collect();
    UncertaintyReport {
        total,
        aleatoric,
        epistemic,
    }
}

/// `S` forward passes over `inputs` with independent posterior draws.
///
/// Only the dense head is stochastic, so the convolutional features are
/// computed once; each member then draws one parameter set that is shared
/// by every input. Deterministic models give `S` identical members.
pub fn predict_ensemble<R: Rng + ?Sized>(
    model: &mut Model,
    inputs: &Tensor,
    members: usize,
    rng: &mut R,
) -> Result<PredictionEnsemble> {
    if members == 0 {
        return Err(invalid!("ensemble size must be positive"));
    }
    let n = inputs.shape().first().copied().unwrap_or(0);
    let classes = model.spec().classes;
    let features = model.extract_features(inputs, FEATURE_CHUNK)?;
    let mut probs = Vec::with_capacity(members * n * classes);
    let single = !model.is_bayesian();
    for s in 0..members {
        if single && s > 0 {
            probs.extend_from_within(..n * classes);
            continue;
        }
        let mut tape = Tape::inference();
        let f = tape.constant(&features)?;
        let logits = model.head(&mut tape, f, rng)?;
        probs.extend(softmax_rows(tape.value(logits), classes));
    }
    PredictionEnsemble::new(probs, members, n, classes)
}
