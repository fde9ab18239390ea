//! Mean-field Gaussian variational layers.
//!
//! Every weight has its own Gaussian `q(θ) = N(μ, σ²)` with
//! `σ = ln(1 + e^ρ)`, and a standard normal prior. A forward pass draws
//! `ε ~ N(0, 1)` and uses `θ = μ + ε·σ`, so the loss is differentiable in
//! `μ` and `ρ` through that map.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{softplus, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, Param};
use crate::tensor::Tensor;

/// Initial `ρ`; `softplus(-3) ≈ 0.0486`.
pub const DEFAULT_RHO_INIT: f64 = -3.0;

#[derive(Clone, Debug)]
struct Draw {
    tape_id: u64,
    theta: Var,
    epsilon: Vec<f64>,
    theta_values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct VariationalParameter {
    pub mu: Param,
    pub rho: Param,
    last: Option<Draw>,
}

impl VariationalParameter {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::dim("variational parameter", mu.shape(), rho.shape()));
        }
        Ok(VariationalParameter {
            mu: Param::new(mu),
            rho: Param::new(rho),
            last: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.tensor().shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.tensor().data().iter().map(|&r| softplus(r)).collect()
    }

    pub fn last_epsilon(&self) -> Option<&[f64]> {
        self.last.as_ref().map(|d| d.epsilon.as_slice())
    }

    pub fn last_theta(&self) -> Option<&[f64]> {
        self.last.as_ref().map(|d| d.theta_values.as_slice())
    }

    /// Draws `θ = μ + ε ⊙ σ` with fresh `ε ~ N(0, I)` and records it.
    pub fn sample_theta<R: Rng + ?Sized>(&mut self, tape: &mut Tape, rng: &mut R) -> Result<Var> {
        let epsilon: Vec<f64> = (0..self.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with(tape, epsilon)
    }

    /// Same as [`sample_theta`](Self::sample_theta) with a caller-supplied `ε`.
    pub fn sample_with(&mut self, tape: &mut Tape, epsilon: Vec<f64>) -> Result<Var> {
        let mu = self.mu.bind(tape)?;
        let rho = self.rho.bind(tape)?;
        let theta = tape.reparameterize(mu, rho, epsilon.clone())?;
        self.last = Some(Draw {
            tape_id: tape.id(),
            theta,
            epsilon,
            theta_values: tape.value(theta).to_vec(),
        });
        Ok(theta)
    }

    /// `log q(θ) − log p(θ)` at the last recorded draw, on the same tape.
    pub fn log_ratio(&mut self, tape: &mut Tape) -> Result<Var> {
        let draw = match &self.last {
            Some(d) if d.tape_id == tape.id() => d.theta,
            Some(_) => {
                return Err(Error::State(
                    "last posterior draw was recorded on a different tape".into(),
                ))
            }
            None => {
                return Err(Error::State(
                    "log q - log p requested before any forward pass".into(),
                ))
            }
        };
        let mu = self.mu.bind(tape)?;
        let rho = self.rho.bind(tape)?;
        tape.gauss_log_ratio(draw, mu, rho)
    }

    /// `Σ ½(μ² + σ² − 1 − ln σ²)`, the exact KL divergence to `N(0, I)`.
    pub fn kl_closed_form(&self) -> f64 {
        self.mu
            .tensor()
            .data()
            .iter()
            .zip(self.sigma())
            .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
            .sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.mu, &mut self.rho]
    }

    pub fn pull_grads(&mut self, grads: &Gradients) -> Result<()> {
        self.mu.pull_grad(grads)?;
        self.rho.pull_grad(grads)
    }
}

#[derive(Clone, Debug)]
pub struct BayesianDenseLayer {
    pub weight: VariationalParameter,
    pub bias: VariationalParameter,
}

impl BayesianDenseLayer {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let weight = VariationalParameter::new(
            fan_in_uniform(&[n_in, n_out], n_in, rng),
            Tensor::full([n_in, n_out], DEFAULT_RHO_INIT),
        )
        .expect("shapes match");
        let bias = VariationalParameter::new(
            fan_in_uniform(&[n_out], n_in, rng),
            Tensor::full([n_out], DEFAULT_RHO_INIT),
        )
        .expect("shapes match");
        BayesianDenseLayer { weight, bias }
    }

    pub fn from_parts(weight: VariationalParameter, bias: VariationalParameter) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, o], [b]) if o == b => Ok(BayesianDenseLayer { weight, bias }),
            (w, b) => Err(Error::dim("bayesian dense", w, b)),
        }
    }

    /// Dense forward with freshly sampled weights and bias.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape, input: Var, rng: &mut R) -> Result<Var> {
        let (n_in, n_out) = (self.weight.shape()[0], self.weight.shape()[1]);
        match tape.shape(input) {
            [_, n] if *n == n_in => {}
            s => return Err(Error::dim("bayesian dense", s, &[n_in, n_out])),
        }
        let w = self.weight.sample_theta(tape, rng)?;
        let b = self.bias.sample_theta(tape, rng)?;
        tape.dense(input, w, b)
    }

    pub fn log_ratio(&mut self, tape: &mut Tape) -> Result<Var> {
        let w = self.weight.log_ratio(tape)?;
        let b = self.bias.log_ratio(tape)?;
        tape.add(w, b)
    }

    pub fn kl_closed_form(&self) -> f64 {
        self.weight.kl_closed_form() + self.bias.kl_closed_form()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.weight.params_mut();
        p.extend(self.bias.params_mut());
        p
    }

    pub fn num_params(&self) -> usize {
        2 * (self.weight.len() + self.bias.len())
    }
}

/// Sum of `log q(θ) − log p(θ)` over every layer's last draw on `tape`.
pub fn log_q_minus_log_p(tape: &mut Tape, layers: &mut [&mut BayesianDenseLayer]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for layer in layers.iter_mut() {
        let term = layer.log_ratio(tape)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => tape.constant(&Tensor::scalar(0.0)),
    }
}
