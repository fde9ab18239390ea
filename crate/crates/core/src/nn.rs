//! Trainable parameters and deterministic layers.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor plus its binding to the tape of the current pass.
///
/// A parameter is copied onto a tape at most once per pass ([`Param::bind`]
/// returns the same [`Var`] on repeated calls), so gradients from several
/// uses within one pass sum in a single leaf.
#[derive(Clone, Debug)]
pub struct Param {
    tensor: Tensor,
    bound: Option<(u64, Var)>,
}

impl Param {
    pub fn new(tensor: Tensor) -> Self {
        Param {
            tensor: tensor.requiring_grad(),
            bound: None,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn bind(&mut self, tape: &mut Tape) -> Result<Var> {
        match self.bound {
            Some((id, var)) if id == tape.id() => Ok(var),
            _ => {
                let var = tape.leaf(&self.tensor)?;
                self.bound = Some((tape.id(), var));
                Ok(var)
            }
        }
    }

    /// Adds this parameter's gradient from `grads` into the tensor's buffer.
    pub fn pull_grad(&mut self, grads: &Gradients) -> Result<()> {
        match self.bound {
            Some((id, var)) if id == grads.tape_id() => grads.accumulate_into(var, &mut self.tensor),
            _ => Err(Error::State(
                "parameter was not used in the pass that produced these gradients".into(),
            )),
        }
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` samples.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Param,
    pub bias: Param,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        DenseLayer {
            weight: Param::new(fan_in_uniform(&[n_in, n_out], n_in, rng)),
            bias: Param::new(fan_in_uniform(&[n_out], n_in, rng)),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        DenseLayer {
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, input: Var) -> Result<Var> {
        let w = self.weight.bind(tape)?;
        let b = self.bias.bind(tape)?;
        tape.dense(input, w, b)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Param,
    pub bias: Param,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel_size * kernel_size;
        ConvLayer {
            kernel: Param::new(fan_in_uniform(
                &[out_channels, in_channels, kernel_size, kernel_size],
                fan_in,
                rng,
            )),
            bias: Param::new(fan_in_uniform(&[out_channels], fan_in, rng)),
            padding,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, input: Var) -> Result<Var> {
        let k = self.kernel.bind(tape)?;
        let b = self.bias.bind(tape)?;
        tape.conv2d(input, k, b, self.padding, 1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.kernel, &mut self.bias]
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}
