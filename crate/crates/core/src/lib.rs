//! Topological and Bayesian convolutional networks for 16×16 digit images,
//! with a small reverse-mode autodiff engine, calibration and uncertainty
//! metrics, and the data perturbations used in the experiments.

pub mod autodiff;
pub mod bayes;
pub mod calibration;
pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod topo;
pub mod uncertainty;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelSpec, Variant};
pub use tensor::Tensor;
