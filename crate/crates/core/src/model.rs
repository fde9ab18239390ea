//! The five network variants.
//!
//! All variants share one pipeline:
//!
//! ```text
//! [B,1,16,16] → conv1(3×3, pad 1) → maxpool 2 → relu
//!             → conv2(3×3, pad 1) → maxpool 2 → relu
//!             → flatten → dense(hidden) → relu → dense(10) → softmax
//! ```
//!
//! and differ only in the layer kinds:
//!
//! | variant    | conv1          | conv2        | dense         |
//! |------------|----------------|--------------|---------------|
//! | `cnn`      | standard       | standard     | deterministic |
//! | `tcnn`     | circle filters | circle-one   | deterministic |
//! | `bnn`      | standard       | standard     | Bayesian      |
//! | `btcnn`    | circle filters | circle-one   | Bayesian      |
//! | `btcnn-cc` | circle filters | circle-one   | Bayesian, consistency penalty γ |

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::bayes::{log_q_minus_log_p, BayesianDenseLayer};
use crate::error::{invalid, Error, Result};
use crate::nn::{ConvLayer, DenseLayer, Param};
use crate::tensor::Tensor;
use crate::topo::{make_circle_filters, CircleFilterBank, CircleOneMask};

pub const DEFAULT_CONV1_CHANNELS: usize = 36;
pub const DEFAULT_CONV2_CHANNELS: usize = 64;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_COL_THRESHOLD: f64 = TAU / 3.0;
pub const DEFAULT_GAMMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Cnn,
    Tcnn,
    Bnn,
    Btcnn,
    BtcnnCc,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cnn,
        Variant::Tcnn,
        Variant::Bnn,
        Variant::Btcnn,
        Variant::BtcnnCc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::Tcnn => "tcnn",
            Variant::Bnn => "bnn",
            Variant::Btcnn => "btcnn",
            Variant::BtcnnCc => "btcnn-cc",
        }
    }

    pub fn is_topological(self) -> bool {
        matches!(self, Variant::Tcnn | Variant::Btcnn | Variant::BtcnnCc)
    }

    pub fn is_bayesian(self) -> bool {
        matches!(self, Variant::Bnn | Variant::Btcnn | Variant::BtcnnCc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Variant::Cnn),
            "tcnn" => Ok(Variant::Tcnn),
            "bnn" => Ok(Variant::Bnn),
            "btcnn" => Ok(Variant::Btcnn),
            "btcnn-cc" | "btcnn_cc" | "btcnncc" => Ok(Variant::BtcnnCc),
            other => Err(invalid!(
                "unknown model variant {other:?} (expected cnn, tcnn, bnn, btcnn, btcnn-cc)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Conv1Kind {
    Standard,
    CircleFilter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Conv2Kind {
    Standard,
    CircleOne { threshold: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenseKind {
    Deterministic,
    Bayesian,
}

/// Declarative description of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub conv1: Conv1Kind,
    pub conv1_channels: usize,
    pub conv2: Conv2Kind,
    pub conv2_channels: usize,
    pub dense: DenseKind,
    pub hidden: usize,
    pub kernel_size: usize,
    pub image_size: usize,
    pub classes: usize,
    pub gamma: f64,
}

impl ModelSpec {
    pub fn for_variant(variant: Variant) -> Self {
        let topo = variant.is_topological();
        ModelSpec {
            variant,
            conv1: if topo {
                Conv1Kind::CircleFilter
            } else {
                Conv1Kind::Standard
            },
            conv1_channels: DEFAULT_CONV1_CHANNELS,
            conv2: if topo {
                Conv2Kind::CircleOne {
                    threshold: DEFAULT_COL_THRESHOLD,
                }
            } else {
                Conv2Kind::Standard
            },
            conv2_channels: DEFAULT_CONV2_CHANNELS,
            dense: if variant.is_bayesian() {
                DenseKind::Bayesian
            } else {
                DenseKind::Deterministic
            },
            hidden: DEFAULT_HIDDEN,
            kernel_size: 3,
            image_size: 16,
            classes: 10,
            gamma: if variant == Variant::BtcnnCc {
                DEFAULT_GAMMA
            } else {
                0.0
            },
        }
    }

    /// Replaces the circle-one threshold (no effect on non-topological specs).
    pub fn with_col_threshold(mut self, threshold: f64) -> Self {
        if let Conv2Kind::CircleOne { .. } = self.conv2 {
            self.conv2 = Conv2Kind::CircleOne { threshold };
        }
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn flat_features(&self) -> usize {
        let side = self.image_size / 4;
        self.conv2_channels * side * side
    }

    pub fn validate(&self) -> Result<()> {
        let topo = self.variant.is_topological();
        let conv_ok = match (self.conv1, self.conv2) {
            (Conv1Kind::CircleFilter, Conv2Kind::CircleOne { .. }) => topo,
            (Conv1Kind::Standard, Conv2Kind::Standard) => !topo,
            _ => false,
        };
        if !conv_ok {
            return Err(invalid!(
                "{} requires {} convolutions, got conv1={:?}, conv2={:?}",
                self.variant,
                if topo { "circle-filter + circle-one" } else { "standard" },
                self.conv1,
                self.conv2
            ));
        }
        let dense_ok = (self.dense == DenseKind::Bayesian) == self.variant.is_bayesian();
        if !dense_ok {
            return Err(invalid!(
                "{} cannot use {:?} dense layers",
                self.variant,
                self.dense
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if self.gamma > 0.0 && self.variant != Variant::BtcnnCc {
            return Err(invalid!(
                "a consistency weight gamma > 0 is only valid for btcnn-cc (got {} with gamma {})",
                self.variant,
                self.gamma
            ));
        }
        if let Conv2Kind::CircleOne { threshold } = self.conv2 {
            if !(threshold > 0.0) {
                return Err(invalid!("circle-one threshold must be positive, got {threshold}"));
            }
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(invalid!(
                "image size must be a positive multiple of 4 (two 2x2 poolings), got {}",
                self.image_size
            ));
        }
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(invalid!("kernel size must be odd and >= 3, got {}", self.kernel_size));
        }
        if self.conv1_channels == 0 || self.conv2_channels == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(invalid!("layer widths must be positive and classes >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum FirstConv {
    Standard(ConvLayer),
    Circle(CircleFilterBank),
}

#[derive(Clone, Debug)]
enum SecondConv {
    Standard(ConvLayer),
    CircleOne { layer: ConvLayer, mask: CircleOneMask },
}

#[derive(Clone, Debug)]
enum DenseBlock {
    Deterministic(DenseLayer),
    Bayesian(BayesianDenseLayer),
}

impl DenseBlock {
    fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
        match self {
            DenseBlock::Deterministic(l) => l.forward(tape, x),
            DenseBlock::Bayesian(l) => l.forward(tape, x, rng),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            DenseBlock::Deterministic(l) => l.params_mut(),
            DenseBlock::Bayesian(l) => l.params_mut(),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            DenseBlock::Deterministic(l) => l.num_params(),
            DenseBlock::Bayesian(l) => l.num_params(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    conv1: FirstConv,
    conv2: SecondConv,
    fc1: DenseBlock,
    fc2: DenseBlock,
}

/// Builds and initializes a network; draws initial weights from `rng`.
pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
    spec.validate()?;
    let k = spec.kernel_size;
    let pad = k / 2;
    let conv1 = match spec.conv1 {
        Conv1Kind::Standard => FirstConv::Standard(ConvLayer::new(1, spec.conv1_channels, k, pad, rng)),
        Conv1Kind::CircleFilter => FirstConv::Circle(make_circle_filters(spec.conv1_channels, k)?),
    };
    let conv2 = match (spec.conv2, &conv1) {
        (Conv2Kind::Standard, _) => SecondConv::Standard(ConvLayer::new(
            spec.conv1_channels,
            spec.conv2_channels,
            k,
            pad,
            rng,
        )),
        (Conv2Kind::CircleOne { threshold }, first) => {
            let in_points = match first {
                FirstConv::Circle(bank) => bank.angles().to_vec(),
                FirstConv::Standard(_) => crate::topo::evenly_spaced_angles(spec.conv1_channels),
            };
            let mask = CircleOneMask::with_points(
                crate::topo::evenly_spaced_angles(spec.conv2_channels),
                in_points,
                threshold,
            )?;
            let mut layer = ConvLayer::new(spec.conv1_channels, spec.conv2_channels, k, pad, rng);
            mask.apply(layer.kernel.tensor_mut())?;
            SecondConv::CircleOne { layer, mask }
        }
    };
    let dense = |n_in: usize, n_out: usize, rng: &mut R| match spec.dense {
        DenseKind::Deterministic => DenseBlock::Deterministic(DenseLayer::new(n_in, n_out, rng)),
        DenseKind::Bayesian => DenseBlock::Bayesian(BayesianDenseLayer::new(n_in, n_out, rng)),
    };
    let fc1 = dense(spec.flat_features(), spec.hidden, rng);
    let fc2 = dense(spec.hidden, spec.classes, rng);
    Ok(Model {
        spec: spec.clone(),
        conv1,
        conv2,
        fc1,
        fc2,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn is_bayesian(&self) -> bool {
        matches!(self.fc1, DenseBlock::Bayesian(_))
    }

    pub fn circle_bank(&self) -> Option<&CircleFilterBank> {
        match &self.conv1 {
            FirstConv::Circle(bank) => Some(bank),
            FirstConv::Standard(_) => None,
        }
    }

    pub fn col_mask(&self) -> Option<&CircleOneMask> {
        match &self.conv2 {
            SecondConv::CircleOne { mask, .. } => Some(mask),
            SecondConv::Standard(_) => None,
        }
    }

    /// Second convolution's kernel, `[C_out, C_in, k, k]`.
    pub fn conv2_kernel(&self) -> &Tensor {
        match &self.conv2 {
            SecondConv::Standard(l) | SecondConv::CircleOne { layer: l, .. } => l.kernel.tensor(),
        }
    }

    /// Convolutional feature extractor; deterministic in every variant.
    pub fn trunk(&mut self, tape: &mut Tape, input: Var) -> Result<Var> {
        let s = &self.spec;
        match tape.shape(input) {
            [_, 1, h, w] if *h == s.image_size && *w == s.image_size => {}
            other => {
                return Err(Error::dim(
                    "model input",
                    other,
                    &[0, 1, s.image_size, s.image_size],
                ))
            }
        }
        let batch = tape.shape(input)[0];
        let h = match &mut self.conv1 {
            FirstConv::Standard(l) => l.forward(tape, input)?,
            FirstConv::Circle(bank) => bank.forward(tape, input)?,
        };
        let h = tape.maxpool2d(h, 2)?;
        let h = tape.relu(h)?;
        let h = match &mut self.conv2 {
            SecondConv::Standard(l) => l.forward(tape, h)?,
            SecondConv::CircleOne { layer, mask } => {
                let w = layer.kernel.bind(tape)?;
                let b = layer.bias.bind(tape)?;
                mask.forward(tape, w, b, h, layer.padding)?
            }
        };
        let h = tape.maxpool2d(h, 2)?;
        let h = tape.relu(h)?;
        tape.reshape(h, [batch, self.spec.flat_features()])
    }

    /// Dense classifier head; returns logits. Bayesian heads draw new weights.
    pub fn head<R: Rng + ?Sized>(&mut self, tape: &mut Tape, features: Var, rng: &mut R) -> Result<Var> {
        let h = self.fc1.forward(tape, features, rng)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, h, rng)
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape, input: Var, rng: &mut R) -> Result<Var> {
        let f = self.trunk(tape, input)?;
        self.head(tape, f, rng)
    }

    /// `log q(θ) − log p(θ)` summed over the Bayesian layers at their last draw;
    /// `None` for deterministic heads.
    pub fn log_ratio(&mut self, tape: &mut Tape) -> Result<Option<Var>> {
        match (&mut self.fc1, &mut self.fc2) {
            (DenseBlock::Bayesian(a), DenseBlock::Bayesian(b)) => {
                Ok(Some(log_q_minus_log_p(tape, &mut [a, b])?))
            }
            _ => Ok(None),
        }
    }

    /// Closed-form KL of the variational posterior to the prior.
    pub fn kl_closed_form(&self) -> Option<f64> {
        match (&self.fc1, &self.fc2) {
            (DenseBlock::Bayesian(a), DenseBlock::Bayesian(b)) => {
                Some(a.kl_closed_form() + b.kl_closed_form())
            }
            _ => None,
        }
    }

    /// Every trainable parameter, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        if let FirstConv::Standard(l) = &mut self.conv1 {
            out.extend(l.params_mut());
        }
        match &mut self.conv2 {
            SecondConv::Standard(l) | SecondConv::CircleOne { layer: l, .. } => {
                out.extend(l.params_mut())
            }
        }
        out.extend(self.fc1.params_mut());
        out.extend(self.fc2.params_mut());
        out
    }

    /// Copies of every trainable parameter, in [`params_mut`](Self::params_mut) order.
    pub fn parameter_values(&mut self) -> Vec<Vec<f64>> {
        self.params_mut().iter().map(|p| p.tensor().data().to_vec()).collect()
    }

    pub fn pull_grads(&mut self, grads: &Gradients) -> Result<()> {
        for p in self.params_mut() {
            p.pull_grad(grads)?;
        }
        Ok(())
    }

    /// Re-imposes structural constraints after a parameter update.
    pub fn enforce_constraints(&mut self) -> Result<()> {
        if let SecondConv::CircleOne { layer, mask } = &mut self.conv2 {
            mask.apply(layer.kernel.tensor_mut())?;
        }
        Ok(())
    }

    pub fn num_trainable_params(&self) -> usize {
        self.conv1_trainable_params() + self.conv2_trainable_params() + self.dense_trainable_params()
    }

    pub fn conv1_trainable_params(&self) -> usize {
        match &self.conv1 {
            FirstConv::Standard(l) => l.num_params(),
            FirstConv::Circle(_) => 0,
        }
    }

    pub fn conv2_trainable_params(&self) -> usize {
        match &self.conv2 {
            SecondConv::Standard(l) | SecondConv::CircleOne { layer: l, .. } => l.num_params(),
        }
    }

    pub fn dense_trainable_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }

    /// Inference-only forward pass producing class probabilities `[B, C]`.
    pub fn predict_probs<R: Rng + ?Sized>(&mut self, images: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(images)?;
        let logits = self.forward(&mut tape, x, rng)?;
        let p = tape.softmax(logits)?;
        Ok(tape.tensor(p))
    }

    /// Features from [`trunk`](Self::trunk) for a whole image set, in chunks.
    pub fn extract_features(&mut self, images: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let width = self.spec.flat_features();
        let mut data = Vec::with_capacity(n * width);
        let chunk = chunk.max(1);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let mut tape = Tape::inference();
            let x = tape.constant(&images.gather(&idx)?)?;
            let f = self.trunk(&mut tape, x)?;
            data.extend_from_slice(tape.value(f));
        }
        Tensor::new([n, width], data)
    }
}
