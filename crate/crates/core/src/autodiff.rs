//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value and whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse insertion order (which is a topological order,
//! since a node can only reference nodes created before it) and returns the
//! gradient of a scalar loss with respect to every node that requires one.
//!
//! Only the operations used by the five network variants are provided:
//! dense, 2-D cross-correlation, max pooling, ReLU, softmax/cross-entropy,
//! the Gaussian reparameterization and log-density ratio, the pairwise
//! consistency penalty, and a handful of elementwise helpers.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    batch: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kernel: usize,
    padding: usize,
    stride: usize,
    out_height: usize,
    out_width: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
        batch: usize,
        n_in: usize,
        n_out: usize,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Softmax {
        input: Var,
        classes: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Reparam {
        mu: Var,
        rho: Var,
        eps: Vec<f64>,
    },
    GaussLogRatio {
        theta: Var,
        mu: Var,
        rho: Var,
    },
    Consistency {
        probs: Var,
        weights: Vec<f64>,
        batch: usize,
        classes: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered record of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Identifier of the tape these gradients came from.
    pub fn tape_id(&self) -> u64 {
        self.tape_id
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` into `target.grad`.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .get(var)
            .ok_or_else(|| Error::State(format!("no gradient recorded for node {}", var.0)))?;
        target.accumulate_grad(g)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a·b + beta·c` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, p) = (g.kernel, g.patch());
    let mut cols = vec![0.0; g.rows() * p];
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (b * g.out_height + oy) * g.out_width + ox;
                let dst = &mut cols[row * p..(row + 1) * p];
                for ci in 0..g.in_channels {
                    let plane = &input[(b * g.in_channels + ci) * g.height * g.width..];
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dst[(ci * k + ky) * k + kx] =
                                plane[iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (k, p) = (g.kernel, g.patch());
    for b in 0..g.batch {
        for oy in 0..g.out_height {
            for ox in 0..g.out_width {
                let row = (b * g.out_height + oy) * g.out_width + ox;
                let src = &cols[row * p..(row + 1) * p];
                for ci in 0..g.in_channels {
                    let base = (b * g.in_channels + ci) * g.height * g.width;
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            out[base + iy as usize * g.width + ix as usize] +=
                                src[(ci * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that never records gradient information; used for evaluation.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    /// Process-unique identifier, used to check that a [`Var`] belongs to this tape.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Result<Var> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; start a new pass".into(),
            ));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: requires_grad && self.grad_enabled,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf; it requires a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records `t` as a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::dim("scalar_value", self.shape(v), &[])),
        }
    }

    /// `out[b,j] = Σ_i input[b,i]·weight[i,j] + bias[j]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (batch, n_in) = match xs {
            [b, n] => (*b, *n),
            _ => return Err(Error::dim("dense input", xs, ws)),
        };
        let n_out = match ws {
            [i, o] if *i == n_in => *o,
            _ => return Err(Error::dim("dense", xs, ws)),
        };
        if bs != [n_out] {
            return Err(Error::dim("dense bias", ws, bs));
        }
        let mut out = vec![0.0; batch * n_out];
        for row in out.chunks_exact_mut(n_out) {
            row.copy_from_slice(self.value(bias));
        }
        gemm(
            batch,
            n_in,
            n_out,
            self.value(input),
            (n_in, 1),
            self.value(weight),
            (n_out, 1),
            1.0,
            &mut out,
            (n_out, 1),
        );
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            vec![batch, n_out],
            out,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n_in,
                n_out,
            },
        )
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `input` is `[B, C_in, H, W]`, `kernel` is `[C_out, C_in, k, k]` with odd `k`,
    /// `bias` is `[C_out]`. Output is `[B, C_out, H', W']` with
    /// `H' = (H + 2·padding − k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: usize,
        stride: usize,
    ) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(input), self.shape(kernel), self.shape(bias));
        let [batch, in_channels, height, width] = *xs else {
            return Err(Error::dim("conv2d input", xs, ks));
        };
        let [out_channels, kc, kh, kw] = *ks else {
            return Err(Error::dim("conv2d kernel", xs, ks));
        };
        if kc != in_channels || kh != kw {
            return Err(Error::dim("conv2d", xs, ks));
        }
        if kh % 2 == 0 {
            return Err(invalid!("conv2d kernel size must be odd, got {kh}"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        if height + 2 * padding < kh || width + 2 * padding < kh {
            return Err(Error::dim("conv2d kernel exceeds padded input", xs, ks));
        }
        if bs != [out_channels] {
            return Err(Error::dim("conv2d bias", ks, bs));
        }
        let geom = ConvGeom {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel: kh,
            padding,
            stride,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kh) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (rows, patch) = (geom.rows(), geom.patch());
        let mut mat = vec![0.0; rows * out_channels];
        gemm(
            rows,
            patch,
            out_channels,
            &cols,
            (patch, 1),
            self.value(kernel),
            (1, patch),
            0.0,
            &mut mat,
            (out_channels, 1),
        );
        let hw = geom.out_height * geom.out_width;
        let bias_v = self.value(bias);
        let mut out = vec![0.0; batch * out_channels * hw];
        for b in 0..batch {
            for pos in 0..hw {
                let src = &mat[(b * hw + pos) * out_channels..][..out_channels];
                for (co, &v) in src.iter().enumerate() {
                    out[(b * out_channels + co) * hw + pos] = v + bias_v[co];
                }
            }
        }
        let keep_cols = self.grad_enabled && self.node(kernel).requires_grad;
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            vec![batch, out_channels, geom.out_height, geom.out_width],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols: if keep_cols { cols } else { Vec::new() },
            },
        )
    }

    /// Non-overlapping max pooling over `window × window` blocks.
    ///
    /// The gradient goes to the first maximal cell in row-major order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let xs = self.shape(input);
        let [b, c, h, w] = *xs else {
            return Err(Error::dim("maxpool2d", xs, &[window, window]));
        };
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::dim("maxpool2d", xs, &[window, window]));
        }
        let (oh, ow) = (h / window, w / window);
        let x = self.value(input);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(vec![b, c, oh, ow], out, rg, Op::MaxPool { input, argmax })
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, out, rg, Op::Relu { input })
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(input).len() {
            return Err(Error::dim("reshape", self.shape(input), &shape));
        }
        let out = self.value(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, out, rg, Op::Reshape { input })
    }

    /// Elementwise product with a constant array of the same length.
    pub fn mul_const(&mut self, input: Var, factor: &[f64]) -> Result<Var> {
        if factor.len() != self.value(input).len() {
            return Err(Error::dim("mul_const", self.shape(input), &[factor.len()]));
        }
        let out = self
            .value(input)
            .iter()
            .zip(factor)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(
            shape,
            out,
            rg,
            Op::MulConst {
                input,
                factor: factor.to_vec(),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, rg, Op::Mul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, rg, Op::Add { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let out = self.value(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input]);
        self.push(shape, out, rg, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).iter().sum();
        let rg = self.rg(&[input]);
        self.push(vec![], vec![s], rg, Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        if n == 0 {
            return Err(invalid!("mean of an empty tensor"));
        }
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise softmax of a `[B, C]` tensor, stabilized by max subtraction.
    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [_, classes] = shape[..] else {
            return Err(Error::dim("softmax", &shape, &[]));
        };
        let out = softmax_rows(self.value(logits), classes);
        let rg = self.rg(&[logits]);
        self.push(shape, out, rg, Op::Softmax { input: logits, classes })
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let [batch, classes] = shape[..] else {
            return Err(Error::dim("cross_entropy", &shape, &[labels.len()]));
        };
        if labels.len() != batch || batch == 0 {
            return Err(Error::dim("cross_entropy labels", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid!("label {bad} out of range for {classes} classes"));
        }
        let x = self.value(logits);
        let mut loss = 0.0;
        for (row, &y) in x.chunks_exact(classes).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= batch as f64;
        let probs = softmax_rows(x, classes);
        let rg = self.rg(&[logits]);
        self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `(mean cross-entropy, softmax probabilities)` of a `[B, C]` logit tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Var)> {
        let loss = self.cross_entropy(logits, labels)?;
        let probs = self.softmax(logits)?;
        Ok((loss, probs))
    }

    /// `θ = μ + ε ⊙ softplus(ρ)` with a fixed noise draw `ε`.
    pub fn reparameterize(&mut self, mu: Var, rho: Var, eps: Vec<f64>) -> Result<Var> {
        let shape = self.same_shape("reparameterize", mu, rho)?;
        if eps.len() != self.value(mu).len() {
            return Err(Error::dim("reparameterize noise", &shape, &[eps.len()]));
        }
        let out = self
            .value(mu)
            .iter()
            .zip(self.value(rho))
            .zip(&eps)
            .map(|((m, r), e)| m + e * softplus(*r))
            .collect();
        let rg = self.rg(&[mu, rho]);
        self.push(shape, out, rg, Op::Reparam { mu, rho, eps })
    }

    /// `Σ [log N(θ; μ, σ²) − log N(θ; 0, 1)]` with `σ = softplus(ρ)`.
    pub fn gauss_log_ratio(&mut self, theta: Var, mu: Var, rho: Var) -> Result<Var> {
        self.same_shape("gauss_log_ratio", theta, mu)?;
        self.same_shape("gauss_log_ratio", theta, rho)?;
        let total = self
            .value(theta)
            .iter()
            .zip(self.value(mu))
            .zip(self.value(rho))
            .map(|((&t, &m), &r)| {
                let s = softplus(r);
                let z = (t - m) / s;
                -s.ln() - 0.5 * z * z + 0.5 * t * t
            })
            .sum();
        let rg = self.rg(&[theta, mu, rho]);
        self.push(vec![], vec![total], rg, Op::GaussLogRatio { theta, mu, rho })
    }

    /// `Σ_{i≠j} w[i,j] · ‖p_i − p_j‖²` over the rows of a `[B, C]` tensor,
    /// for a constant `B × B` weight matrix.
    pub fn pairwise_penalty(&mut self, probs: Var, weights: Vec<f64>) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        let [batch, classes] = shape[..] else {
            return Err(Error::dim("pairwise_penalty", &shape, &[]));
        };
        if weights.len() != batch * batch {
            return Err(Error::dim("pairwise_penalty weights", &shape, &[weights.len()]));
        }
        let p = self.value(probs);
        let mut total = 0.0;
        for i in 0..batch {
            for j in 0..batch {
                if i == j {
                    continue;
                }
                let d2: f64 = p[i * classes..(i + 1) * classes]
                    .iter()
                    .zip(&p[j * classes..(j + 1) * classes])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                total += weights[i * batch + j] * d2;
            }
        }
        let rg = self.rg(&[probs]);
        self.push(
            vec![],
            vec![total],
            rg,
            Op::Consistency {
                probs,
                weights,
                batch,
                classes,
            },
        )
    }

    /// Back-propagates from the scalar `loss` and consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward called on a consumed tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward on non-scalar", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
            if let Op::Conv2d { cols, .. } = &mut node.op {
                *cols = Vec::new();
            }
        }
        self.consumed = true;
        Ok(Gradients {
            tape_id: self.id,
            grads,
        })
    }

    fn backward_node(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer of `v`, or None when `v` needs no gradient.
        fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Dense {
                input,
                weight,
                bias,
                batch,
                n_in,
                n_out,
            } => {
                let (b, n, m) = (*batch, *n_in, *n_out);
                if let Some(g) = slot(nodes, grads, *input) {
                    gemm(b, m, n, up, (m, 1), self.value(*weight), (1, m), 1.0, g, (n, 1));
                }
                if let Some(g) = slot(nodes, grads, *weight) {
                    gemm(n, b, m, self.value(*input), (1, n), up, (m, 1), 1.0, g, (m, 1));
                }
                if let Some(g) = slot(nodes, grads, *bias) {
                    for row in up.chunks_exact(m) {
                        g.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (co, hw) = (geom.out_channels, geom.out_height * geom.out_width);
                let (rows, patch) = (geom.rows(), geom.patch());
                let mut dmat = vec![0.0; rows * co];
                for b in 0..geom.batch {
                    for c in 0..co {
                        let src = &up[(b * co + c) * hw..][..hw];
                        for (pos, &v) in src.iter().enumerate() {
                            dmat[(b * hw + pos) * co + c] = v;
                        }
                    }
                }
                if let Some(g) = slot(nodes, grads, *kernel) {
                    gemm(co, rows, patch, &dmat, (1, co), cols, (patch, 1), 1.0, g, (patch, 1));
                }
                if let Some(g) = slot(nodes, grads, *bias) {
                    for row in dmat.chunks_exact(co) {
                        g.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
                if nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(
                        rows,
                        co,
                        patch,
                        &dmat,
                        (co, 1),
                        self.value(*kernel),
                        (patch, 1),
                        0.0,
                        &mut dcols,
                        (patch, 1),
                    );
                    if let Some(g) = slot(nodes, grads, *input) {
                        col2im_add(&dcols, geom, g);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(g) = slot(nodes, grads, *input) {
                    for (&src, &v) in argmax.iter().zip(up) {
                        g[src] += v;
                    }
                }
            }
            Op::Relu { input } => {
                let out = &nodes[idx].value;
                if let Some(g) = slot(nodes, grads, *input) {
                    for ((a, &u), &y) in g.iter_mut().zip(up).zip(out) {
                        if y > 0.0 {
                            *a += u;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(g) = slot(nodes, grads, *input) {
                    g.iter_mut().zip(up).for_each(|(a, v)| *a += v);
                }
            }
            Op::MulConst { input, factor } => {
                if let Some(g) = slot(nodes, grads, *input) {
                    for ((a, u), f) in g.iter_mut().zip(up).zip(factor) {
                        *a += u * f;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                if let Some(g) = slot(nodes, grads, *a) {
                    for ((acc, u), y) in g.iter_mut().zip(up).zip(&vb) {
                        *acc += u * y;
                    }
                }
                if let Some(g) = slot(nodes, grads, *b) {
                    for ((acc, u), x) in g.iter_mut().zip(up).zip(&va) {
                        *acc += u * x;
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(g) = slot(nodes, grads, v) {
                        g.iter_mut().zip(up).for_each(|(acc, u)| *acc += u);
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(g) = slot(nodes, grads, *input) {
                    g.iter_mut().zip(up).for_each(|(acc, u)| *acc += u * factor);
                }
            }
            Op::Sum { input } => {
                if let Some(g) = slot(nodes, grads, *input) {
                    g.iter_mut().for_each(|acc| *acc += up[0]);
                }
            }
            Op::Softmax { input, classes } => {
                let p = &nodes[idx].value;
                if let Some(g) = slot(nodes, grads, *input) {
                    for ((grow, urow), prow) in g
                        .chunks_exact_mut(*classes)
                        .zip(up.chunks_exact(*classes))
                        .zip(p.chunks_exact(*classes))
                    {
                        let dot: f64 = urow.iter().zip(prow).map(|(u, p)| u * p).sum();
                        for ((acc, u), p) in grow.iter_mut().zip(urow).zip(prow) {
                            *acc += p * (u - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if let Some(g) = slot(nodes, grads, *logits) {
                    let classes = probs.len() / labels.len();
                    let scale = up[0] / labels.len() as f64;
                    for (b, &y) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let target = if c == y { 1.0 } else { 0.0 };
                            g[b * classes + c] += scale * (probs[b * classes + c] - target);
                        }
                    }
                }
            }
            Op::Reparam { mu, rho, eps } => {
                if let Some(g) = slot(nodes, grads, *mu) {
                    g.iter_mut().zip(up).for_each(|(acc, u)| *acc += u);
                }
                let rho_v = self.value(*rho);
                if let Some(g) = slot(nodes, grads, *rho) {
                    for (((acc, u), e), r) in g.iter_mut().zip(up).zip(eps).zip(rho_v) {
                        *acc += u * e * sigmoid(*r);
                    }
                }
            }
            Op::GaussLogRatio { theta, mu, rho } => {
                let (t, m, r) = (self.value(*theta), self.value(*mu), self.value(*rho));
                let u = up[0];
                if let Some(g) = slot(nodes, grads, *theta) {
                    for (i, acc) in g.iter_mut().enumerate() {
                        let s = softplus(r[i]);
                        *acc += u * (-(t[i] - m[i]) / (s * s) + t[i]);
                    }
                }
                if let Some(g) = slot(nodes, grads, *mu) {
                    for (i, acc) in g.iter_mut().enumerate() {
                        let s = softplus(r[i]);
                        *acc += u * (t[i] - m[i]) / (s * s);
                    }
                }
                if let Some(g) = slot(nodes, grads, *rho) {
                    for (i, acc) in g.iter_mut().enumerate() {
                        let s = softplus(r[i]);
                        let d = t[i] - m[i];
                        *acc += u * (-1.0 / s + d * d / (s * s * s)) * sigmoid(r[i]);
                    }
                }
            }
            Op::Consistency {
                probs,
                weights,
                batch,
                classes,
            } => {
                let p = self.value(*probs);
                let (b, c) = (*batch, *classes);
                if let Some(g) = slot(nodes, grads, *probs) {
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let w = 2.0 * up[0] * (weights[i * b + j] + weights[j * b + i]);
                            for k in 0..c {
                                g[i * c + k] += w * (p[i * c + k] - p[j * c + k]);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_rows(x: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dense_identity_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1., 2.])).unwrap();
        let w = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let b = tape.constant(&t(&[2], &[0., 0.])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[1., 2.]);
    }

    #[test]
    fn dense_hand_product() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1., 1.])).unwrap();
        let w = tape.constant(&t(&[2, 2], &[2., 3., 4., 5.])).unwrap();
        let b = tape.constant(&t(&[2], &[1., 1.])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[7., 9.]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[0., 0.])).unwrap();
        let w = tape.constant(&t(&[2, 2], &[0.3, -7., 2.5, 11.])).unwrap();
        let b = tape.constant(&t(&[2], &[-1.5, 4.25])).unwrap();
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[-1.5, 4.25]);
    }

    #[test]
    fn dense_shape_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 3])).unwrap();
        let w = tape.constant(&Tensor::zeros([2, 2])).unwrap();
        let b = tape.constant(&Tensor::zeros([2])).unwrap();
        let err = tape.dense(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.constant(&Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let b = tape.constant(&Tensor::zeros([1])).unwrap();
        let y = tape.conv2d(x, k, b, 0, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv_center_delta_is_identity() {
        let data: Vec<f64> = (0..2 * 2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let input = t(&[2, 2, 5, 4], &data);
        let mut kernel = Tensor::zeros([2, 2, 3, 3]);
        kernel.data_mut()[4] = 1.0; // out 0 <- in 0 center
        kernel.data_mut()[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let mut tape = Tape::new();
        let x = tape.constant(&input).unwrap();
        let k = tape.constant(&kernel).unwrap();
        let b = tape.constant(&Tensor::zeros([2])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert_eq!(tape.shape(y), input.shape());
        assert!(close(tape.value(y), input.data(), 1e-15));
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 1, 4, 4])).unwrap();
        let k = tape.constant(&Tensor::full([2, 1, 3, 3], 0.7)).unwrap();
        let b = tape.constant(&t(&[2], &[0.25, -2.0])).unwrap();
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        let v = tape.value(y);
        assert!(v[..16].iter().all(|&a| a == 0.25));
        assert!(v[16..].iter().all(|&a| a == -2.0));
    }

    #[test]
    fn conv_output_size_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 1, 7, 7])).unwrap();
        let k = tape.constant(&Tensor::zeros([1, 1, 3, 3])).unwrap();
        let b = tape.constant(&Tensor::zeros([1])).unwrap();
        let y = tape.conv2d(x, k, b, 0, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        let small = tape.constant(&Tensor::zeros([1, 1, 2, 2])).unwrap();
        assert!(matches!(
            tape.conv2d(small, k, b, 0, 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn maxpool_values_and_routing() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[4.]);

        let mut tape = Tape::new();
        let x = tape
            .leaf(&t(&[1, 1, 2, 2], &[5., 1., 1., 1.]).requiring_grad())
            .unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn maxpool_ties_go_to_first() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(&Tensor::full([1, 1, 2, 2], 3.0).requiring_grad())
            .unwrap();
        let y = tape.maxpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[3.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 0., 0., 0.]);
    }

    #[test]
    fn maxpool_rejects_indivisible() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 1, 3, 4])).unwrap();
        assert!(matches!(tape.maxpool2d(x, 2), Err(Error::Dimension { .. })));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[-1., 0., 2.]).requiring_grad()).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0., 0., 2.]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0., 0., 1.]);
    }

    #[test]
    fn softmax_ce_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full([1, 10], 0.3)).unwrap();
        let (loss, p) = tape.softmax_cross_entropy(x, &[4]).unwrap();
        assert!(tape.value(p).iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert!((tape.scalar_value(loss).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 2], &[1000., 0.])).unwrap();
        let (loss, p) = tape.softmax_cross_entropy(x, &[0]).unwrap();
        let l = tape.scalar_value(loss).unwrap();
        assert!(l.is_finite() && l.abs() < 1e-12);
        assert!(tape.value(p).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_ce_hand_value() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[1, 3], &[1., 2., 3.])).unwrap();
        let (loss, _) = tape.softmax_cross_entropy(x, &[2]).unwrap();
        let e = |v: f64| v.exp();
        let expected = -(e(3.) / (e(1.) + e(2.) + e(3.))).ln();
        assert!((tape.scalar_value(loss).unwrap() - expected).abs() < 1e-14);
        assert!((expected - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros([1, 3])).unwrap();
        assert!(matches!(
            tape.cross_entropy(x, &[3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full([2, 3], 0.5).requiring_grad()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0).requiring_grad()).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0).requiring_grad()).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::State(_))));
        assert!(matches!(tape.relu(x), Err(Error::State(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::full([2], 1.0)).unwrap();
        let x = tape.leaf(&Tensor::full([2], 2.0).requiring_grad()).unwrap();
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn pairwise_penalty_hand_value() {
        let mut tape = Tape::new();
        let p = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        // gamma = 1, B = 2, squared input distance 0.25
        let w = 1.0 / (2.0 * 0.25);
        let c = tape.pairwise_penalty(p, vec![0.0, w, w, 0.0]).unwrap();
        assert!((tape.scalar_value(c).unwrap() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-800.0), 0.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
    }
}
