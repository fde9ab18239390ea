#![allow(dead_code)]

use std::path::PathBuf;

use btcnn::calibration::CalibrationReport;
use btcnn::{Result, Tape, Tensor, Var};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/usps")
}

pub fn uniform_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random probability rows `[n, c]`.
pub fn random_probs<R: Rng>(n: usize, c: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        // occasional sharp rows so the top bins get used too
        let sharp = rng.random_range(0.0..8.0);
        let logits: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0) * sharp).collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// Elementwise relative error with a small floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares the analytic gradient of `f` at `inputs` with central finite
/// differences; returns the largest elementwise relative error.
///
/// `f` receives fresh leaves for every input and must return a scalar.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().requiring_grad()).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();

    let eval = |vals: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = vals.iter().map(|x| t.leaf(x).unwrap()).collect();
        let o = f(&mut t, &v).unwrap();
        t.scalar_value(o).unwrap()
    };

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Reduces a tensor-valued op to a scalar through a fixed random projection.
pub fn project(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var> {
    let m = tape.mul_const(v, &weights[..tape.value(v).len()])?;
    tape.sum(m)
}

/// ECE/MCE straight from the definition: for each bin, scan every prediction.
pub fn brute_force_calibration(probs: &[f64], c: usize, labels: &[usize], bins: usize) -> (Vec<usize>, f64, f64) {
    let n = labels.len();
    let mut counts = Vec::new();
    let mut ece = 0.0;
    let mut mce = 0.0f64;
    for m in 1..=bins {
        let lo = (m - 1) as f64 / bins as f64;
        let hi = m as f64 / bins as f64;
        let mut count = 0usize;
        let mut correct = 0usize;
        let mut conf = 0.0;
        for i in 0..n {
            let row = &probs[i * c..(i + 1) * c];
            let mut pred = 0;
            for j in 1..c {
                if row[j] > row[pred] {
                    pred = j;
                }
            }
            let p = row[pred];
            if p > lo && p <= hi {
                count += 1;
                conf += p;
                if pred == labels[i] {
                    correct += 1;
                }
            }
        }
        counts.push(count);
        if count > 0 {
            let gap = (correct as f64 / count as f64 - conf / count as f64).abs();
            ece += count as f64 / n as f64 * gap;
            mce = mce.max(gap);
        }
    }
    (counts, ece, mce)
}

pub fn matches_brute_force(r: &CalibrationReport, probs: &[f64], c: usize, labels: &[usize], bins: usize) -> bool {
    let (counts, ece, mce) = brute_force_calibration(probs, c, labels, bins);
    let rc: Vec<usize> = r.bins.iter().map(|b| b.count).collect();
    rc == counts && r.ece == ece && r.mce == mce
}

/// Finite-difference check of the full minibatch loss of a small network
/// with every random draw pinned by `seed`. Checks up to `per_param`
/// random entries of each parameter tensor.
pub fn composed_loss_check(variant: btcnn::Variant, seed: u64, per_param: usize) -> f64 {
    use btcnn::model::{build_model, ModelSpec};
    use btcnn::objective::{minibatch_loss, LossConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = ModelSpec::for_variant(variant);
    spec.conv1_channels = 4;
    spec.conv2_channels = 6;
    spec.hidden = 5;
    spec.image_size = 8;
    spec.classes = 10;
    if variant == btcnn::Variant::BtcnnCc {
        spec.gamma = 0.3;
    }
    let mut model = build_model(&spec, &mut rng).unwrap();
    // widen σ well beyond the init value so ρ gradients are sizeable
    for p in model.params_mut() {
        for v in p.tensor_mut().data_mut() {
            if *v == btcnn::bayes::DEFAULT_RHO_INIT {
                *v = rng.random_range(-2.0..0.0);
            }
        }
    }
    model.enforce_constraints().unwrap();
    let batch = 3;
    let images = uniform_tensor(&[batch, 1, 8, 8], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..10)).collect();
    let cfg = LossConfig { mc_samples: 2, gamma: spec.gamma, kl_scale: 0.01, pair_epsilon: 1e-8 };
    let draw_seed = rng.random::<u64>();

    let loss_of = |m: &mut btcnn::Model, tape: &mut Tape| {
        let mut r = ChaCha8Rng::seed_from_u64(draw_seed);
        minibatch_loss(m, tape, &images, &labels, &cfg, &mut r).unwrap()
    };

    let mut analytic_model = model.clone();
    let mut tape = Tape::new();
    let loss = loss_of(&mut analytic_model, &mut tape);
    let grads = tape.backward(loss).unwrap();
    analytic_model.pull_grads(&grads).unwrap();
    let analytic: Vec<Vec<f64>> = analytic_model
        .params_mut()
        .iter()
        .map(|p| p.tensor().grad().unwrap().to_vec())
        .collect();

    let eval = |m: &mut btcnn::Model| {
        let mut t = Tape::inference();
        let l = loss_of(m, &mut t);
        t.scalar_value(l).unwrap()
    };
    let mut worst = 0.0f64;
    let n_params = analytic.len();
    for k in 0..n_params {
        let len = analytic[k].len();
        for _ in 0..per_param.min(len) {
            let i = rng.random_range(0..len);
            let mut plus = model.clone();
            plus.params_mut()[k].tensor_mut().data_mut()[i] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[k].tensor_mut().data_mut()[i] -= FD_STEP;
            let numeric = (eval(&mut plus) - eval(&mut minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

fn rng_for(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn proj<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub type OpCheck = fn(u64) -> f64;

/// One randomized finite-difference check per differentiable tape op.
pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("dense", |s| {
            let mut r = rng_for(s);
            let (b, n, m) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..5));
            let ins = [
                uniform_tensor(&[b, n], -1.0, 1.0, &mut r),
                uniform_tensor(&[n, m], -1.0, 1.0, &mut r),
                uniform_tensor(&[m], -1.0, 1.0, &mut r),
            ];
            let w = proj(b * m, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                project(t, y, &w)
            })
        }),
        ("conv2d", |s| {
            let mut r = rng_for(s);
            let (ci, co) = (r.random_range(1..3), r.random_range(1..3));
            let pad = r.random_range(0..2);
            let stride = r.random_range(1..3);
            let ins = [
                uniform_tensor(&[2, ci, 5, 5], -1.0, 1.0, &mut r),
                uniform_tensor(&[co, ci, 3, 3], -1.0, 1.0, &mut r),
                uniform_tensor(&[co], -1.0, 1.0, &mut r),
            ];
            let w = proj(2 * co * 25, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], pad, stride)?;
                project(t, y, &w)
            })
        }),
        ("maxpool2d", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[2, 2, 4, 4], -1.0, 1.0, &mut r)];
            let w = proj(16, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.maxpool2d(v[0], 2)?;
                project(t, y, &w)
            })
        }),
        ("relu", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[3, 5], -1.0, 1.0, &mut r)];
            let w = proj(15, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, &w)
            })
        }),
        ("reshape", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[2, 3, 2], -1.0, 1.0, &mut r)];
            let w = proj(12, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.reshape(v[0], [4, 3])?;
                project(t, y, &w)
            })
        }),
        ("mul_const", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[6], -1.0, 1.0, &mut r)];
            let f = proj(6, &mut r);
            let w = proj(6, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.mul_const(v[0], &f)?;
                project(t, y, &w)
            })
        }),
        ("mul", |s| {
            let mut r = rng_for(s);
            let ins = [
                uniform_tensor(&[2, 3], -1.0, 1.0, &mut r),
                uniform_tensor(&[2, 3], -1.0, 1.0, &mut r),
            ];
            let w = proj(6, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y, &w)
            })
        }),
        ("add_scale_mean", |s| {
            let mut r = rng_for(s);
            let ins = [
                uniform_tensor(&[4], -1.0, 1.0, &mut r),
                uniform_tensor(&[4], -1.0, 1.0, &mut r),
            ];
            let k = r.random_range(-3.0..3.0);
            grad_check(&ins, |t, v| {
                let y = t.add(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                let z = t.scale(y2, k)?;
                t.mean(z)
            })
        }),
        ("softmax", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[3, 4], -3.0, 3.0, &mut r)];
            let w = proj(12, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.softmax(v[0])?;
                project(t, y, &w)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[3, 5], -3.0, 3.0, &mut r)];
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..5)).collect();
            grad_check(&ins, |t, v| t.cross_entropy(v[0], &labels))
        }),
        ("softmax_cross_entropy", |s| {
            let mut r = rng_for(s);
            let ins = [uniform_tensor(&[3, 5], -3.0, 3.0, &mut r)];
            let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..5)).collect();
            let w = proj(15, &mut r);
            grad_check(&ins, |t, v| {
                let (l, p) = t.softmax_cross_entropy(v[0], &labels)?;
                let q = project(t, p, &w)?;
                t.add(l, q)
            })
        }),
        ("reparameterize", |s| {
            let mut r = rng_for(s);
            let ins = [
                uniform_tensor(&[5], -1.0, 1.0, &mut r),
                uniform_tensor(&[5], -3.0, 1.0, &mut r),
            ];
            let eps = proj(5, &mut r);
            let w = proj(5, &mut r);
            grad_check(&ins, |t, v| {
                let y = t.reparameterize(v[0], v[1], eps.clone())?;
                project(t, y, &w)
            })
        }),
        ("gauss_log_ratio", |s| {
            let mut r = rng_for(s);
            let ins = [
                uniform_tensor(&[5], -1.0, 1.0, &mut r),
                uniform_tensor(&[5], -1.0, 1.0, &mut r),
                uniform_tensor(&[5], -2.0, 1.0, &mut r),
            ];
            grad_check(&ins, |t, v| t.gauss_log_ratio(v[0], v[1], v[2]))
        }),
        ("log_ratio_through_sample", |s| {
            let mut r = rng_for(s);
            let ins = [
                uniform_tensor(&[5], -1.0, 1.0, &mut r),
                uniform_tensor(&[5], -2.0, 1.0, &mut r),
            ];
            let eps = proj(5, &mut r);
            grad_check(&ins, |t, v| {
                let th = t.reparameterize(v[0], v[1], eps.clone())?;
                t.gauss_log_ratio(th, v[0], v[1])
            })
        }),
        ("pairwise_penalty", |s| {
            let mut r = rng_for(s);
            let b = r.random_range(2..5);
            let ins = [uniform_tensor(&[b, 3], 0.0, 1.0, &mut r)];
            let w: Vec<f64> = (0..b * b).map(|_| r.random_range(0.0..2.0)).collect();
            grad_check(&ins, |t, v| t.pairwise_penalty(v[0], w.clone()))
        }),
        ("consistency_term", |s| {
            let mut r = rng_for(s);
            let b = r.random_range(2..5);
            let ins = [uniform_tensor(&[b, 4], -2.0, 2.0, &mut r)];
            let x = uniform_tensor(&[b, 1, 3, 3], 0.0, 1.0, &mut r);
            let gamma = r.random_range(0.1..2.0);
            grad_check(&ins, |t, v| {
                let p = t.softmax(v[0])?;
                btcnn::objective::consistency_term(t, p, &x, gamma, 1e-8)
            })
        }),
    ]
}
