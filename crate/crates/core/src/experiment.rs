//! Training loop, evaluation and the experiment protocols.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::calibration::{accuracy, compute_calibration, CalibrationReport, DEFAULT_BINS};
use crate::data::{
    apply_class_blur, convex_probe, default_alphas, starve, BlurPolicy, Dataset, CLASSES,
};
use crate::error::{invalid, Error, Result};
use crate::model::{build_model, Model, ModelSpec, Variant};
use crate::objective::{minibatch_loss, LossConfig, DEFAULT_PAIR_EPSILON};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;
use crate::uncertainty::{decompose_uncertainty, predict_ensemble, PredictionEnsemble, DEFAULT_EVAL_SAMPLES};

/// How the per-minibatch KL weight is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum KlWeighting {
    /// `1 / batches per epoch`: the KL counts once per pass over the data.
    PerEpoch,
    /// `1 / training-set size`: matches the per-sample scale of the mean NLL.
    PerSample,
    Fixed(f64),
}

impl KlWeighting {
    pub fn scale(self, train_size: usize, batch_size: usize) -> f64 {
        match self {
            KlWeighting::PerEpoch => 1.0 / train_size.div_ceil(batch_size).max(1) as f64,
            KlWeighting::PerSample => 1.0 / train_size.max(1) as f64,
            KlWeighting::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub mc_train: usize,
    pub mc_eval: usize,
    pub kl_weighting: KlWeighting,
    pub pair_epsilon: f64,
    pub bins: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            model: ModelSpec::for_variant(variant),
            epochs: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam(),
            mc_train: 1,
            mc_eval: DEFAULT_EVAL_SAMPLES,
            kl_weighting: KlWeighting::PerEpoch,
            pair_epsilon: DEFAULT_PAIR_EPSILON,
            bins: DEFAULT_BINS,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if self.mc_train == 0 || self.mc_eval == 0 {
            return Err(invalid!("Monte Carlo sample counts must be positive"));
        }
        if self.bins == 0 {
            return Err(invalid!("bin count must be positive"));
        }
        if let KlWeighting::Fixed(v) = self.kl_weighting {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid!("fixed KL weight must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self, train_size: usize) -> Result<LossConfig> {
        let cfg = LossConfig {
            mc_samples: self.mc_train,
            gamma: self.model.gamma,
            kl_scale: self.kl_weighting.scale(train_size, self.batch_size),
            pair_epsilon: self.pair_epsilon,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the data for a run came from and how it was perturbed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataDescription {
    pub train_path: Option<String>,
    pub test_path: Option<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub pixel_range: String,
    pub subset_fraction: Option<f64>,
    pub blur_train: Option<BlurPolicy>,
    pub blur_test: Option<BlurPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub ece: f64,
    pub mce: f64,
    pub wall_time: f64,
}

impl EpochRow {
    fn same_values(&self, other: &EpochRow) -> bool {
        let bits = |r: &EpochRow| {
            [r.train_loss, r.test_loss, r.test_accuracy, r.ece, r.mce].map(f64::to_bits)
        };
        self.epoch == other.epoch && bits(self) == bits(other)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub data: DataDescription,
    pub rows: Vec<EpochRow>,
}

impl RunRecord {
    /// Bitwise comparison of every metric, ignoring wall-clock times.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
    }

    /// Row for `epoch` (1-based), or the last row if the run was shorter.
    pub fn row_at(&self, epoch: usize) -> Option<&EpochRow> {
        self.rows
            .iter()
            .find(|r| r.epoch == epoch)
            .or_else(|| self.rows.last())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_csv_rows(path, &self.rows)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(f), self)?;
        Ok(())
    }
}

pub fn write_csv_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(f));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub calibration: CalibrationReport,
    pub ensemble: PredictionEnsemble,
}

/// One model plus its optimizer and random stream.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    optimizer: OptimizerState,
    loss: LossConfig,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    /// Builds the model from `cfg.seed`; `train_size` fixes the KL weight.
    pub fn new(cfg: &TrainConfig, train_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = build_model(&cfg.model, &mut rng)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            optimizer: OptimizerState::new(cfg.learning_rate, cfg.optimizer)?,
            loss: cfg.loss_config(train_size)?,
            rng,
            epochs_done: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    /// One optimizer step on a minibatch; returns the loss before the update.
    pub fn step(&mut self, images: &Tensor, labels: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = minibatch_loss(&mut self.model, &mut tape, images, labels, &self.loss, &mut self.rng)?;
        let value = tape.scalar_value(loss)?;
        if !value.is_finite() {
            return Err(Error::State(format!("training loss became {value}")));
        }
        let grads = tape.backward(loss)?;
        self.model.pull_grads(&grads)?;
        let mut params: Vec<&mut Tensor> = self
            .model
            .params_mut()
            .into_iter()
            .map(|p| p.tensor_mut())
            .collect();
        self.optimizer.step(&mut params)?;
        self.model.enforce_constraints()?;
        Ok(value)
    }

    /// A shuffled pass over `train`; `on_step` sees the model after each update.
    /// Returns the sample-weighted mean training loss.
    pub fn train_epoch(&mut self, train: &Dataset, mut on_step: impl FnMut(&Model)) -> Result<f64> {
        if train.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let (x, y) = train.batch(chunk)?;
            total += self.step(&x, &y)? * chunk.len() as f64;
            on_step(&self.model);
        }
        self.epochs_done += 1;
        Ok(total / train.len() as f64)
    }

    /// Test loss, ensemble accuracy and calibration. Uses a random stream
    /// derived from the seed and `tag`, so evaluation never perturbs training.
    pub fn evaluate(&mut self, test: &Dataset, tag: u64) -> Result<Evaluation> {
        if test.is_empty() {
            return Err(invalid!("test set is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(tag + 1);
        let mut loss_sum = 0.0;
        let idx: Vec<usize> = (0..test.len()).collect();
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, y) = test.batch(chunk)?;
            let mut tape = Tape::inference();
            let l = minibatch_loss(&mut self.model, &mut tape, &x, &y, &self.loss, &mut rng)?;
            loss_sum += tape.scalar_value(l)? * chunk.len() as f64;
        }
        let ensemble = predict_ensemble(&mut self.model, test.images(), self.cfg.mc_eval, &mut rng)?;
        let classes = ensemble.classes();
        let accuracy = accuracy(ensemble.mean_probs(), classes, test.labels())?;
        let calibration = compute_calibration(ensemble.mean_probs(), classes, test.labels(), self.cfg.bins)?;
        Ok(Evaluation {
            loss: loss_sum / test.len() as f64,
            accuracy,
            calibration,
            ensemble,
        })
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
    /// Evaluation after the last epoch (absent when `epochs == 0`).
    pub last_eval: Option<Evaluation>,
}

/// Trains for `cfg.epochs`, evaluating on `test` after every epoch.
pub fn train(cfg: &TrainConfig, train: &Dataset, test: &Dataset, data: DataDescription) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, train.len())?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let train_loss = trainer.train_epoch(train, |_| {})?;
        let eval = trainer.evaluate(test, epoch as u64)?;
        let row = EpochRow {
            epoch,
            train_loss,
            test_loss: eval.loss,
            test_accuracy: eval.accuracy,
            ece: eval.calibration.ece,
            mce: eval.calibration.mce,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.4}, test loss {:.4}, acc {:.4}, ece {:.4}, mce {:.4} ({:.1}s)",
            cfg.model.variant,
            row.train_loss,
            row.test_loss,
            row.test_accuracy,
            row.ece,
            row.mce,
            row.wall_time
        );
        rows.push(row);
        last_eval = Some(eval);
    }
    Ok(TrainOutcome {
        model: trainer.into_model(),
        record: RunRecord {
            config: cfg.clone(),
            data,
            rows,
        },
        last_eval,
    })
}

/// Optional subsetting and blurring applied before training.
#[derive(Clone, Debug, Default)]
pub struct DataOptions {
    pub subset_fraction: Option<f64>,
    pub blur_train: Option<BlurPolicy>,
    pub blur_test: Option<BlurPolicy>,
}

const SUBSET_SALT: u64 = 0x5eed_0001;
const BLUR_TRAIN_SALT: u64 = 0x5eed_0002;
const BLUR_TEST_SALT: u64 = 0x5eed_0003;

/// Applies `opts` with seeds derived from `seed`.
pub fn prepare_data(
    train: &Dataset,
    test: &Dataset,
    opts: &DataOptions,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let mut tr = match opts.subset_fraction {
        Some(f) => starve(train, f, seed ^ SUBSET_SALT)?,
        None => train.clone(),
    };
    if let Some(p) = &opts.blur_train {
        tr = apply_class_blur(&tr, p, seed ^ BLUR_TRAIN_SALT)?;
    }
    let te = match &opts.blur_test {
        Some(p) => apply_class_blur(test, p, seed ^ BLUR_TEST_SALT)?,
        None => test.clone(),
    };
    Ok((tr, te))
}

pub const STARVATION_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
pub const STARVATION_REPORT_EPOCH: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarvationRow {
    pub variant: Variant,
    pub fraction: f64,
    pub repeat: usize,
    pub seed: u64,
    pub train_size: usize,
    pub report_epoch: usize,
    pub accuracy_at_report: f64,
    pub ece_at_report: f64,
    pub mce_at_report: f64,
    pub test_loss_at_report: f64,
    pub final_epoch: usize,
    pub final_accuracy: f64,
    pub final_ece: f64,
    pub final_mce: f64,
    pub final_test_loss: f64,
}

/// Trains every `(variant, fraction, repeat)` combination. Repeat `r` uses
/// seed `base.seed + r` for both the subset and the weights.
pub fn run_starvation(
    base: &TrainConfig,
    variants: &[Variant],
    fractions: &[f64],
    repeats: usize,
    train_ds: &Dataset,
    test_ds: &Dataset,
    mut on_run: impl FnMut(&StarvationRow, &RunRecord) -> Result<()>,
) -> Result<Vec<StarvationRow>> {
    if repeats == 0 || variants.is_empty() || fractions.is_empty() {
        return Err(invalid!("need at least one variant, fraction and repeat"));
    }
    if base.epochs == 0 {
        return Err(invalid!("starvation runs need at least one epoch"));
    }
    let mut out = Vec::new();
    for &variant in variants {
        for &fraction in fractions {
            for repeat in 0..repeats {
                let seed = base.seed.wrapping_add(repeat as u64);
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.model = respec(&base.model, variant);
                let opts = DataOptions {
                    subset_fraction: Some(fraction),
                    ..Default::default()
                };
                let (tr, te) = prepare_data(train_ds, test_ds, &opts, seed)?;
                let data = DataDescription {
                    train_size: tr.len(),
                    test_size: te.len(),
                    subset_fraction: Some(fraction),
                    ..Default::default()
                };
                let outcome = train(&cfg, &tr, &te, data)?;
                let report_epoch = STARVATION_REPORT_EPOCH.min(cfg.epochs);
                let at = outcome.record.row_at(report_epoch).expect("epochs > 0");
                let fin = outcome.record.rows.last().expect("epochs > 0");
                let row = StarvationRow {
                    variant,
                    fraction,
                    repeat,
                    seed,
                    train_size: tr.len(),
                    report_epoch,
                    accuracy_at_report: at.test_accuracy,
                    ece_at_report: at.ece,
                    mce_at_report: at.mce,
                    test_loss_at_report: at.test_loss,
                    final_epoch: fin.epoch,
                    final_accuracy: fin.test_accuracy,
                    final_ece: fin.ece,
                    final_mce: fin.mce,
                    final_test_loss: fin.test_loss,
                };
                on_run(&row, &outcome.record)?;
                out.push(row);
            }
        }
    }
    Ok(out)
}

/// Spec for `variant` keeping the widths and threshold of `base`.
pub fn respec(base: &ModelSpec, variant: Variant) -> ModelSpec {
    let mut spec = ModelSpec::for_variant(variant);
    spec.conv1_channels = base.conv1_channels;
    spec.conv2_channels = base.conv2_channels;
    spec.hidden = base.hidden;
    spec.kernel_size = base.kernel_size;
    spec.image_size = base.image_size;
    spec.classes = base.classes;
    if let crate::model::Conv2Kind::CircleOne { threshold } = base.conv2 {
        spec = spec.with_col_threshold(threshold);
    }
    if variant == Variant::BtcnnCc && base.variant == Variant::BtcnnCc {
        spec.gamma = base.gamma;
    }
    spec
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairSelection {
    All,
    One(usize, usize),
}

impl PairSelection {
    pub fn pairs(self) -> Result<Vec<(usize, usize)>> {
        match self {
            PairSelection::All => Ok((0..CLASSES)
                .flat_map(|a| ((a + 1)..CLASSES).map(move |b| (a, b)))
                .collect()),
            PairSelection::One(a, b) if a < b && b < CLASSES => Ok(vec![(a, b)]),
            PairSelection::One(a, b) => Err(invalid!(
                "probe pair must satisfy a < b < {CLASSES}, got ({a}, {b})"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub a: usize,
    pub b: usize,
    pub a_index: usize,
    pub b_index: usize,
    pub alpha_step: usize,
    pub alpha: f64,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeAverage {
    pub alpha_step: usize,
    pub alpha: f64,
    pub pairs: usize,
    pub total: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
    pub averages: Vec<ProbeAverage>,
}

impl ProbeTable {
    /// Mean epistemic uncertainty at the α closest to 0.5 (averaging ties)
    /// and at the two endpoints.
    pub fn midpoint_and_endpoint_epistemic(&self) -> (f64, f64) {
        let dist = |a: &ProbeAverage| (a.alpha - 0.5).abs();
        let best = self.averages.iter().map(dist).fold(f64::INFINITY, f64::min);
        let mid: Vec<f64> = self
            .averages
            .iter()
            .filter(|a| dist(a) - best < 1e-12)
            .map(|a| a.epistemic)
            .collect();
        let ends: Vec<f64> = self
            .averages
            .iter()
            .filter(|a| a.alpha == 0.0 || a.alpha == 1.0)
            .map(|a| a.epistemic)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (mean(&mid), mean(&ends))
    }
}

/// Sweeps convex combinations between the first test image of each class in
/// every selected pair and records the uncertainty split per α.
pub fn run_uq_probe(
    model: &mut Model,
    test_ds: &Dataset,
    pairs: PairSelection,
    members: usize,
    seed: u64,
) -> Result<ProbeTable> {
    let pairs = pairs.pairs()?;
    let alphas = default_alphas();
    let mut images = Vec::new();
    let mut meta = Vec::new();
    for &(a, b) in &pairs {
        let find = |c: usize| {
            test_ds
                .first_of_class(c)
                .ok_or_else(|| invalid!("class {c} does not occur in the test set"))
        };
        let (ia, ib) = (find(a)?, find(b)?);
        for (step, img) in convex_probe(test_ds.image(ia), test_ds.image(ib), &alphas)?
            .into_iter()
            .enumerate()
        {
            images.extend(img);
            meta.push((a, b, ia, ib, step));
        }
    }
    let (h, w) = test_ds.image_shape();
    let inputs = Tensor::new([meta.len(), 1, h, w], images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ens = predict_ensemble(model, &inputs, members, &mut rng)?;
    let u = decompose_uncertainty(&ens);
    let rows: Vec<ProbeRow> = meta
        .iter()
        .enumerate()
        .map(|(i, &(a, b, a_index, b_index, step))| ProbeRow {
            a,
            b,
            a_index,
            b_index,
            alpha_step: step,
            alpha: alphas[step],
            total: u.total[i],
            aleatoric: u.aleatoric[i],
            epistemic: u.epistemic[i],
        })
        .collect();
    let averages = alphas
        .iter()
        .enumerate()
        .map(|(step, &alpha)| {
            let sel: Vec<&ProbeRow> = rows.iter().filter(|r| r.alpha_step == step).collect();
            let n = sel.len() as f64;
            ProbeAverage {
                alpha_step: step,
                alpha,
                pairs: sel.len(),
                total: sel.iter().map(|r| r.total).sum::<f64>() / n,
                aleatoric: sel.iter().map(|r| r.aleatoric).sum::<f64>() / n,
                epistemic: sel.iter().map(|r| r.epistemic).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(ProbeTable { rows, averages })
}
