use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use btcnn::data::{load_dataset, BlurPolicy, Dataset, Split, CLASSES};
use btcnn::experiment::{
    prepare_data, run_starvation, run_uq_probe, train, DataDescription, DataOptions, KlWeighting,
    PairSelection, RunRecord, TrainConfig, TrainOutcome, STARVATION_FRACTIONS, write_csv_rows,
};
use btcnn::Variant;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "btcnn", version, about = "Train and probe topological Bayesian CNNs on USPS digits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its per-epoch record.
    Train(Common),
    /// Train every model on random subsets of the training set.
    Starve {
        #[command(flatten)]
        common: Common,
        /// Training fractions to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = STARVATION_FRACTIONS.to_vec())]
        fractions: Vec<f64>,
        /// Runs per (model, fraction); repeat r uses seed + r.
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
    /// Train on class-dependently blurred images.
    BlurTrain(Common),
    /// Train a model, then sweep convex combinations between digit pairs.
    UqProbe(Common),
    /// Train a model and write the per-bin calibration table of its last epoch.
    CalibReport(Common),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KlArg {
    PerEpoch,
    PerSample,
}

#[derive(Args, Debug)]
struct Common {
    /// Model variant(s): cnn, tcnn, bnn, btcnn, btcnn-cc. `starve` accepts a comma list.
    #[arg(long, value_delimiter = ',', required = true)]
    model: Vec<Variant>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: u64,
    /// Weight draws per minibatch.
    #[arg(long, default_value_t = 1)]
    mc_train: usize,
    /// Weight draws for evaluation ensembles.
    #[arg(long, default_value_t = 30)]
    mc_eval: usize,
    /// Consistency weight (btcnn-cc only; defaults to the model's value).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Geodesic threshold for the circle-one layer, in radians.
    #[arg(long)]
    col_threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "per-epoch")]
    kl_weighting: KlArg,
    #[arg(long, default_value = "data/usps/zip.train.gz")]
    data_train: PathBuf,
    #[arg(long, default_value = "data/usps/zip.test.gz")]
    data_test: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Keep this random fraction of the training set.
    #[arg(long)]
    subset_fraction: Option<f64>,
    /// Blur training images by class.
    #[arg(long)]
    blur_train: bool,
    /// Blur test images by class.
    #[arg(long)]
    blur_test: bool,
    /// Digit pair for uq-probe, e.g. 0,3. All 45 pairs when omitted.
    #[arg(long, value_parser = parse_pair)]
    pair: Option<(usize, usize)>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected A,B")?;
    let digit = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&d| d < CLASSES)
            .ok_or(format!("{t:?} is not a digit 0-9"))
    };
    let (a, b) = (digit(a)?, digit(b)?);
    if a == b {
        return Err("pair needs two different digits".into());
    }
    Ok((a.min(b), a.max(b)))
}

#[derive(Debug)]
struct StageError {
    stage: &'static str,
    msg: String,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.msg)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|e| StageError { stage, msg: e.to_string() })
    }
}

fn fail(stage: &'static str, msg: impl Into<String>) -> StageError {
    StageError { stage, msg: msg.into() }
}

impl Common {
    fn single_model(&self) -> Result<Variant, StageError> {
        match self.model.as_slice() {
            [v] => Ok(*v),
            _ => Err(fail("config", "this command takes exactly one --model")),
        }
    }

    fn config(&self, variant: Variant) -> Result<TrainConfig, StageError> {
        let mut cfg = TrainConfig::new(variant, self.seed);
        if let Some(t) = self.col_threshold {
            cfg.model = cfg.model.with_col_threshold(t);
        }
        if let Some(g) = self.gamma {
            if variant == Variant::BtcnnCc {
                cfg.model = cfg.model.with_gamma(g);
            } else if g != 0.0 {
                return Err(fail("config", format!("--gamma only applies to btcnn-cc, not {variant}")));
            }
        }
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.learning_rate = self.lr;
        cfg.mc_train = self.mc_train;
        cfg.mc_eval = self.mc_eval;
        cfg.bins = self.bins;
        cfg.kl_weighting = match self.kl_weighting {
            KlArg::PerEpoch => KlWeighting::PerEpoch,
            KlArg::PerSample => KlWeighting::PerSample,
        };
        cfg.validate().stage("config")?;
        Ok(cfg)
    }

    fn load(&self) -> Result<(Dataset, Dataset), StageError> {
        let train = load_dataset(&self.data_train, Split::Train).stage("load-data")?;
        let test = load_dataset(&self.data_test, Split::Test).stage("load-data")?;
        log::info!("loaded {} training and {} test images", train.len(), test.len());
        Ok((train, test))
    }

    fn data_options(&self, blur_train: bool) -> DataOptions {
        DataOptions {
            subset_fraction: self.subset_fraction,
            blur_train: blur_train.then(BlurPolicy::default),
            blur_test: self.blur_test.then(BlurPolicy::default),
        }
    }

    fn describe(&self, opts: &DataOptions, train: &Dataset, test: &Dataset) -> DataDescription {
        DataDescription {
            train_path: Some(self.data_train.display().to_string()),
            test_path: Some(self.data_test.display().to_string()),
            train_size: train.len(),
            test_size: test.len(),
            pixel_range: "[0, 1]".into(),
            subset_fraction: opts.subset_fraction,
            blur_train: opts.blur_train.clone(),
            blur_test: opts.blur_test.clone(),
        }
    }

    /// Loads, perturbs and trains a single model, writing its record.
    fn train_one(&self, blur_train: bool) -> Result<(TrainOutcome, Dataset), StageError> {
        let cfg = self.config(self.single_model()?)?;
        let (train_raw, test_raw) = self.load()?;
        let opts = self.data_options(blur_train);
        let (tr, te) = prepare_data(&train_raw, &test_raw, &opts, cfg.seed).stage("prepare-data")?;
        let desc = self.describe(&opts, &tr, &te);
        let outcome = train(&cfg, &tr, &te, desc).stage("train")?;
        write_record(&self.out, &outcome.record)?;
        summarize(&outcome);
        Ok((outcome, te))
    }
}

fn run_name(cfg: &TrainConfig) -> String {
    format!("{}-seed{}", cfg.model.variant, cfg.seed)
}

fn write_record(out: &Path, record: &RunRecord) -> Result<(), StageError> {
    fs::create_dir_all(out).stage("write-output")?;
    let name = run_name(&record.config);
    record.write_csv(out.join(format!("{name}.csv"))).stage("write-output")?;
    record.write_json(out.join(format!("{name}.json"))).stage("write-output")?;
    Ok(())
}

fn summarize(outcome: &TrainOutcome) {
    if let Some(row) = outcome.record.rows.last() {
        println!(
            "{} epoch {}: test accuracy {:.4}, ece {:.4}, mce {:.4}",
            outcome.record.config.model.variant, row.epoch, row.test_accuracy, row.ece, row.mce
        );
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Train(c) => {
            c.train_one(c.blur_train)?;
        }
        Command::BlurTrain(c) => {
            c.train_one(true)?;
        }
        Command::Starve { common: c, fractions, repeats } => {
            if c.subset_fraction.is_some() {
                return Err(fail("config", "starve chooses its own subsets; use --fractions"));
            }
            let base = c.config(c.model[0])?;
            // validate every variant up front so a bad one fails before any training
            for &v in &c.model {
                c.config(v)?;
            }
            let (tr, te) = c.load()?;
            let opts = c.data_options(c.blur_train);
            let (tr, te) = prepare_data(&tr, &te, &opts, base.seed).stage("prepare-data")?;
            fs::create_dir_all(&c.out).stage("write-output")?;
            let runs = c.out.join("runs");
            fs::create_dir_all(&runs).stage("write-output")?;
            let rows = run_starvation(&base, &c.model, &fractions, repeats, &tr, &te, |row, record| {
                let name = format!("{}-f{}-seed{}", row.variant, row.fraction, row.seed);
                record.write_csv(runs.join(format!("{name}.csv")))?;
                record.write_json(runs.join(format!("{name}.json")))
            })
            .stage("train")?;
            write_csv_rows(c.out.join("starvation.csv"), &rows).stage("write-output")?;
            println!("{} runs written to {}", rows.len(), c.out.display());
        }
        Command::UqProbe(c) => {
            let (mut outcome, te) = c.train_one(c.blur_train)?;
            let pairs = match c.pair {
                Some((a, b)) => PairSelection::One(a, b),
                None => PairSelection::All,
            };
            let table = run_uq_probe(&mut outcome.model, &te, pairs, c.mc_eval, c.seed).stage("probe")?;
            let name = run_name(&outcome.record.config);
            write_csv_rows(c.out.join(format!("{name}-probe-pairs.csv")), &table.rows).stage("write-output")?;
            write_csv_rows(c.out.join(format!("{name}-probe-alpha.csv")), &table.averages).stage("write-output")?;
            for a in &table.averages {
                println!(
                    "alpha {:.3}: total {:.4}, aleatoric {:.4}, epistemic {:.4}",
                    a.alpha, a.total, a.aleatoric, a.epistemic
                );
            }
        }
        Command::CalibReport(c) => {
            let (outcome, _) = c.train_one(c.blur_train)?;
            let eval = outcome
                .last_eval
                .as_ref()
                .ok_or_else(|| fail("calibrate", "need at least one epoch to report calibration"))?;
            let bins = &eval.calibration.bins;
            let name = run_name(&outcome.record.config);
            write_csv_rows(c.out.join(format!("{name}-calibration.csv")), bins).stage("write-output")?;
            for b in bins {
                println!(
                    "({:.2}, {:.2}]  n={:<5} acc {:.4}  conf {:.4}  gap {:.4}",
                    b.lower, b.upper, b.count, b.accuracy, b.confidence, b.gap()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("btcnn: {e}");
            ExitCode::FAILURE
        }
    }
}
