mod common;

use btcnn::data::{load_usps, Dataset};
use btcnn::experiment::*;
use btcnn::model::{build_model, ModelSpec};
use btcnn::objective::{minibatch_loss, LossConfig};
use btcnn::uncertainty::predict_ensemble;
use btcnn::{Error, Tape, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data(n_train: usize, n_test: usize) -> (Dataset, Dataset) {
    let dir = common::data_dir();
    let (tr, te) = load_usps(dir.join("zip.train.gz"), dir.join("zip.test.gz")).unwrap();
    let tr = tr.subset(&(0..n_train).collect::<Vec<_>>()).unwrap();
    let te = te.subset(&(0..n_test).collect::<Vec<_>>()).unwrap();
    (tr, te)
}

fn quick_config(v: Variant, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(v, seed);
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.mc_eval = 3;
    cfg
}

#[test]
fn zero_epochs_gives_empty_record_and_fixed_init() {
    let (tr, te) = small_data(64, 32);
    let mut cfg = quick_config(Variant::Bnn, 5);
    cfg.epochs = 0;
    let mut a = train(&cfg, &tr, &te, DataDescription::default()).unwrap();
    let mut b = train(&cfg, &tr, &te, DataDescription::default()).unwrap();
    assert!(a.record.rows.is_empty());
    assert!(a.last_eval.is_none());
    assert_eq!(a.model.parameter_values(), b.model.parameter_values());
}

#[test]
fn same_seed_same_record() {
    let (tr, te) = small_data(160, 64);
    for v in [Variant::Cnn, Variant::BtcnnCc] {
        let cfg = quick_config(v, 11);
        let mut a = train(&cfg, &tr, &te, DataDescription::default()).unwrap();
        let mut b = train(&cfg, &tr, &te, DataDescription::default()).unwrap();
        assert_eq!(a.record.rows.len(), 2);
        assert!(a.record.same_trajectory(&b.record));
        assert_eq!(a.model.parameter_values(), b.model.parameter_values());
        for r in &a.record.rows {
            assert!(0.0 <= r.ece && r.ece <= r.mce && r.mce <= 1.0);
        }
        let other = train(&quick_config(v, 12), &tr, &te, DataDescription::default()).unwrap();
        assert!(!a.record.same_trajectory(&other.record));
    }
}

#[test]
fn zero_gamma_matches_plain_btcnn_bitwise() {
    let (tr, te) = small_data(160, 64);
    let plain = quick_config(Variant::Btcnn, 3);
    let mut cc = quick_config(Variant::BtcnnCc, 3);
    cc.model.gamma = 0.0;
    let mut a = train(&plain, &tr, &te, DataDescription::default()).unwrap();
    let mut b = train(&cc, &tr, &te, DataDescription::default()).unwrap();
    assert!(a.record.same_trajectory(&b.record));
    assert_eq!(a.model.parameter_values(), b.model.parameter_values());

    cc.model.gamma = 0.5;
    let c = train(&cc, &tr, &te, DataDescription::default()).unwrap();
    assert!(!a.record.same_trajectory(&c.record));
}

#[test]
fn topological_constraints_hold_during_training() {
    let (tr, _) = small_data(200, 10);
    let cfg = quick_config(Variant::Tcnn, 1);
    let mut t = Trainer::new(&cfg, tr.len()).unwrap();
    let bank = t.model().circle_bank().unwrap().weights().clone();
    let mask = t.model().col_mask().unwrap().clone();
    let mut steps = 0;
    let mut nonzero_kept = false;
    t.train_epoch(&tr, |m| {
        steps += 1;
        let w = m.conv2_kernel();
        for (block, &keep) in w.data().chunks_exact(9).zip(mask.entries()) {
            if keep {
                nonzero_kept |= block.iter().any(|&v| v != 0.0);
            } else {
                assert!(block.iter().all(|&v| v == 0.0));
            }
        }
    })
    .unwrap();
    assert_eq!(steps, 7);
    assert!(nonzero_kept);
    assert_eq!(t.model().circle_bank().unwrap().weights(), &bank);
}

fn tiny_model(v: Variant, seed: u64) -> btcnn::Model {
    let mut spec = ModelSpec::for_variant(v);
    spec.conv1_channels = 4;
    spec.conv2_channels = 4;
    spec.hidden = 6;
    spec.image_size = 8;
    build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn deterministic_loss_is_cross_entropy() {
    let mut m = tiny_model(Variant::Cnn, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::uniform_tensor(&[4, 1, 8, 8], 0.0, 1.0, &mut rng);
    let y = vec![1, 2, 3, 4];
    let cfg = LossConfig::new(3, 0.0, 0.5).unwrap();
    let mut tape = Tape::new();
    let l = minibatch_loss(&mut m, &mut tape, &x, &y, &cfg, &mut rng).unwrap();
    let mut t2 = Tape::new();
    let xv = t2.constant(&x).unwrap();
    let logits = m.forward(&mut t2, xv, &mut rng).unwrap();
    let ce = t2.cross_entropy(logits, &y).unwrap();
    assert_eq!(tape.scalar_value(l).unwrap(), t2.scalar_value(ce).unwrap());
}

#[test]
fn mc_average_equals_mean_of_single_draws() {
    let m = tiny_model(Variant::Btcnn, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = common::uniform_tensor(&[3, 1, 8, 8], 0.0, 1.0, &mut rng);
    let y = vec![0, 5, 9];
    let loss = |t: usize, m: &mut btcnn::Model, rng: &mut ChaCha8Rng| {
        let cfg = LossConfig::new(t, 0.0, 0.01).unwrap();
        let mut tape = Tape::new();
        let l = minibatch_loss(m, &mut tape, &x, &y, &cfg, rng).unwrap();
        tape.scalar_value(l).unwrap()
    };
    let four = loss(4, &mut m.clone(), &mut ChaCha8Rng::seed_from_u64(9));
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut mm = m.clone();
    let singles: f64 = (0..4).map(|_| loss(1, &mut mm, &mut r)).sum::<f64>() / 4.0;
    assert!((four - singles).abs() < 1e-12 * four.abs(), "{four} vs {singles}");
}

#[test]
fn consistency_vanishes_on_identical_outputs() {
    let m = tiny_model(Variant::BtcnnCc, 4);
    let img = common::uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    let x = Tensor::stack(&[img.select(0).unwrap(), img.select(0).unwrap(), img.select(0).unwrap()]).unwrap();
    let y = vec![1, 1, 2];
    let run = |gamma: f64| {
        let cfg = LossConfig::new(2, gamma, 0.1).unwrap();
        let mut tape = Tape::new();
        let l = minibatch_loss(&mut m.clone(), &mut tape, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        tape.scalar_value(l).unwrap()
    };
    assert_eq!(run(0.0), run(2.0));
}

#[test]
fn empty_batch_is_rejected() {
    let mut m = tiny_model(Variant::Cnn, 0);
    let cfg = LossConfig::new(1, 0.0, 1.0).unwrap();
    let r = minibatch_loss(
        &mut m,
        &mut Tape::new(),
        &Tensor::zeros([0, 1, 8, 8]),
        &[],
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(r, Err(Error::Validation(_))));
}

#[test]
fn gradients_never_reach_fixed_or_pruned_weights() {
    let mut m = tiny_model(Variant::Btcnn, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = common::uniform_tensor(&[2, 1, 8, 8], 0.0, 1.0, &mut rng);
    let cfg = LossConfig::new(1, 0.0, 0.1).unwrap();
    let mut tape = Tape::new();
    let l = minibatch_loss(&mut m, &mut tape, &x, &[3, 4], &cfg, &mut rng).unwrap();
    let g = tape.backward(l).unwrap();
    m.pull_grads(&g).unwrap();
    let mask = m.col_mask().unwrap().clone();
    let params = m.params_mut();
    // first parameter is the circle-one kernel: the circle bank is not trainable
    let kernel = params[0].tensor();
    assert_eq!(kernel.shape(), &[4, 4, 3, 3]);
    for (block, &keep) in kernel.grad().unwrap().chunks_exact(9).zip(mask.entries()) {
        if !keep {
            assert!(block.iter().all(|&v| v == 0.0));
        }
    }
    assert!(params.iter().all(|p| p.tensor().grad().unwrap().iter().all(|v| v.is_finite())));
}

#[test]
fn deterministic_ensembles_repeat_one_pass() {
    let mut m = tiny_model(Variant::Tcnn, 3);
    let x = common::uniform_tensor(&[5, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let ens = predict_ensemble(&mut m, &x, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let single = m.predict_probs(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for s in 0..4 {
        assert_eq!(ens.member(s), single.data());
    }
    assert_eq!(ens.mean_probs(), single.data());
}

#[test]
fn ensemble_variance_shrinks_with_size() {
    let mut m = tiny_model(Variant::Bnn, 6);
    for p in m.params_mut() {
        for v in p.tensor_mut().data_mut() {
            if *v == btcnn::bayes::DEFAULT_RHO_INIT {
                *v = -0.5;
            }
        }
    }
    let x = common::uniform_tensor(&[1, 1, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let mut variance = |s: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s as u64);
        let vals: Vec<f64> = (0..400)
            .map(|_| predict_ensemble(&mut m, &x, s, &mut rng).unwrap().mean_probs()[0])
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
    };
    let ratio = variance(1) / variance(16);
    assert!((8.0..32.0).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn probe_tables() {
    let (_, te) = small_data(1, 200);
    let mut spec = ModelSpec::for_variant(Variant::Cnn);
    spec.conv1_channels = 4;
    spec.conv2_channels = 4;
    spec.hidden = 6;
    let mut m = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let t = run_uq_probe(&mut m, &te, PairSelection::All, 3, 1).unwrap();
    assert_eq!(t.rows.len(), 450);
    assert_eq!(t.averages.len(), 10);
    assert!(t.rows.iter().all(|r| r.epistemic == 0.0));
    let one = run_uq_probe(&mut m, &te, PairSelection::One(0, 3), 3, 1).unwrap();
    assert_eq!(one.rows.len(), 10);
    assert_eq!((one.rows[0].a, one.rows[0].b), (0, 3));
    assert_eq!(one.rows[0].a_index, te.first_of_class(0).unwrap());

    let only_zeros: Vec<usize> = (0..te.len()).filter(|&i| te.labels()[i] == 0).collect();
    let zeros = te.subset(&only_zeros).unwrap();
    assert!(run_uq_probe(&mut m, &zeros, PairSelection::One(0, 3), 3, 1).is_err());
}

#[test]
fn starvation_row_count_and_outputs() {
    let (tr, te) = small_data(120, 40);
    let mut base = quick_config(Variant::Cnn, 7);
    base.epochs = 1;
    let mut records = Vec::new();
    let rows = run_starvation(
        &base,
        &[Variant::Cnn, Variant::Btcnn],
        &[0.5, 1.0],
        2,
        &tr,
        &te,
        |row, rec| {
            records.push((row.clone(), rec.clone()));
            Ok(())
        },
    )
    .unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert_eq!(rows[0].train_size, 60);
    assert_eq!(rows[0].report_epoch, 1);
    assert_eq!(records.len(), 8);

    let dir = tempfile::tempdir().unwrap();
    write_csv_rows(dir.path().join("summary.csv"), &rows).unwrap();
    let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 9);
    assert!(text.starts_with("variant,fraction,repeat,seed"));

    let rec = &records[0].1;
    rec.write_json(dir.path().join("run.json")).unwrap();
    let back: RunRecord =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(&back, rec);
    rec.write_csv(dir.path().join("run.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,test_loss,test_accuracy,ece,mce,wall_time"));
}
