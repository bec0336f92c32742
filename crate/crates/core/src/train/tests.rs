use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::GraphConfig;
use crate::model::{distributions, prepare_sample, Batch, DecodeModes, Forecaster, ModelConfig, ModelDims, Sample};
use crate::numeric::{cosine_warm_restarts, Session};
use crate::rss::RssParameters;
use crate::trajectory::{synthesize_scenes, LabelConfig, SynthSpec, WindowConfig};

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    synthesize_scenes(&SynthSpec {
        n_scenes: n,
        seed,
        window: WindowConfig {
            history_s: 1.0,
            future_s: 1.0,
            n_max: 3,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap()
    .iter()
    .map(|w| prepare_sample(w, &RssParameters::default(), &GraphConfig::default(), &LabelConfig::default()).unwrap())
    .collect()
}

fn model(seed: u64) -> Forecaster {
    let cfg = ModelConfig {
        hidden: 8,
        fusion_heads: 2,
        ..Default::default()
    };
    let dims = ModelDims {
        history_steps: 5,
        future_steps: 5,
        nodes: 4,
        dt: 0.2,
    };
    Forecaster::new(&cfg, dims, seed).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 3,
        lr: 3e-3,
        t0: 2.0,
        ..Default::default()
    }
}

#[test]
fn tape_loss_matches_the_plain_oracles() {
    let s = samples(4, 1);
    let refs: Vec<&Sample> = s.iter().collect();
    let batch = Batch::new(&refs, false).unwrap();
    let m = model(2);
    let w = LossWeights { nll: 0.7, maneuver: 1.3 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut sess = Session::new(&m.params, false, &mut rng);
    let given = m.forward(&mut sess, &batch, DecodeModes::Given(&batch.labels)).unwrap();
    let vars = loss_on_tape(&mut sess, &given, &batch, &w).unwrap();
    let report = loss::report_of(&sess, &vars, &w, batch.size);
    let all = m.forward(&mut sess, &batch, DecodeModes::All).unwrap();
    let dists = distributions(&sess, &all, &batch).unwrap();

    let mut mse = 0.0;
    let mut nll_plus_man = 0.0;
    let mut man = 0.0;
    for (d, smp) in dists.iter().zip(&s) {
        mse += mse_loss(d, &smp.truth, smp.label).unwrap();
        nll_plus_man += nll_bivariate(d, &smp.truth, smp.label).unwrap();
        man += -d.lat_probs[smp.label.lat.index()].ln() - d.lon_probs[smp.label.lon.index()].ln();
    }
    let n = s.len() as f64;
    assert!((report.mse - mse / n).abs() < 1e-9);
    assert!((report.maneuver_nll - man / n).abs() < 1e-9);
    assert!((report.nll - (nll_plus_man - man) / n).abs() < 1e-9);
    assert!((report.total - (report.mse + 0.7 * report.nll + 1.3 * report.maneuver_nll)).abs() < 1e-12);
}

#[test]
fn same_seed_gives_identical_curves_and_csv() {
    let data = samples(7, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for k in 0..2 {
        let mut t = Trainer::new(model(4), config(3), 9).unwrap();
        t.fit(&data, &data[..2], |_, _| Ok(())).unwrap();
        let path = dir.path().join(format!("loss{k}.csv"));
        t.write_loss_csv(&path).unwrap();
        csvs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,total,mse,nll,maneuver_nll");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn learning_rate_follows_the_closed_form_schedule() {
    let data = samples(7, 5);
    let cfg = config(5);
    let mut t = Trainer::new(model(1), cfg.clone(), 2).unwrap();
    t.fit(&data, &[], |_, _| Ok(())).unwrap();
    // 7 samples in batches of 3: three steps per epoch
    assert_eq!(t.lr_trace.len(), 15);
    for (k, lr) in t.lr_trace.iter().enumerate() {
        let pos = (k / 3) as f64 + (k % 3) as f64 / 3.0;
        let expected = cosine_warm_restarts(cfg.lr, cfg.t0, cfg.t_mult, pos);
        assert!((lr - expected).abs() < 1e-15, "step {k}");
    }
    // restart at epoch 2 brings the rate back to the initial value
    assert_eq!(t.lr_trace[6], cfg.lr);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = samples(6, 6);
    let val = samples(2, 7);
    let mut full = Trainer::new(model(3), config(4), 11).unwrap();
    full.fit(&data, &val, |_, _| Ok(())).unwrap();

    let mut first = Trainer::new(model(3), config(2), 11).unwrap();
    first.fit(&data, &val, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    first.checkpoint().unwrap().save(&path).unwrap();
    let ckpt = crate::numeric::Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::resume(&ckpt, Some(config(4))).unwrap();
    assert_eq!(resumed.epoch(), 2);
    assert_eq!(resumed.optimizer_steps(), first.optimizer_steps());
    resumed.fit(&data, &val, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.history(), full.history());
    for ((_, a), (_, b)) in resumed.model.params.iter().zip(full.model.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn divergence_restores_the_last_good_parameters() {
    let data = samples(6, 8);
    let mut t = Trainer::new(model(5), config(3), 1).unwrap();
    t.fit(&data, &[], |_, _| Ok(())).unwrap();
    t.config.epochs = 4;
    // a NaN weight makes the next loss non-finite
    let name = t.model.params.iter().map(|(_, p)| p.name.clone()).find(|n| n.contains("decoder.out")).unwrap();
    let id = t.model.params.id(&name).unwrap();
    let mut poisoned = t.clone();
    poisoned.model.params.get_mut(id).value.data_mut()[0] = f64::NAN;
    let snapshot = poisoned.model.params.clone();
    let err = poisoned.fit(&data, &[], |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, crate::Error::Training(_)), "{err}");
    for ((_, a), (_, b)) in poisoned.model.params.iter().zip(snapshot.iter()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x == y || (x.is_nan() && y.is_nan())));
    }
    assert_eq!(poisoned.epoch(), 3);
}

#[test]
fn early_stopping_keeps_the_best_validation_weights() {
    let data = samples(6, 9);
    let val = samples(3, 10);
    let mut cfg = config(60);
    cfg.patience = 2;
    cfg.lr = 0.05;
    let mut t = Trainer::new(model(6), cfg, 3).unwrap();
    t.fit(&data, &val, |_, _| Ok(())).unwrap();
    assert!(t.stopped_early(), "ran all {} epochs", t.epoch());
    let best = t.best_epoch().unwrap();
    let best_nll = t.history()[best].val.unwrap().nll;
    assert!(t.history().iter().all(|r| r.val.unwrap().nll >= best_nll));
    let again = validation_loss(&t.best_model(), &val, &t.config).unwrap();
    assert!((again.nll - best_nll).abs() < 1e-12);
}

#[test]
fn empty_training_split_is_rejected() {
    let mut t = Trainer::new(model(0), config(1), 0).unwrap();
    assert!(t.fit(&[], &[], |_, _| Ok(())).is_err());
}

#[test]
fn evaluation_reports_whole_seconds_and_is_repeatable() {
    let data = samples(5, 11);
    let m = model(7);
    let a = evaluate(&m, &data, 2, Default::default()).unwrap();
    let b = evaluate(&m, &data, 5, Default::default()).unwrap();
    assert_eq!(a.rmse.len(), 1);
    assert_eq!(a.rmse[0].horizon_s, 1.0);
    assert_eq!(a, b);
    assert!(a.wsade >= 0.0 && a.wsfde >= 0.0);
}
