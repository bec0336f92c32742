use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::graph::GraphConfig;
use crate::numeric::gradcheck::{check_gradients, GradCheckOptions};
use crate::numeric::{Array, Session};
use crate::rss::RssParameters;
use crate::trajectory::{synthesize_scenes, LabelConfig, SceneWindow, SynthSpec, WindowConfig, NUM_MODES};

fn windows(n: usize, seed: u64, history_s: f64, future_s: f64, n_max: usize) -> Vec<SceneWindow> {
    synthesize_scenes(&SynthSpec {
        n_scenes: n,
        seed,
        window: WindowConfig {
            history_s,
            future_s,
            n_max,
            ..Default::default()
        },
        ..Default::default()
    })
    .unwrap()
}

fn batch_of(ws: &[SceneWindow], no_rss: bool) -> Batch {
    let samples: Vec<Sample> = ws
        .iter()
        .map(|w| prepare_sample(w, &RssParameters::default(), &GraphConfig::default(), &LabelConfig::default()).unwrap())
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::new(&refs, no_rss).unwrap()
}

fn dims(b: &Batch) -> ModelDims {
    ModelDims {
        history_steps: b.history_steps,
        future_steps: b.future_steps,
        nodes: b.nodes,
        dt: 0.2,
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        fusion_heads: 2,
        ..Default::default()
    }
}

fn eval(model: &Forecaster, batch: &Batch) -> Vec<ForecastDistribution> {
    model.predict(batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

fn max_diff(a: &[ForecastDistribution], b: &[ForecastDistribution]) -> f64 {
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.lat_probs.iter().chain(&x.lon_probs).zip(y.lat_probs.iter().chain(&y.lon_probs)) {
            worst = worst.max((p - q).abs());
        }
        for (mx, my) in x.modes.iter().zip(&y.modes) {
            for (sx, sy) in mx.iter().zip(my) {
                for k in 0..5 {
                    worst = worst.max((sx[k] - sy[k]).abs());
                }
            }
        }
    }
    worst
}

#[test]
fn forward_shapes_for_all_and_given_modes() {
    let ws = windows(3, 1, 1.0, 1.0, 3);
    let batch = batch_of(&ws, false);
    let model = Forecaster::new(&small_config(), dims(&batch), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&model.params, true, &mut rng);
    let all = model.forward(&mut s, &batch, DecodeModes::All).unwrap();
    assert_eq!(s.tape.shape(all.trajectories), &[NUM_MODES, 3, 5, 5]);
    assert_eq!(s.tape.shape(all.lat_probs), &[3, 3]);
    assert_eq!(s.tape.shape(all.fusion_attention.unwrap()), &[6, 5, 5]);
    let given = model.forward(&mut s, &batch, DecodeModes::Given(&batch.labels)).unwrap();
    assert_eq!(s.tape.shape(given.trajectories), &[3, 5, 5]);
    let att = s.tape.value(all.fusion_attention.unwrap());
    for row in att.data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn given_mode_matches_the_same_row_of_all_modes() {
    let ws = windows(2, 2, 1.0, 1.0, 2);
    let batch = batch_of(&ws, false);
    let model = Forecaster::new(&small_config(), dims(&batch), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = Session::new(&model.params, false, &mut rng);
    let all = model.forward(&mut s, &batch, DecodeModes::All).unwrap();
    let given = model.forward(&mut s, &batch, DecodeModes::Given(&batch.labels)).unwrap();
    let (a, g) = (s.tape.value(all.trajectories).clone(), s.tape.value(given.trajectories).clone());
    for (i, label) in batch.labels.iter().enumerate() {
        let m = label.mode_index();
        for k in 0..5 {
            for c in 0..5 {
                assert_eq!(a.at(&[m, i, k, c]), g.at(&[i, k, c]));
            }
        }
    }
}

#[test]
fn outputs_are_valid_distributions_for_many_seeds() {
    let ws = windows(2, 4, 1.0, 1.0, 2);
    let batch = batch_of(&ws, false);
    for seed in 0..100 {
        let model = Forecaster::new(&small_config(), dims(&batch), seed).unwrap();
        for d in eval(&model, &batch) {
            d.validate().unwrap();
            let p: f64 = d.maneuver_probs().iter().sum();
            assert!((p - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn prediction_is_deterministic_in_seed() {
    let ws = windows(2, 5, 1.0, 1.0, 2);
    let batch = batch_of(&ws, false);
    let a = eval(&Forecaster::new(&small_config(), dims(&batch), 11).unwrap(), &batch);
    let b = eval(&Forecaster::new(&small_config(), dims(&batch), 11).unwrap(), &batch);
    let c = eval(&Forecaster::new(&small_config(), dims(&batch), 12).unwrap(), &batch);
    assert_eq!(a, b);
    assert!(max_diff(&a, &c) > 1e-6);
}

#[test]
fn small_variant_has_fewer_parameters() {
    let d = ModelDims {
        history_steps: 15,
        future_steps: 25,
        nodes: 9,
        dt: 0.2,
    };
    let full = Forecaster::new(&ModelConfig::default(), d, 0).unwrap();
    let small = Forecaster::new(
        &ModelConfig {
            variant: Variant::Small,
            ..Default::default()
        },
        d,
        0,
    )
    .unwrap();
    assert!(small.num_parameters() < full.num_parameters());
}

#[test]
fn translated_scenes_give_identical_relative_forecasts() {
    let ws = windows(2, 6, 1.0, 1.0, 3);
    let moved: Vec<SceneWindow> = ws.iter().map(|w| w.translated([512.0, -37.5])).collect();
    let (a, b) = (batch_of(&ws, false), batch_of(&moved, false));
    let model = Forecaster::new(&small_config(), dims(&a), 9).unwrap();
    assert!(max_diff(&eval(&model, &a), &eval(&model, &b)) < 1e-9);
}

/// Perturbs one graph input and reports how far the forecast moved.
fn sensitivity(cfg: &ModelConfig, perturb: impl Fn(&mut Batch)) -> f64 {
    let ws = windows(2, 8, 1.0, 1.0, 3);
    let batch = batch_of(&ws, cfg.ablation.no_rss);
    let model = Forecaster::new(cfg, dims(&batch), 5).unwrap();
    let mut changed = batch.clone();
    perturb(&mut changed);
    max_diff(&eval(&model, &batch), &eval(&model, &changed))
}

fn bump(a: &mut Array, width: usize, columns: &[usize]) {
    for row in a.data_mut().chunks_mut(width) {
        for &c in columns {
            row[c] += 0.7;
        }
    }
}

#[test]
fn ablations_cut_exactly_their_input_path() {
    let full = small_config();
    let with = |f: fn(&mut Ablation)| {
        let mut c = small_config();
        f(&mut c.ablation);
        c
    };
    let dig = |b: &mut Batch| bump(&mut b.dig.features, 9, &[0, 1, 2]);
    let dsg = |b: &mut Batch| bump(&mut b.dsg.features, 4, &[0, 1]);
    assert!(sensitivity(&full, dig) > 1e-6);
    assert!(sensitivity(&full, dsg) > 1e-6);
    assert_eq!(sensitivity(&with(|a| a.no_intention = true), dig), 0.0);
    assert!(sensitivity(&with(|a| a.no_intention = true), dsg) > 1e-6);
    assert_eq!(sensitivity(&with(|a| a.no_safety_spatial = true), dsg), 0.0);
    assert!(sensitivity(&with(|a| a.no_safety_spatial = true), dig) > 1e-6);
    for f in [
        (|a: &mut Ablation| a.no_safety_temporal = true) as fn(&mut Ablation),
        |a| a.conv_fusion = true,
        |a| a.no_guf = true,
        |a| a.no_maneuver = true,
    ] {
        let c = with(f);
        assert!(sensitivity(&c, dig) > 1e-6, "{}", c.ablation.label());
    }
}

#[test]
fn no_rss_batches_ignore_the_rss_parameters() {
    let ws = windows(2, 9, 1.0, 1.0, 3);
    let prep = |rss: &RssParameters| -> Batch {
        let s: Vec<Sample> = ws
            .iter()
            .map(|w| prepare_sample(w, rss, &GraphConfig::default(), &LabelConfig::default()).unwrap())
            .collect();
        Batch::new(&s.iter().collect::<Vec<_>>(), true).unwrap()
    };
    let other = RssParameters {
        rho: 2.0,
        mu: 3.0,
        ..Default::default()
    };
    let (a, b) = (prep(&RssParameters::default()), prep(&other));
    let mut c = small_config();
    c.ablation.no_rss = true;
    let model = Forecaster::new(&c, dims(&a), 1).unwrap();
    assert_eq!(eval(&model, &a), eval(&model, &b));
}

#[test]
fn single_mode_decoder_replicates_one_trajectory() {
    let ws = windows(2, 10, 1.0, 1.0, 2);
    let batch = batch_of(&ws, false);
    let mut c = small_config();
    c.ablation.no_maneuver = true;
    let model = Forecaster::new(&c, dims(&batch), 2).unwrap();
    for d in eval(&model, &batch) {
        assert_eq!(d.lat_probs, [1.0 / 3.0; 3]);
        assert!(d.modes.iter().all(|m| *m == d.modes[0]));
    }
}

#[test]
fn small_variant_runs_and_is_valid() {
    let ws = windows(2, 12, 1.0, 1.0, 2);
    let batch = batch_of(&ws, false);
    let mut c = small_config();
    c.variant = Variant::Small;
    let model = Forecaster::new(&c, dims(&batch), 2).unwrap();
    for d in eval(&model, &batch) {
        d.validate().unwrap();
    }
}

#[test]
fn mismatched_batch_is_rejected() {
    let a = batch_of(&windows(1, 1, 1.0, 1.0, 2), false);
    let b = batch_of(&windows(1, 1, 1.0, 2.0, 2), false);
    let model = Forecaster::new(&small_config(), dims(&a), 0).unwrap();
    assert!(model.predict(&b, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn forward_gradients_match_finite_differences() {
    let ws = windows(2, 13, 0.6, 0.4, 2);
    let batch = batch_of(&ws, false);
    for variant in [Variant::Full, Variant::Small] {
        let cfg = ModelConfig {
            hidden: 4,
            fusion_heads: 2,
            variant,
            ..Default::default()
        };
        let model = Forecaster::new(&cfg, dims(&batch), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [batch.size, batch.future_steps, 5];
        let n: usize = shape.iter().product();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // entries far below the loss scale are dominated by rounding in the
        // central difference, hence the larger floor
        let opts = GradCheckOptions {
            floor: 1e-5,
            ..Default::default()
        };
        let report = check_gradients(&model.params, &opts, |p| {
            let mut r = ChaCha8Rng::seed_from_u64(17);
            let mut s = Session::new(p, true, &mut r);
            let out = model.forward(&mut s, &batch, DecodeModes::Given(&batch.labels))?;
            let y = s.tape.mul_const(out.trajectories, &Array::new(&shape, weights.clone())?)?;
            let y = s.tape.sum(y);
            let lp = s.tape.log_clamped(out.lat_probs, 1e-12);
            let lp = s.tape.sum(lp);
            let loss = s.tape.add(y, lp)?;
            Ok((s.tape, loss))
        })
        .unwrap();
        assert!(report.checked > 200);
        assert_eq!(report.passed, report.checked, "{variant:?}: {:?}", report.mismatches);
    }
}
