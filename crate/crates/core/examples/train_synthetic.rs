//! Trains the forecaster on a small synthetic set and prints the loss curve.
//!
//! cargo run --release --example train_synthetic -- [scenes] [epochs] [hidden]

use safecast::graph::GraphConfig;
use safecast::model::{prepare_sample, Forecaster, ModelConfig, ModelDims};
use safecast::rss::RssParameters;
use safecast::train::{evaluate, TrainConfig, Trainer};
use safecast::trajectory::{synthesize_scenes, LabelConfig, SynthSpec};

fn main() -> safecast::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (scenes, epochs, hidden) = (
        args.first().copied().unwrap_or(32),
        args.get(1).copied().unwrap_or(20),
        args.get(2).copied().unwrap_or(64),
    );
    let spec = SynthSpec {
        n_scenes: scenes,
        ..Default::default()
    };
    let rss = RssParameters::default();
    let samples = synthesize_scenes(&spec)?
        .iter()
        .map(|w| prepare_sample(w, &rss, &GraphConfig::default(), &LabelConfig::default()))
        .collect::<safecast::Result<Vec<_>>>()?;
    let first = &samples[0];
    let dims = ModelDims {
        history_steps: first.history_steps,
        future_steps: first.truth.len(),
        nodes: first.nodes,
        dt: first.dt,
    };
    let cfg = ModelConfig {
        hidden,
        ..Default::default()
    };
    let model = Forecaster::new(&cfg, dims, 1)?;
    println!("parameters: {}", model.num_parameters());
    let mut trainer = Trainer::new(
        model,
        TrainConfig {
            epochs,
            batch_size: 32,
            patience: 0,
            ..Default::default()
        },
        1,
    )?;
    let start = std::time::Instant::now();
    trainer.fit(&samples, &[], |_, r| {
        println!(
            "epoch {:3}  total {:9.4}  mse {:9.4}  nll {:8.4}  maneuver {:7.4}  [{:.1}s]",
            r.epoch,
            r.train.total,
            r.train.mse,
            r.train.nll,
            r.train.maneuver_nll,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let report = evaluate(&trainer.model, &samples, 64, Default::default())?;
    for h in &report.rmse {
        println!("rmse @ {} s: {:.3}", h.horizon_s, h.rmse);
    }
    Ok(())
}
