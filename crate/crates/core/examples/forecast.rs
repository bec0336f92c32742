//! Builds the full and small forecasters and prints the multimodal
//! forecast of an untrained model for one scene.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safecast::graph::GraphConfig;
use safecast::model::{prepare_sample, Batch, Forecaster, ModelConfig, ModelDims, PointMode, Variant};
use safecast::rss::RssParameters;
use safecast::trajectory::{synthesize_scenes, LabelConfig, ManeuverLabel, SynthSpec, NUM_MODES};

fn main() -> safecast::Result<()> {
    let window = synthesize_scenes(&SynthSpec {
        n_scenes: 1,
        seed: 5,
        ..Default::default()
    })?
    .remove(0);
    let sample = prepare_sample(&window, &RssParameters::default(), &GraphConfig::default(), &LabelConfig::default())?;
    let dims = ModelDims {
        history_steps: sample.history_steps,
        future_steps: sample.truth.len(),
        nodes: sample.nodes,
        dt: sample.dt,
    };
    for variant in [Variant::Full, Variant::Small] {
        let cfg = ModelConfig {
            variant,
            ..Default::default()
        };
        println!("{variant:?}: {} parameters", Forecaster::new(&cfg, dims, 0)?.num_parameters());
    }

    let model = Forecaster::new(&ModelConfig::default(), dims, 0)?;
    let batch = Batch::new(&[&sample], false)?;
    let dist = model.predict(&batch, &mut ChaCha8Rng::seed_from_u64(0))?.remove(0);
    println!("true maneuver {}, lateral {:?}, longitudinal {:?}", sample.label, dist.lat_probs, dist.lon_probs);
    for m in 0..NUM_MODES {
        let last = dist.modes[m].last().expect("non-empty horizon");
        let label = ManeuverLabel::from_mode_index(m).expect("mode index in range");
        println!(
            "  {label} p={:.3}  final mean ({:6.2}, {:5.2}) sigma ({:.2}, {:.2}) corr {:+.3}",
            dist.mode_prob(m),
            last[0],
            last[1],
            last[2],
            last[3],
            last[4]
        );
    }
    let top = dist.predict_absolute(PointMode::TopMode);
    println!("top mode ends at {:?}, truth at {:?}", top.last(), window.ego_future.last().map(|s| s.p));
    Ok(())
}
