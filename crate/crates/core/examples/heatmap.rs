//! Briefly trains a small model, then writes the forecast density of one
//! scene on a grid at every whole second of the horizon.
//!
//! cargo run --release --example heatmap -- [out.csv]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safecast::graph::GraphConfig;
use safecast::model::{prepare_sample, Batch, Forecaster, ModelConfig, ModelDims};
use safecast::rss::RssParameters;
use safecast::train::{density_grid, grid_mass, write_heatmap_csv, GridSpec, TrainConfig, Trainer};
use safecast::trajectory::{synthesize_scenes, LabelConfig, SynthSpec};

fn main() -> safecast::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "heatmap.csv".into());
    let samples = synthesize_scenes(&SynthSpec {
        n_scenes: 24,
        ..Default::default()
    })?
    .iter()
    .map(|w| prepare_sample(w, &RssParameters::default(), &GraphConfig::default(), &LabelConfig::default()))
    .collect::<safecast::Result<Vec<_>>>()?;
    let s = &samples[0];
    let dims = ModelDims {
        history_steps: s.history_steps,
        future_steps: s.truth.len(),
        nodes: s.nodes,
        dt: s.dt,
    };
    let cfg = ModelConfig {
        hidden: 16,
        fusion_heads: 2,
        ..Default::default()
    };
    let tc = TrainConfig {
        epochs: 10,
        batch_size: 8,
        lr: 3e-3,
        ..Default::default()
    };
    let mut trainer = Trainer::new(Forecaster::new(&cfg, dims, 0)?, tc, 0)?;
    trainer.fit(&samples, &[], |_, _| Ok(()))?;

    let dist = trainer.model.predict(&Batch::new(&[s], false)?, &mut ChaCha8Rng::seed_from_u64(0))?.remove(0);
    let spec = GridSpec::default();
    let mut cells = Vec::new();
    for k in (0..dims.future_steps).filter(|k| ((k + 1) as f64 * dims.dt).fract().abs() < 1e-9) {
        let grid = density_grid(&dist, k, dims.dt, &spec)?;
        println!("t = {:.0} s: {} cells, mass {:.4}", (k + 1) as f64 * dims.dt, grid.len(), grid_mass(&grid, spec.step));
        cells.extend(grid);
    }
    write_heatmap_csv(std::path::Path::new(&out), &cells)?;
    println!("wrote {out} (columns step,t_s,x,y,density)");
    Ok(())
}
