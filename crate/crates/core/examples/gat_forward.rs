//! Runs the uncertainty-aware graph attention stack over a batch of
//! intention graphs, with and without the learnable feature noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safecast::gat::{GatStackConfig, GraphBatch, UncertaintyGat};
use safecast::graph::{graph_sequence, GraphConfig, GraphKind};
use safecast::numeric::{ParamStore, Session};
use safecast::rss::RssParameters;
use safecast::trajectory::{synthesize_scenes, SynthSpec};

fn main() -> safecast::Result<()> {
    let window = synthesize_scenes(&SynthSpec {
        n_scenes: 1,
        ..Default::default()
    })?
    .remove(0);
    let graphs = graph_sequence(&window, GraphKind::Dig, &GraphConfig::default(), &RssParameters::default())?;
    let batch = GraphBatch::from_graphs(&graphs)?;
    println!("{} graphs of {} nodes, {} features", batch.graphs, batch.nodes, batch.feature_dim());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let cfg = GatStackConfig {
        guf_init_log_sigma: -1.0,
        ..Default::default()
    };
    let gat = UncertaintyGat::new(&mut store, "gat", batch.feature_dim(), 16, &cfg, &mut rng)?;
    println!("{} trainable parameters, noise sigma {:?}", store.num_trainable(), gat.guf.as_ref().map(|g| g.sigma(&store)));

    for training in [false, true, true] {
        let mut s = Session::new(&store, training, &mut rng);
        let out = gat.forward_batch(&mut s, &batch)?;
        let v = s.tape.value(out);
        let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("training={training:5}: output {:?}, norm {norm:.6}", v.shape());
    }
    Ok(())
}
