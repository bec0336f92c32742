//! Intention and safety graphs of one generated scene window.

use safecast::graph::{graph_sequence, GraphConfig, GraphKind};
use safecast::rss::RssParameters;
use safecast::trajectory::{synthesize_scenes, SynthSpec};

fn main() -> safecast::Result<()> {
    let window = synthesize_scenes(&SynthSpec {
        n_scenes: 1,
        n_agents: 5,
        seed: 3,
        ..Default::default()
    })?
    .remove(0);
    let cfg = GraphConfig::default();
    let rss = RssParameters::default();
    for kind in [GraphKind::Dig, GraphKind::Dsg] {
        let seq = graph_sequence(&window, kind, &cfg, &rss)?;
        let last = seq.last().expect("window has history");
        println!("{kind:?}: {} graphs, {} features per node", seq.len(), last.feature_dim());
        println!("  edges per step: {:?}", seq.iter().map(|g| g.n_edges()).collect::<Vec<_>>());
        for (i, f) in last.node_features.iter().enumerate().filter(|(i, _)| last.valid[*i]) {
            let f: Vec<String> = f.iter().map(|v| format!("{v:7.2}")).collect();
            println!("  node {i} (agent {:?}): [{}]", last.agent_ids[i], f.join(" "));
        }
    }
    Ok(())
}
