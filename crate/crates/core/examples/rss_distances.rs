//! Required safe distances for a car following another, under highway and
//! urban defaults, plus parameters fitted to generated traffic.

use safecast::rss::{estimate_parameters, safe_lateral_distance, safe_longitudinal_distance, safety_envelope, RssParameters};
use safecast::trajectory::{synthesize_tracks, AgentState, Context, SynthSpec};

fn car(id: i64, x: f64, y: f64, vx: f64, vy: f64) -> AgentState {
    AgentState {
        agent_id: id,
        p: [x, y],
        v: [vx, vy],
        lane_id: Some((y / 3.5).floor() as i64),
        ..Default::default()
    }
}

fn main() -> safecast::Result<()> {
    for context in [Context::Highway, Context::Urban] {
        let p = RssParameters::for_context(context);
        println!("{context:?}: rho {} a_max {} b_min {} b_max {} mu {}", p.rho, p.a_max, p.b_min, p.b_max, p.mu);
        for (v_r, v_f) in [(10.0, 10.0), (20.0, 15.0), (30.0, 30.0)] {
            println!("  rear {v_r:4} m/s, front {v_f:4} m/s -> d_lon {:7.3} m", safe_longitudinal_distance(v_r, v_f, &p)?);
        }
        println!("  lateral 0.5 / -0.5 m/s -> d_lat {:.3} m", safe_lateral_distance(0.5, -0.5, &p)?);
    }

    let p = RssParameters::default();
    let ego = car(0, 0.0, 1.75, 20.0, 0.0);
    let others = [car(1, 35.0, 1.75, 15.0, 0.0), car(2, 5.0, 5.25, 22.0, -0.3)];
    let env = safety_envelope(&ego, &others, &p)?;
    println!("\nenvelope of ego: {env:?}");

    let tracks: Vec<_> = synthesize_tracks(&SynthSpec {
        n_scenes: 50,
        ..Default::default()
    })?
    .into_iter()
    .flat_map(|s| s.tracks)
    .collect();
    let est = estimate_parameters(&tracks, Context::Highway);
    println!("\nfitted from {} samples: {:?}", est.samples, est.params);
    if let Some(w) = est.warning {
        println!("warning: {w}");
    }
    Ok(())
}
