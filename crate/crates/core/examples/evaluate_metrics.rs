//! Horizon RMSE and class-weighted displacement errors for hand-made
//! predictions, and the weighted sums for a reference set of per-class values.

use safecast::train::{weighted_sum, MetricAccumulator, CLASS_WEIGHTS};
use safecast::trajectory::AgentType;

fn main() -> safecast::Result<()> {
    let dt = 0.2;
    let horizon = 25;
    let mut acc = MetricAccumulator::new(horizon, dt)?;
    for (class, drift) in [(AgentType::Vehicle, 0.4), (AgentType::Pedestrian, 0.1), (AgentType::Bicycle, 0.2)] {
        let truth: Vec<[f64; 2]> = (1..=horizon).map(|k| [k as f64 * 2.0, 0.0]).collect();
        // error grows linearly with time
        let pred: Vec<[f64; 2]> = truth.iter().enumerate().map(|(k, t)| [t[0] + drift * (k + 1) as f64 * dt, t[1]]).collect();
        acc.push(&pred, &truth, class)?;
    }
    let report = acc.finish()?;
    for h in &report.rmse {
        println!("rmse @ {} s: {:.4}", h.horizon_s, h.rmse);
    }
    for c in &report.classes {
        println!("{:10} ade {:.4} fde {:.4} (n={})", c.class.to_string(), c.ade, c.fde, c.count);
    }
    println!("wsade {:.4} wsfde {:.4}", report.wsade, report.wsfde);

    println!("\nweights {CLASS_WEIGHTS:?}");
    println!("wsade of [1.9372, 0.6561, 1.6247] = {:.4}", weighted_sum([1.9372, 0.6561, 1.6247]));
    println!("wsfde of [3.5061, 1.2524, 3.0657] = {:.4}", weighted_sum([3.5061, 1.2524, 3.0657]));
    Ok(())
}
