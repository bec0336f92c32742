use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForecastDistribution, ForwardOutput};
use crate::numeric::{gaussian2_nll_value, Array, Session, Var};
use crate::trajectory::ManeuverLabel;

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub nll: f64,
    pub maneuver: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nll: 1.0, maneuver: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub nll: f64,
    pub maneuver_nll: f64,
    pub batch_size: usize,
}

impl LossReport {
    pub fn new(mse: f64, nll: f64, maneuver_nll: f64, weights: &LossWeights, batch_size: usize) -> Self {
        Self {
            total: mse + weights.nll * nll + weights.maneuver * maneuver_nll,
            mse,
            nll,
            maneuver_nll,
            batch_size,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.mse, self.nll, self.maneuver_nll].iter().all(|v| v.is_finite())
    }

    /// Sample-weighted mean of several reports.
    pub fn mean(reports: &[LossReport], weights: &LossWeights) -> Self {
        let n: usize = reports.iter().map(|r| r.batch_size).sum();
        if n == 0 {
            return Self::default();
        }
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(|r| f(r) * r.batch_size as f64).sum::<f64>() / n as f64;
        Self::new(avg(|r| r.mse), avg(|r| r.nll), avg(|r| r.maneuver_nll), weights, n)
    }
}

/// Loss nodes on the tape; `total` is the one to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub nll: Var,
    pub maneuver_nll: Var,
}

fn picked_log_prob(s: &mut Session<'_>, probs: Var, index: impl Fn(&ManeuverLabel) -> usize, labels: &[ManeuverLabel]) -> Result<Var> {
    let mut mask = vec![0.0; labels.len() * 3];
    for (i, l) in labels.iter().enumerate() {
        mask[i * 3 + index(l)] = 1.0;
    }
    let lp = s.tape.log_clamped(probs, PROB_FLOOR);
    let picked = s.tape.mul_const(lp, &Array::new(&[labels.len(), 3], mask)?)?;
    Ok(s.tape.sum(picked))
}

/// Builds the training loss from a forward pass decoded with the true modes
/// (`DecodeModes::Given(&batch.labels)`).
pub fn loss_on_tape(s: &mut Session<'_>, out: &ForwardOutput, batch: &Batch, weights: &LossWeights) -> Result<LossVars> {
    let (b, tf) = (batch.size, batch.future_steps);
    if s.tape.shape(out.trajectories) != [b, tf, 5] {
        return Err(Error::dim("loss trajectories", s.tape.shape(out.trajectories), &[b, tf, 5]));
    }
    let mu = s.tape.slice(out.trajectories, 2, 0, 2)?;
    let truth = s.constant(batch.truth.clone());
    let diff = s.tape.sub(mu, truth)?;
    let sq = s.tape.mul(diff, diff)?;
    let sq = s.tape.sum(sq);
    let mse = s.tape.scale(sq, 1.0 / (b * tf) as f64);

    let nll = s.tape.gaussian2_nll(out.trajectories, &batch.truth)?;
    let nll = s.tape.mean(nll);

    let maneuver_nll = if out.predicts_maneuvers {
        let lat = picked_log_prob(s, out.lat_probs, |l| l.lat.index(), &batch.labels)?;
        let lon = picked_log_prob(s, out.lon_probs, |l| l.lon.index(), &batch.labels)?;
        let both = s.tape.add(lat, lon)?;
        s.tape.scale(both, -1.0 / b as f64)
    } else {
        s.constant(Array::scalar(0.0))
    };

    let weighted_nll = s.tape.scale(nll, weights.nll);
    let weighted_man = s.tape.scale(maneuver_nll, weights.maneuver);
    let total = s.tape.add(mse, weighted_nll)?;
    let total = s.tape.add(total, weighted_man)?;
    Ok(LossVars {
        total,
        mse,
        nll,
        maneuver_nll,
    })
}

pub fn report_of(s: &Session<'_>, vars: &LossVars, weights: &LossWeights, batch_size: usize) -> LossReport {
    let v = |x: Var| s.tape.value(x).item();
    LossReport::new(v(vars.mse), v(vars.nll), v(vars.maneuver_nll), weights, batch_size)
}

fn check_truth(dist: &ForecastDistribution, truth: &[[f64; 2]]) -> Result<()> {
    if truth.len() != dist.horizon() || truth.is_empty() {
        return Err(Error::dim("truth horizon", &[dist.horizon()], &[truth.len()]));
    }
    if truth.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Loss("non-finite ground truth".into()));
    }
    Ok(())
}

/// Mean per-step negative log-likelihood of `truth` under the true mode,
/// plus the negative log-probabilities of the true lateral and longitudinal
/// maneuvers. `truth` is relative to the distribution's origin.
pub fn nll_bivariate(dist: &ForecastDistribution, truth: &[[f64; 2]], label: ManeuverLabel) -> Result<f64> {
    check_truth(dist, truth)?;
    let steps = &dist.modes[label.mode_index()];
    let mut total = 0.0;
    for (p, t) in steps.iter().zip(truth) {
        if !(p[2] > 0.0 && p[3] > 0.0 && p[4].abs() < 1.0) {
            return Err(Error::Loss(format!("invalid bivariate parameters {p:?}")));
        }
        total += gaussian2_nll_value(p, t[0], t[1]);
    }
    let maneuver = -dist.lat_probs[label.lat.index()].max(PROB_FLOOR).ln() - dist.lon_probs[label.lon.index()].max(PROB_FLOOR).ln();
    Ok(total / truth.len() as f64 + maneuver)
}

/// Mean squared Euclidean error of the true mode's means.
pub fn mse_loss(dist: &ForecastDistribution, truth: &[[f64; 2]], label: ManeuverLabel) -> Result<f64> {
    check_truth(dist, truth)?;
    let steps = &dist.modes[label.mode_index()];
    let sum: f64 = steps
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2))
        .sum();
    Ok(sum / truth.len() as f64)
}
