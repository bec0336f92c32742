use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::AgentType;

/// Class weights for vehicles, pedestrians and bicycles.
pub const CLASS_WEIGHTS: [f64; 3] = [0.20, 0.58, 0.22];

/// Class-weighted sum, ordered as `AgentType::ALL`.
pub fn weighted_sum(per_class: [f64; 3]) -> f64 {
    per_class.iter().zip(CLASS_WEIGHTS).map(|(v, w)| v * w).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRmse {
    pub horizon_s: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: AgentType,
    pub ade: f64,
    pub fde: f64,
    /// Windows of this class; zero leaves `ade` and `fde` at zero.
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub rmse: Vec<HorizonRmse>,
    pub classes: Vec<ClassMetrics>,
    pub wsade: f64,
    pub wsfde: f64,
}

impl MetricReport {
    pub fn from_classes(samples: usize, rmse: Vec<HorizonRmse>, classes: Vec<ClassMetrics>) -> Self {
        let ade = std::array::from_fn(|k| classes.iter().find(|c| c.class.index() == k).map_or(0.0, |c| c.ade));
        let fde = std::array::from_fn(|k| classes.iter().find(|c| c.class.index() == k).map_or(0.0, |c| c.fde));
        Self {
            samples,
            rmse,
            classes,
            wsade: weighted_sum(ade),
            wsfde: weighted_sum(fde),
        }
    }

    /// Mean of the whole-second RMSE values.
    pub fn mean_rmse(&self) -> f64 {
        if self.rmse.is_empty() {
            return 0.0;
        }
        self.rmse.iter().map(|h| h.rmse).sum::<f64>() / self.rmse.len() as f64
    }

    pub fn class(&self, class: AgentType) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class == class)
    }

    pub fn write_rmse_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let wrap = |e: csv::Error| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        for h in &self.rmse {
            w.serialize(h).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Streams point predictions and truths into a [`MetricReport`].
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    dt: f64,
    horizon: usize,
    /// Squared error sums per step.
    sq: Vec<f64>,
    samples: usize,
    ade_sum: [f64; 3],
    fde_sum: [f64; 3],
    counts: [usize; 3],
}

impl MetricAccumulator {
    pub fn new(horizon: usize, dt: f64) -> Result<Self> {
        if horizon == 0 || !(dt > 0.0) {
            return Err(Error::Argument(format!("invalid metric horizon {horizon} with dt {dt}")));
        }
        Ok(Self {
            dt,
            horizon,
            sq: vec![0.0; horizon],
            samples: 0,
            ade_sum: [0.0; 3],
            fde_sum: [0.0; 3],
            counts: [0; 3],
        })
    }

    pub fn push(&mut self, pred: &[[f64; 2]], truth: &[[f64; 2]], class: AgentType) -> Result<()> {
        if pred.len() != self.horizon || truth.len() != self.horizon {
            return Err(Error::dim("metric horizon", &[self.horizon], &[pred.len(), truth.len()]));
        }
        let mut disp_sum = 0.0;
        let mut last = 0.0;
        for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
            let d2 = (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
            self.sq[k] += d2;
            last = d2.sqrt();
            disp_sum += last;
        }
        let c = class.index();
        self.ade_sum[c] += disp_sum / self.horizon as f64;
        self.fde_sum[c] += last;
        self.counts[c] += 1;
        self.samples += 1;
        Ok(())
    }

    /// Steps that land on whole seconds, with their horizon in seconds.
    pub fn whole_second_steps(&self) -> Vec<(usize, f64)> {
        (0..self.horizon)
            .filter_map(|k| {
                let t = (k + 1) as f64 * self.dt;
                ((t - t.round()).abs() < 1e-9 && t.round() >= 1.0).then_some((k, t.round()))
            })
            .collect()
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.samples == 0 {
            return Err(Error::EmptyInput("no predictions to evaluate".into()));
        }
        let n = self.samples as f64;
        let rmse = self
            .whole_second_steps()
            .into_iter()
            .map(|(k, t)| HorizonRmse {
                horizon_s: t,
                rmse: (self.sq[k] / n).sqrt(),
            })
            .collect();
        let classes = AgentType::ALL
            .iter()
            .map(|&class| {
                let (c, count) = (class.index(), self.counts[class.index()]);
                let mean = |s: f64| if count == 0 { 0.0 } else { s / count as f64 };
                ClassMetrics {
                    class,
                    ade: mean(self.ade_sum[c]),
                    fde: mean(self.fde_sum[c]),
                    count,
                }
            })
            .collect();
        Ok(MetricReport::from_classes(self.samples, rmse, classes))
    }
}
