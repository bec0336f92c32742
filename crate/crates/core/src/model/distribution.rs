use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{ManeuverLabel, NUM_MODES};

/// Per-step bivariate Gaussian `(mu_x, mu_y, sigma_x, sigma_y, corr)`.
pub type GaussianStep = [f64; 5];

/// Forecast for one window: factorized maneuver probabilities and one
/// Gaussian trajectory per joint maneuver mode (`lat * 3 + lon`).
/// Coordinates are relative to `origin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub lat_probs: [f64; 3],
    pub lon_probs: [f64; 3],
    pub modes: Vec<Vec<GaussianStep>>,
    pub origin: [f64; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointMode {
    /// Mean of the most probable mode.
    #[default]
    TopMode,
    /// Probability-weighted mean over modes.
    Weighted,
}

impl ForecastDistribution {
    pub fn mode_prob(&self, mode: usize) -> f64 {
        self.lat_probs[mode / 3] * self.lon_probs[mode % 3]
    }

    pub fn maneuver_probs(&self) -> [f64; NUM_MODES] {
        std::array::from_fn(|m| self.mode_prob(m))
    }

    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, Vec::len)
    }

    pub fn top_mode(&self) -> usize {
        let p = self.maneuver_probs();
        (0..NUM_MODES).fold(0, |best, m| if p[m] > p[best] { m } else { best })
    }

    pub fn top_label(&self) -> ManeuverLabel {
        ManeuverLabel::from_mode_index(self.top_mode()).expect("mode below 9")
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != NUM_MODES {
            return Err(Error::Inference(format!("expected {NUM_MODES} modes, got {}", self.modes.len())));
        }
        for probs in [&self.lat_probs, &self.lon_probs] {
            let sum: f64 = probs.iter().sum();
            if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Inference(format!("maneuver probabilities {probs:?} are not a simplex")));
            }
        }
        let h = self.horizon();
        for (m, steps) in self.modes.iter().enumerate() {
            if steps.len() != h {
                return Err(Error::Inference(format!("mode {m} has {} steps, expected {h}", steps.len())));
            }
            for p in steps {
                if p.iter().any(|v| !v.is_finite()) || p[2] <= 0.0 || p[3] <= 0.0 || p[4].abs() >= 1.0 {
                    return Err(Error::Inference(format!("invalid Gaussian parameters {p:?} in mode {m}")));
                }
            }
        }
        Ok(())
    }

    /// Point forecast relative to `origin`.
    pub fn predict_point(&self, mode: PointMode) -> Vec<[f64; 2]> {
        match mode {
            PointMode::TopMode => self.modes[self.top_mode()].iter().map(|p| [p[0], p[1]]).collect(),
            PointMode::Weighted => {
                let probs = self.maneuver_probs();
                let total: f64 = probs.iter().sum();
                (0..self.horizon())
                    .map(|k| {
                        let mut acc = [0.0; 2];
                        for (m, steps) in self.modes.iter().enumerate() {
                            acc[0] += probs[m] * steps[k][0];
                            acc[1] += probs[m] * steps[k][1];
                        }
                        [acc[0] / total, acc[1] / total]
                    })
                    .collect()
            }
        }
    }

    /// Point forecast in source coordinates.
    pub fn predict_absolute(&self, mode: PointMode) -> Vec<[f64; 2]> {
        self.predict_point(mode)
            .into_iter()
            .map(|p| [p[0] + self.origin[0], p[1] + self.origin[1]])
            .collect()
    }

    /// Mixture density at relative position `(x, y)` and step `k`.
    pub fn density(&self, k: usize, x: f64, y: f64) -> f64 {
        let probs = self.maneuver_probs();
        self.modes
            .iter()
            .zip(probs)
            .map(|(steps, w)| w * (-crate::numeric::gaussian2_nll_value(&steps[k], x, y)).exp())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(lat: [f64; 3], lon: [f64; 3], offset: impl Fn(usize) -> f64) -> ForecastDistribution {
        ForecastDistribution {
            lat_probs: lat,
            lon_probs: lon,
            modes: (0..NUM_MODES)
                .map(|m| (0..4).map(|k| [k as f64 + offset(m), offset(m), 1.0, 1.0, 0.0]).collect())
                .collect(),
            origin: [100.0, -5.0],
        }
    }

    #[test]
    fn dominant_mode_makes_both_reductions_agree() {
        let eps = 1e-9;
        let d = dist([1.0 - 2.0 * eps, eps, eps], [eps, eps, 1.0 - 2.0 * eps], |m| m as f64);
        d.validate().unwrap();
        let a = d.predict_point(PointMode::TopMode);
        let b = d.predict_point(PointMode::Weighted);
        for (p, q) in a.iter().zip(&b) {
            assert!((p[0] - q[0]).abs() < 1e-6 && (p[1] - q[1]).abs() < 1e-6);
        }
        assert_eq!(d.top_mode(), 2);
    }

    #[test]
    fn two_symmetric_modes_average_to_midpoint() {
        // modes 0 (SA) and 1 (SD) share the mass, with offsets +2 and -2
        let d = dist([1.0, 0.0, 0.0], [0.5, 0.5, 0.0], |m| match m {
            0 => 2.0,
            1 => -2.0,
            _ => 50.0,
        });
        let w = d.predict_point(PointMode::Weighted);
        assert_eq!(w[3], [3.0, 0.0]);
    }

    #[test]
    fn absolute_prediction_adds_origin() {
        let d = dist([1.0, 0.0, 0.0], [0.0, 0.0, 1.0], |_| 0.0);
        assert_eq!(d.predict_absolute(PointMode::TopMode)[1], [101.0, -5.0]);
    }

    #[test]
    fn validation_catches_bad_parameters() {
        let mut d = dist([0.5, 0.5, 0.0], [0.0, 0.0, 1.0], |_| 0.0);
        d.modes[3][1][4] = 1.0;
        assert!(d.validate().is_err());
        let d = dist([0.5, 0.6, 0.0], [0.0, 0.0, 1.0], |_| 0.0);
        assert!(d.validate().is_err());
    }
}
