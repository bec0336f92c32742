//! Mixture density on a regular grid, for heat-map plots.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForecastDistribution;

/// Largest grid a single step may produce.
pub const MAX_CELLS: usize = 4_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cell edge, m.
    pub step: f64,
    /// Extent around each mode mean, in standard deviations.
    pub margin_sigmas: f64,
    /// Modes below this probability do not widen the extent.
    pub min_prob: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: 0.25,
            margin_sigmas: 4.0,
            min_prob: 1e-4,
        }
    }
}

/// One grid cell. `x`, `y` are cell centers in source coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub step: usize,
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub density: f64,
}

/// Relative bounding box `[x_min, y_min]..[x_max, y_max]` of step `k`.
fn extent(dist: &ForecastDistribution, k: usize, spec: &GridSpec) -> ([f64; 2], [f64; 2]) {
    let probs = dist.maneuver_probs();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for (m, steps) in dist.modes.iter().enumerate() {
        if probs[m] < spec.min_prob && m != dist.top_mode() {
            continue;
        }
        let p = steps[k];
        for a in 0..2 {
            lo[a] = lo[a].min(p[a] - spec.margin_sigmas * p[2 + a]);
            hi[a] = hi[a].max(p[a] + spec.margin_sigmas * p[2 + a]);
        }
    }
    (lo, hi)
}

/// Density grid of step `k`.
pub fn density_grid(dist: &ForecastDistribution, k: usize, dt: f64, spec: &GridSpec) -> Result<Vec<HeatmapCell>> {
    if !(spec.step > 0.0 && spec.margin_sigmas > 0.0) {
        return Err(Error::Argument(format!("invalid grid spec {spec:?}")));
    }
    if k >= dist.horizon() {
        return Err(Error::Argument(format!("step {k} beyond horizon {}", dist.horizon())));
    }
    let (lo, hi) = extent(dist, k, spec);
    let nx = ((hi[0] - lo[0]) / spec.step).ceil().max(1.0) as usize;
    let ny = ((hi[1] - lo[1]) / spec.step).ceil().max(1.0) as usize;
    if nx.saturating_mul(ny) > MAX_CELLS {
        return Err(Error::Argument(format!(
            "grid of {nx}x{ny} cells exceeds {MAX_CELLS}; use a larger step"
        )));
    }
    let mut cells = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        let y = lo[1] + (iy as f64 + 0.5) * spec.step;
        for ix in 0..nx {
            let x = lo[0] + (ix as f64 + 0.5) * spec.step;
            cells.push(HeatmapCell {
                step: k,
                t_s: (k + 1) as f64 * dt,
                x: x + dist.origin[0],
                y: y + dist.origin[1],
                density: dist.density(k, x, y),
            });
        }
    }
    Ok(cells)
}

/// Midpoint-rule integral of the cells of one step.
pub fn grid_mass(cells: &[HeatmapCell], step: f64) -> f64 {
    cells.iter().map(|c| c.density).sum::<f64>() * step * step
}

/// Columns: `step,t_s,x,y,density`.
pub fn write_heatmap_csv(path: &Path, cells: &[HeatmapCell]) -> Result<()> {
    let wrap = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for c in cells {
        w.serialize(c).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::NUM_MODES;

    fn dist(corr: f64, spread: f64) -> ForecastDistribution {
        ForecastDistribution {
            lat_probs: [0.2, 0.5, 0.3],
            lon_probs: [0.1, 0.6, 0.3],
            modes: (0..NUM_MODES)
                .map(|m| vec![[m as f64 * spread, -(m as f64) * 0.5 * spread, 0.8 + 0.1 * m as f64, 0.6, corr]; 3])
                .collect(),
            origin: [30.0, 4.0],
        }
    }

    #[test]
    fn grids_integrate_to_one() {
        for (corr, spread) in [(0.0, 0.0), (0.7, 1.0), (-0.9, 3.0)] {
            let d = dist(corr, spread);
            let spec = GridSpec {
                step: 0.1,
                ..Default::default()
            };
            let cells = density_grid(&d, 1, 0.2, &spec).unwrap();
            assert!(cells.iter().all(|c| c.density >= 0.0));
            let mass = grid_mass(&cells, spec.step);
            assert!((mass - 1.0).abs() < 0.05, "mass {mass}");
        }
    }

    #[test]
    fn single_mode_grid_has_one_local_maximum() {
        let d = dist(0.3, 0.0);
        let spec = GridSpec {
            step: 0.5,
            ..Default::default()
        };
        let cells = density_grid(&d, 0, 0.2, &spec).unwrap();
        let xs: Vec<f64> = cells.iter().filter(|c| c.y == cells[0].y).map(|c| c.x).collect();
        let (nx, ny) = (xs.len(), cells.len() / xs.len());
        let at = |i: usize, j: usize| cells[j * nx + i].density;
        let mut maxima = 0;
        for j in 0..ny {
            for i in 0..nx {
                let v = at(i, j);
                let neighbors = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)];
                let is_max = neighbors.iter().all(|(di, dj)| {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    a < 0 || b < 0 || a >= nx as i64 || b >= ny as i64 || at(a as usize, b as usize) < v
                });
                maxima += is_max as usize;
            }
        }
        assert_eq!(maxima, 1);
    }

    #[test]
    fn csv_has_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let cells = density_grid(&dist(0.0, 1.0), 2, 0.2, &GridSpec::default()).unwrap();
        write_heatmap_csv(&path, &cells).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,t_s,x,y,density");
        assert_eq!(text.lines().count(), cells.len() + 1);
    }

    #[test]
    fn oversized_grids_are_rejected() {
        let spec = GridSpec {
            step: 1e-4,
            ..Default::default()
        };
        assert!(density_grid(&dist(0.0, 1.0), 0, 0.2, &spec).is_err());
    }
}
