//! Responsibility-sensitive safety distances and their parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{AgentState, Context, Track};

/// Lane width used when lane ids have to be inferred from `y`.
pub const LANE_WIDTH: f64 = 3.5;

pub const A_MAX_FLOOR: f64 = 0.5;
pub const B_MIN_FLOOR: f64 = 1.0;
pub const ALPHA_MAX_FLOOR: f64 = 0.1;
pub const BETA_MIN_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RssParameters {
    /// Reaction time, s.
    pub rho: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    /// Lateral fluctuation margin, m.
    pub mu: f64,
    pub context: Context,
}

impl Default for RssParameters {
    fn default() -> Self {
        Self::for_context(Context::Highway)
    }
}

impl RssParameters {
    pub fn for_context(context: Context) -> Self {
        let mu = match context {
            Context::Highway => 1.0,
            Context::Urban => 2.5,
        };
        Self {
            rho: 0.8,
            a_max: 2.0,
            b_min: 4.0,
            b_max: 8.0,
            alpha_max: 0.5,
            beta_min: 1.0,
            mu,
            context,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("rho", self.rho),
            ("a_max", self.a_max),
            ("b_min", self.b_min),
            ("b_max", self.b_max),
            ("alpha_max", self.alpha_max),
            ("beta_min", self.beta_min),
            ("mu", self.mu),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!("RSS parameter {name} must be positive, got {v}")));
            }
        }
        if self.b_min > self.b_max {
            return Err(Error::Argument(format!(
                "RSS b_min ({}) exceeds b_max ({})",
                self.b_min, self.b_max
            )));
        }
        Ok(())
    }
}

/// Minimum gap a rear vehicle at `v_r` must keep to a front vehicle at
/// `v_f` (both m/s along the lane).
pub fn safe_longitudinal_distance(v_r: f64, v_f: f64, p: &RssParameters) -> Result<f64> {
    p.validate()?;
    if !(v_r >= 0.0 && v_f >= 0.0) {
        return Err(Error::Argument(format!(
            "longitudinal speeds must be non-negative, got v_r={v_r}, v_f={v_f}"
        )));
    }
    let rho = p.rho;
    let v_resp = v_r + rho * p.a_max;
    let d = v_r * rho + 0.5 * p.a_max * rho * rho + v_resp * v_resp / (2.0 * p.b_min)
        - v_f * v_f / (2.0 * p.b_max);
    Ok(d.max(0.0))
}

/// Lateral margin between a right vehicle with lateral speed `v1` and a
/// left vehicle with lateral speed `v2` (m/s, left positive).
///
/// Both response speeds add `alpha_max * rho`.
pub fn safe_lateral_distance(v1: f64, v2: f64, p: &RssParameters) -> Result<f64> {
    p.validate()?;
    if !(v1.is_finite() && v2.is_finite()) {
        return Err(Error::Argument(format!("lateral speeds must be finite, got {v1}, {v2}")));
    }
    let rho = p.rho;
    let v1r = v1 + p.alpha_max * rho;
    let v2r = v2 + p.alpha_max * rho;
    let right = (v1 + v1r) / 2.0 * rho + v1r * v1r / (2.0 * p.beta_min);
    let left = (v2 + v2r) / 2.0 * rho - v2r * v2r / (2.0 * p.beta_min);
    Ok(p.mu + (right - left).max(0.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyEnvelope {
    pub d_lon: f64,
    pub d_lat: f64,
    pub leader_id: Option<i64>,
    pub lateral_id: Option<i64>,
}

pub fn lane_of(s: &AgentState) -> i64 {
    s.lane_id.unwrap_or_else(|| (s.p[1] / LANE_WIDTH).floor() as i64)
}

/// Required distances for `ego` against the nearest same-lane leader and
/// the nearest agent in an adjacent lane.
pub fn safety_envelope(ego: &AgentState, neighbors: &[AgentState], p: &RssParameters) -> Result<SafetyEnvelope> {
    p.validate()?;
    let lane = lane_of(ego);
    let leader = neighbors
        .iter()
        .filter(|n| n.agent_id != ego.agent_id && lane_of(n) == lane && n.p[0] > ego.p[0])
        .min_by(|a, b| (a.p[0] - ego.p[0]).total_cmp(&(b.p[0] - ego.p[0])).then(a.agent_id.cmp(&b.agent_id)));
    let lateral = neighbors
        .iter()
        .filter(|n| n.agent_id != ego.agent_id && (lane_of(n) - lane).abs() == 1)
        .min_by(|a, b| a.distance_to(ego).total_cmp(&b.distance_to(ego)).then(a.agent_id.cmp(&b.agent_id)));

    let d_lon = match leader {
        Some(l) => safe_longitudinal_distance(ego.v[0].max(0.0), l.v[0].max(0.0), p)?,
        None => 0.0,
    };
    let d_lat = match lateral {
        Some(o) => {
            let (right, left) = if o.p[1] < ego.p[1] { (o, ego) } else { (ego, o) };
            safe_lateral_distance(right.v[1], left.v[1], p)?
        }
        None => p.mu,
    };
    Ok(SafetyEnvelope {
        d_lon,
        d_lat,
        leader_id: leader.map(|l| l.agent_id),
        lateral_id: lateral.map(|o| o.agent_id),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssEstimate {
    pub params: RssParameters,
    /// Set when some or all values fell back to context defaults.
    pub warning: Option<String>,
    pub samples: usize,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], pct: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Estimates acceleration bounds from observed tracks: `a_max` and
/// `alpha_max` are 99th percentiles of accelerations, `b_max` the 99th and
/// `b_min`/`beta_min` the 50th percentile of decelerations. Floors apply;
/// `rho` and `mu` come from the context.
pub fn estimate_parameters(tracks: &[Track], context: Context) -> RssEstimate {
    let defaults = RssParameters::for_context(context);
    let mut lon_acc = Vec::new();
    let mut lon_dec = Vec::new();
    let mut lat_acc = Vec::new();
    let mut lat_dec = Vec::new();
    let mut samples = 0;
    for t in tracks.iter().filter(|t| t.states.len() >= 3) {
        for s in &t.states {
            if !(s.a[0].is_finite() && s.a[1].is_finite()) {
                continue;
            }
            samples += 1;
            if s.a[0] >= 0.0 {
                lon_acc.push(s.a[0]);
            }
            if s.a[0] <= 0.0 {
                lon_dec.push(-s.a[0]);
            }
            let away = s.a[1] * s.v[1];
            if away >= 0.0 {
                lat_acc.push(s.a[1].abs());
            }
            if away <= 0.0 {
                lat_dec.push(s.a[1].abs());
            }
        }
    }
    if samples == 0 {
        return RssEstimate {
            params: defaults,
            warning: Some("no track with at least 3 frames; using context defaults".into()),
            samples: 0,
        };
    }

    let mut missing = Vec::new();
    let mut pick = |set: &[f64], pct: f64, default: f64, name: &'static str| {
        percentile(set, pct).unwrap_or_else(|| {
            missing.push(name);
            default
        })
    };
    let a_max = pick(&lon_acc, 99.0, defaults.a_max, "a_max").max(A_MAX_FLOOR);
    let b_min = pick(&lon_dec, 50.0, defaults.b_min, "b_min").max(B_MIN_FLOOR);
    let b_max = pick(&lon_dec, 99.0, defaults.b_max, "b_max").max(b_min);
    let alpha_max = pick(&lat_acc, 99.0, defaults.alpha_max, "alpha_max").max(ALPHA_MAX_FLOOR);
    let beta_min = pick(&lat_dec, 50.0, defaults.beta_min, "beta_min").max(BETA_MIN_FLOOR);
    let warning =
        (!missing.is_empty()).then(|| format!("no samples for {}; using context defaults", missing.join(", ")));
    RssEstimate {
        params: RssParameters {
            a_max,
            b_min,
            b_max,
            alpha_max,
            beta_min,
            ..defaults
        },
        warning,
        samples,
    }
}
