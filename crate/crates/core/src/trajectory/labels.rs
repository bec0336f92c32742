use std::fmt;

use serde::{Deserialize, Serialize};

use super::SceneWindow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LateralManeuver {
    Straight,
    Right,
    Left,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LongitudinalManeuver {
    Accelerate,
    Decelerate,
    Constant,
}

impl LateralManeuver {
    pub const ALL: [Self; 3] = [Self::Straight, Self::Right, Self::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        ['S', 'R', 'L'][self.index()]
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.letter() == c.to_ascii_uppercase())
    }
}

impl LongitudinalManeuver {
    pub const ALL: [Self; 3] = [Self::Accelerate, Self::Decelerate, Self::Constant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn letter(self) -> char {
        ['A', 'D', 'C'][self.index()]
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.letter() == c.to_ascii_uppercase())
    }
}

/// A joint maneuver class. Modes are numbered `lat * 3 + lon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ManeuverLabel {
    pub lat: LateralManeuver,
    pub lon: LongitudinalManeuver,
}

pub const NUM_MODES: usize = 9;

impl ManeuverLabel {
    pub fn new(lat: LateralManeuver, lon: LongitudinalManeuver) -> Self {
        Self { lat, lon }
    }

    pub fn mode_index(self) -> usize {
        self.lat.index() * 3 + self.lon.index()
    }

    pub fn from_mode_index(i: usize) -> Option<Self> {
        Some(Self::new(LateralManeuver::from_index(i / 3)?, LongitudinalManeuver::from_index(i % 3)?))
    }
}

impl fmt::Display for ManeuverLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.lat.letter(), self.lon.letter())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Net lateral displacement (m) beyond which a lane change is labeled.
    pub lateral_threshold_m: f64,
    /// Relative change in mean speed beyond which A or D is labeled.
    pub speed_change_ratio: f64,
    /// Absolute speed change (m/s) used when the history is at rest.
    pub rest_speed_threshold: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            lateral_threshold_m: 1.75,
            speed_change_ratio: 0.05,
            rest_speed_threshold: 0.1,
        }
    }
}

fn mean_speed<'a>(states: impl Iterator<Item = &'a super::AgentState>) -> f64 {
    let (sum, n) = states.fold((0.0, 0usize), |(s, n), st| (s + st.speed(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Labels a window from its ground-truth future. Lateral: net `y` change
/// from the last history point to the last future point (left positive).
/// Longitudinal: mean future speed against mean history speed.
pub fn extract_maneuver_labels(window: &SceneWindow, cfg: &LabelConfig) -> ManeuverLabel {
    let (Some(start), Some(end)) = (window.ego_history.last(), window.ego_future.last()) else {
        return ManeuverLabel::new(LateralManeuver::Straight, LongitudinalManeuver::Constant);
    };
    let dy = end.p[1] - start.p[1];
    let lat = if dy > cfg.lateral_threshold_m {
        LateralManeuver::Left
    } else if dy < -cfg.lateral_threshold_m {
        LateralManeuver::Right
    } else {
        LateralManeuver::Straight
    };

    let hist = mean_speed(window.ego_history.iter());
    let fut = mean_speed(window.ego_future.iter());
    let (hi, lo) = if hist > 1e-9 {
        (hist * (1.0 + cfg.speed_change_ratio), hist * (1.0 - cfg.speed_change_ratio))
    } else {
        (cfg.rest_speed_threshold, f64::NEG_INFINITY)
    };
    let lon = if fut > hi {
        LongitudinalManeuver::Accelerate
    } else if fut < lo {
        LongitudinalManeuver::Decelerate
    } else {
        LongitudinalManeuver::Constant
    };
    ManeuverLabel::new(lat, lon)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::trajectory::{AgentState, Context};

    fn window(future_speed_factor: f64, drift: f64) -> SceneWindow {
        let state = |k: i64, speed: f64, y: f64| AgentState {
            agent_id: 1,
            frame: k,
            p: [k as f64, y],
            v: [speed, 0.0],
            ..Default::default()
        };
        let ego_history: Vec<_> = (0..15).map(|k| state(k, 10.0, 0.0)).collect();
        let ego_future = (15..40)
            .map(|k| state(k, 10.0 * future_speed_factor, drift * (k - 14) as f64 / 25.0))
            .collect();
        SceneWindow {
            source: "t".into(),
            ego_id: 1,
            anchor_frame: 14,
            dt: 0.2,
            context: Context::Highway,
            origin: [14.0, 0.0],
            ego_history,
            neighbor_ids: vec![None],
            neighbor_history: vec![vec![AgentState::default(); 15]],
            padding: vec![vec![true; 15]],
            ego_future,
        }
    }

    #[test]
    fn straight_constant_speed_is_sc() {
        let l = extract_maneuver_labels(&window(1.0, 0.0), &LabelConfig::default());
        assert_eq!(l.to_string(), "SC");
    }

    #[test]
    fn left_drift_is_l() {
        let l = extract_maneuver_labels(&window(1.0, 3.5), &LabelConfig::default());
        assert_eq!(l.lat, LateralManeuver::Left);
        let r = extract_maneuver_labels(&window(1.0, -3.5), &LabelConfig::default());
        assert_eq!(r.lat, LateralManeuver::Right);
    }

    #[test]
    fn slower_future_is_d() {
        let l = extract_maneuver_labels(&window(0.9, 0.0), &LabelConfig::default());
        assert_eq!(l.lon, LongitudinalManeuver::Decelerate);
        let l = extract_maneuver_labels(&window(1.1, 0.0), &LabelConfig::default());
        assert_eq!(l.lon, LongitudinalManeuver::Accelerate);
    }

    #[test]
    fn mode_index_round_trips() {
        for i in 0..NUM_MODES {
            assert_eq!(ManeuverLabel::from_mode_index(i).unwrap().mode_index(), i);
        }
        assert!(ManeuverLabel::from_mode_index(NUM_MODES).is_none());
    }

    proptest! {
        #[test]
        fn labels_ignore_global_translation(
            dx in -1e4f64..1e4, dy in -1e4f64..1e4,
            factor in 0.5f64..1.5, drift in -6.0f64..6.0,
        ) {
            let w = window(factor, drift);
            let cfg = LabelConfig::default();
            prop_assert_eq!(
                extract_maneuver_labels(&w, &cfg),
                extract_maneuver_labels(&w.translated([dx, dy]), &cfg)
            );
        }
    }
}
