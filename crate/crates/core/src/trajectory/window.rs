use serde::{Deserialize, Serialize};

use super::{AgentState, Context, SceneWindow, Track};
use crate::error::{Error, Result};

/// Window geometry. Durations are in seconds of source time; `stride` is in
/// raw frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub history_s: f64,
    pub future_s: f64,
    pub frame_rate_hz: f64,
    pub downsample: usize,
    pub stride: usize,
    pub d_close: f64,
    pub n_max: usize,
    pub context: Context,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            history_s: 3.0,
            future_s: 5.0,
            frame_rate_hz: 10.0,
            downsample: 2,
            stride: 10,
            d_close: 25.0,
            n_max: 8,
            context: Context::Highway,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.history_s) || !positive(self.future_s) || !positive(self.frame_rate_hz) {
            return Err(Error::Config("window durations and frame rate must be positive".into()));
        }
        if self.downsample == 0 || self.stride == 0 {
            return Err(Error::Config("downsample and stride must be at least 1".into()));
        }
        if !(self.d_close >= 0.0) {
            return Err(Error::Config("d_close must be non-negative".into()));
        }
        if self.history_steps() == 0 || self.future_steps() == 0 {
            return Err(Error::Config("window must contain at least one history and one future step".into()));
        }
        Ok(())
    }

    fn steps(&self, seconds: f64) -> usize {
        (seconds * self.frame_rate_hz / self.downsample as f64).round() as usize
    }

    pub fn history_steps(&self) -> usize {
        self.steps(self.history_s)
    }

    pub fn future_steps(&self) -> usize {
        self.steps(self.future_s)
    }

    /// Seconds between consecutive window steps.
    pub fn step_dt(&self) -> f64 {
        self.downsample as f64 / self.frame_rate_hz
    }

    /// Raw frames before the anchor needed for the history.
    pub fn lookback_frames(&self) -> i64 {
        ((self.history_steps() - 1) * self.downsample) as i64
    }

    /// Raw frames after the anchor needed for the future.
    pub fn lookahead_frames(&self) -> i64 {
        (self.future_steps() * self.downsample) as i64
    }
}

/// Cuts every `(ego, anchor)` window that has a complete history and
/// future. The history ends at the anchor frame; the future starts one
/// decimated step later.
pub fn window_scenes(tracks: &[Track], cfg: &WindowConfig, source: &str) -> Result<Vec<SceneWindow>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for ego in tracks {
        let (Some(first), Some(last)) = (ego.first_frame(), ego.last_frame()) else {
            continue;
        };
        let mut anchor = first + cfg.lookback_frames();
        while anchor + cfg.lookahead_frames() <= last {
            if let Some(w) = build_window(tracks, ego, anchor, cfg, source) {
                out.push(w);
            }
            anchor += cfg.stride as i64;
        }
    }
    Ok(out)
}

/// Builds the window for one ego at one anchor, or `None` if a required
/// ego frame is missing.
pub fn build_window(
    tracks: &[Track],
    ego: &Track,
    anchor: i64,
    cfg: &WindowConfig,
    source: &str,
) -> Option<SceneWindow> {
    let ds = cfg.downsample as i64;
    let th = cfg.history_steps() as i64;
    let tf = cfg.future_steps() as i64;
    let history_frames: Vec<i64> = (0..th).map(|k| anchor - (th - 1 - k) * ds).collect();
    let ego_history: Vec<AgentState> = history_frames
        .iter()
        .map(|&f| ego.state_at(f).copied())
        .collect::<Option<_>>()?;
    let ego_future: Vec<AgentState> = (1..=tf)
        .map(|k| ego.state_at(anchor + k * ds).copied())
        .collect::<Option<_>>()?;
    let here = *ego_history.last()?;

    let mut candidates: Vec<(f64, i64, &Track)> = tracks
        .iter()
        .filter(|t| t.agent_id != ego.agent_id)
        .filter_map(|t| {
            let s = t.state_at(anchor)?;
            let d = s.distance_to(&here);
            (d <= cfg.d_close).then_some((d, t.agent_id, t))
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(cfg.n_max);

    let mut neighbor_ids = vec![None; cfg.n_max];
    let mut neighbor_history = vec![vec![AgentState::default(); th as usize]; cfg.n_max];
    let mut padding = vec![vec![true; th as usize]; cfg.n_max];
    for (slot, (_, id, track)) in candidates.iter().enumerate() {
        neighbor_ids[slot] = Some(*id);
        for (step, &f) in history_frames.iter().enumerate() {
            if let Some(s) = track.state_at(f) {
                neighbor_history[slot][step] = *s;
                padding[slot][step] = false;
            }
        }
    }

    Some(SceneWindow {
        source: source.to_string(),
        ego_id: ego.agent_id,
        anchor_frame: anchor,
        dt: cfg.step_dt(),
        context: cfg.context,
        origin: here.p,
        ego_history,
        neighbor_ids,
        neighbor_history,
        padding,
        ego_future,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::AgentType;

    fn straight_track(id: i64, y: f64, frames: std::ops::Range<i64>) -> Track {
        Track {
            agent_id: id,
            states: frames
                .map(|f| AgentState {
                    agent_id: id,
                    frame: f,
                    p: [f as f64, y],
                    v: [10.0, 0.0],
                    kind: AgentType::Vehicle,
                    lane_id: Some(1),
                    ..Default::default()
                })
                .collect(),
        }
    }

    #[test]
    fn step_counts_at_ten_hertz_with_decimation() {
        let cfg = WindowConfig::default();
        assert_eq!(cfg.history_steps(), 15);
        assert_eq!(cfg.future_steps(), 25);
        let tracks = vec![straight_track(1, 0.0, 0..79)];
        let w = window_scenes(&tracks, &cfg, "t").unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].history_len(), 15);
        assert_eq!(w[0].future_len(), 25);
        assert_eq!(w[0].anchor_frame, 28);
        assert_eq!(w[0].ego_future[0].frame, 30);
    }

    #[test]
    fn isolated_agent_has_all_slots_padded() {
        let cfg = WindowConfig::default();
        let w = window_scenes(&[straight_track(1, 0.0, 0..79)], &cfg, "t").unwrap();
        assert!(w[0].neighbor_ids.iter().all(Option::is_none));
        assert!(w[0].padding.iter().flatten().all(|&p| p));
    }

    #[test]
    fn agents_ten_meters_apart_see_each_other() {
        let cfg = WindowConfig::default();
        let tracks = vec![straight_track(1, 0.0, 0..79), straight_track(2, 10.0, 0..79)];
        let w = window_scenes(&tracks, &cfg, "t").unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].neighbor_ids[0], Some(2));
        assert_eq!(w[1].neighbor_ids[0], Some(1));
        assert!(w[0].padding[0].iter().all(|&p| !p));
    }

    #[test]
    fn neighbors_are_ordered_by_distance_then_id() {
        let cfg = WindowConfig {
            n_max: 2,
            ..Default::default()
        };
        let tracks = vec![
            straight_track(1, 0.0, 0..79),
            straight_track(5, 8.0, 0..79),
            straight_track(3, -8.0, 0..79),
            straight_track(2, 4.0, 0..79),
        ];
        let w = window_scenes(&tracks, &cfg, "t").unwrap();
        assert_eq!(w[0].neighbor_ids, vec![Some(2), Some(3)]);
    }

    #[test]
    fn late_neighbor_is_padded_before_it_appears() {
        let cfg = WindowConfig::default();
        let tracks = vec![straight_track(1, 0.0, 0..79), straight_track(2, 3.0, 20..79)];
        let w = &window_scenes(&tracks, &cfg, "t").unwrap()[0];
        // history frames are 0, 2, ..., 28; the neighbor starts at 20
        let expected: Vec<bool> = (0..15).map(|k| 2 * k < 20).collect();
        assert_eq!(w.padding[0], expected);
    }

    #[test]
    fn history_reproduces_source_positions() {
        let cfg = WindowConfig {
            stride: 3,
            ..Default::default()
        };
        let mut track = straight_track(1, 0.0, 0..120);
        for s in &mut track.states {
            s.p = [(s.frame as f64 * 0.37).sin() * 5.0, s.frame as f64 * 0.013];
        }
        let windows = window_scenes(std::slice::from_ref(&track), &cfg, "t").unwrap();
        assert!(windows.len() > 5);
        for w in windows {
            for s in w.ego_history.iter().chain(&w.ego_future) {
                assert_eq!(s.p, track.state_at(s.frame).unwrap().p);
            }
        }
    }
}
