//! Per-step interaction graphs over a scene window.
//!
//! Node 0 is the ego, nodes `1..` follow the window's neighbor slots, so
//! the ordering is shared by every step of a sequence. Positions are
//! relative to the window origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rss::{safety_envelope, RssParameters};
use crate::trajectory::{AgentState, SceneWindow};

pub const DIG_FEATURES: usize = 9;
pub const DSG_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    /// Intention graph: position, velocity, acceleration and agent type.
    Dig,
    /// Safety graph: position and required RSS distances.
    Dsg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub d_close: f64,
    pub d_close_lon: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            d_close: 25.0,
            d_close_lon: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub kind: GraphKind,
    pub frame: i64,
    pub agent_ids: Vec<Option<i64>>,
    pub node_features: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<bool>>,
    pub valid: Vec<bool>,
}

impl SceneGraph {
    pub fn n_nodes(&self) -> usize {
        self.valid.len()
    }

    pub fn n_edges(&self) -> usize {
        self.adjacency.iter().flatten().filter(|&&e| e).count()
    }

    pub fn feature_dim(&self) -> usize {
        match self.kind {
            GraphKind::Dig => DIG_FEATURES,
            GraphKind::Dsg => DSG_FEATURES,
        }
    }
}

fn check_step(window: &SceneWindow, step: usize) -> Result<()> {
    if step >= window.history_len() {
        return Err(Error::Argument(format!(
            "history step {step} outside window of {} steps",
            window.history_len()
        )));
    }
    Ok(())
}

fn relative(window: &SceneWindow, s: &AgentState) -> [f64; 2] {
    [s.p[0] - window.origin[0], s.p[1] - window.origin[1]]
}

/// Edges between distinct valid nodes whose centers are within `threshold`.
fn adjacency(agents: &[Option<AgentState>], threshold: f64) -> Vec<Vec<bool>> {
    let n = agents.len();
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if let (Some(a), Some(b)) = (&agents[i], &agents[j]) {
                if a.distance_to(b) <= threshold {
                    adj[i][j] = true;
                    adj[j][i] = true;
                }
            }
        }
    }
    adj
}

pub fn build_dig(window: &SceneWindow, step: usize, d_close: f64) -> Result<SceneGraph> {
    check_step(window, step)?;
    let agents = window.agents_at(step);
    let node_features = agents
        .iter()
        .map(|a| match a {
            Some(s) => {
                let p = relative(window, s);
                let mut f = vec![p[0], p[1], s.v[0], s.v[1], s.a[0], s.a[1]];
                f.extend(s.kind.one_hot());
                f
            }
            None => vec![0.0; DIG_FEATURES],
        })
        .collect();
    Ok(SceneGraph {
        kind: GraphKind::Dig,
        frame: window.ego_history[step].frame,
        agent_ids: agent_ids(window),
        node_features,
        adjacency: adjacency(&agents, d_close),
        valid: agents.iter().map(Option::is_some).collect(),
    })
}

pub fn build_dsg(window: &SceneWindow, step: usize, params: &RssParameters, d_close_lon: f64) -> Result<SceneGraph> {
    check_step(window, step)?;
    let agents = window.agents_at(step);
    let present: Vec<AgentState> = agents.iter().flatten().copied().collect();
    let mut node_features = Vec::with_capacity(agents.len());
    for a in &agents {
        node_features.push(match a {
            Some(s) => {
                let env = safety_envelope(s, &present, params)?;
                let p = relative(window, s);
                vec![p[0], p[1], env.d_lon, env.d_lat]
            }
            None => vec![0.0; DSG_FEATURES],
        });
    }
    Ok(SceneGraph {
        kind: GraphKind::Dsg,
        frame: window.ego_history[step].frame,
        agent_ids: agent_ids(window),
        node_features,
        adjacency: adjacency(&agents, d_close_lon),
        valid: agents.iter().map(Option::is_some).collect(),
    })
}

fn agent_ids(window: &SceneWindow) -> Vec<Option<i64>> {
    std::iter::once(Some(window.ego_id))
        .chain(window.neighbor_ids.iter().copied())
        .collect()
}

/// One graph per history step, oldest first.
pub fn graph_sequence(
    window: &SceneWindow,
    kind: GraphKind,
    cfg: &GraphConfig,
    params: &RssParameters,
) -> Result<Vec<SceneGraph>> {
    (0..window.history_len())
        .map(|k| match kind {
            GraphKind::Dig => build_dig(window, k, cfg.d_close),
            GraphKind::Dsg => build_dsg(window, k, params, cfg.d_close_lon),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rss::safe_longitudinal_distance;
    use crate::trajectory::{synthesize_scenes, window_scenes, AgentType, SynthSpec, Track, WindowConfig};

    fn track(id: i64, f: impl Fn(i64) -> ([f64; 2], [f64; 2])) -> Track {
        Track {
            agent_id: id,
            states: (0..79)
                .map(|k| {
                    let (p, v) = f(k);
                    AgentState {
                        agent_id: id,
                        frame: k,
                        p,
                        v,
                        kind: AgentType::Vehicle,
                        lane_id: Some((p[1] / 3.5).floor() as i64),
                        ..Default::default()
                    }
                })
                .collect(),
        }
    }

    fn window_of(tracks: &[Track]) -> SceneWindow {
        window_scenes(tracks, &WindowConfig::default(), "t").unwrap().remove(0)
    }

    fn check_structure(g: &SceneGraph) {
        let n = g.n_nodes();
        for i in 0..n {
            assert!(!g.adjacency[i][i]);
            for j in 0..n {
                assert_eq!(g.adjacency[i][j], g.adjacency[j][i]);
                if !g.valid[i] {
                    assert!(!g.adjacency[i][j]);
                }
            }
        }
    }

    #[test]
    fn dig_edges_follow_the_radius() {
        let w = window_of(&[track(1, |_| ([0.0, 1.0], [0.0; 2])), track(2, |_| ([10.0, 1.0], [0.0; 2]))]);
        let g = build_dig(&w, 14, 25.0).unwrap();
        assert!(g.adjacency[0][1] && g.adjacency[1][0]);
        check_structure(&g);
        let g = build_dig(&w, 14, 5.0).unwrap();
        assert!(!g.adjacency[0][1]);
        assert_eq!(g.node_features[1][..2], [10.0, 0.0]);
        assert_eq!(g.node_features[0][6..], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn lone_agent_has_no_edges() {
        let cfg = WindowConfig {
            n_max: 0,
            ..Default::default()
        };
        let w = window_scenes(&[track(1, |_| ([0.0, 1.0], [0.0; 2]))], &cfg, "t").unwrap().remove(0);
        let g = build_dig(&w, 0, 25.0).unwrap();
        assert_eq!(g.adjacency, vec![vec![false]]);
    }

    #[test]
    fn out_of_range_step_is_an_error() {
        let w = window_of(&[track(1, |_| ([0.0, 1.0], [0.0; 2]))]);
        assert!(build_dig(&w, 15, 25.0).is_err());
    }

    #[test]
    fn dsg_edges_at_two_meters() {
        let w = window_of(&[track(1, |_| ([0.0, 1.0], [0.0; 2])), track(2, |_| ([1.5, 1.0], [0.0; 2]))]);
        let g = build_dsg(&w, 14, &RssParameters::default(), 2.0).unwrap();
        assert!(g.adjacency[0][1]);
        check_structure(&g);
    }

    #[test]
    fn isolated_ego_dsg_features() {
        let p = RssParameters::default();
        let w = window_of(&[track(1, |k| ([k as f64, 1.0], [10.0, 0.0]))]);
        let g = build_dsg(&w, 14, &p, 2.0).unwrap();
        assert_eq!(g.node_features[0], vec![0.0, 0.0, 0.0, p.mu]);
        assert_eq!(g.n_edges(), 0);
    }

    #[test]
    fn dsg_carries_leader_distance() {
        let p = RssParameters::default();
        let w = window_of(&[
            track(1, |k| ([k as f64, 1.0], [20.0, 0.0])),
            track(2, |k| ([20.0 + k as f64, 1.5], [15.0, 0.0])),
        ]);
        let g = build_dsg(&w, 14, &p, 2.0).unwrap();
        assert_eq!(g.node_features[0][2], safe_longitudinal_distance(20.0, 15.0, &p).unwrap());
        // the leader has no leader of its own
        assert_eq!(g.node_features[1][2], 0.0);
    }

    #[test]
    fn sequences_share_node_order_and_track_crossings() {
        // agent 2 starts 40 m ahead and closes in at 1 m per frame
        let w = window_of(&[
            track(1, |_| ([0.0, 1.0], [0.0; 2])),
            track(2, |k| ([40.0 - k as f64, 1.0], [-10.0, 0.0])),
        ]);
        let p = RssParameters::default();
        let seq = graph_sequence(&w, GraphKind::Dig, &GraphConfig::default(), &p).unwrap();
        assert_eq!(seq.len(), 15);
        assert!(seq.iter().all(|g| g.agent_ids == seq[0].agent_ids));
        assert!(!seq[0].adjacency[0][1]);
        assert!(seq[14].adjacency[0][1]);
        let dsg = graph_sequence(&w, GraphKind::Dsg, &GraphConfig::default(), &p).unwrap();
        assert_eq!(dsg.len(), 15);
    }

    proptest! {
        #[test]
        fn graphs_ignore_global_translation(seed in 0u64..50, dx in -500.0f64..500.0, lanes in -3i64..3) {
            let w = synthesize_scenes(&SynthSpec { n_scenes: 1, seed, ..Default::default() }).unwrap().remove(0);
            // shifting y by whole lanes keeps inferred lane ids consistent
            let moved = w.translated([dx, lanes as f64 * 3.5]);
            let p = RssParameters::default();
            for step in [0, 7, 14] {
                let (a, b) = (build_dig(&w, step, 25.0).unwrap(), build_dig(&moved, step, 25.0).unwrap());
                prop_assert_eq!(&a.adjacency, &b.adjacency);
                for (x, y) in a.node_features.iter().flatten().zip(b.node_features.iter().flatten()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                let (a, b) = (build_dsg(&w, step, &p, 2.0).unwrap(), build_dsg(&moved, step, &p, 2.0).unwrap());
                prop_assert_eq!(&a.adjacency, &b.adjacency);
                for (x, y) in a.node_features.iter().flatten().zip(b.node_features.iter().flatten()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
                check_structure(&a);
            }
        }
    }
}
