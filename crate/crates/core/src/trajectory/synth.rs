//! Synthetic highway scenes with known maneuvers.
//!
//! Every scene occupies its own frame range. The ego starts in the middle of
//! three 3.5 m lanes; its maneuver starts up to one second before the
//! anchor so that the history carries a cue. Neighbors drive at constant
//! velocity unless the scene is a braking-leader scene, in which case the
//! leader brakes and the ego brakes whenever its gap falls below the RSS
//! longitudinal distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labels::{LateralManeuver, LongitudinalManeuver, ManeuverLabel};
use super::window::{build_window, WindowConfig};
use super::{AgentState, AgentType, SceneWindow, Track};
use crate::error::{Error, Result};
use crate::rss::{safe_longitudinal_distance, RssParameters, LANE_WIDTH};

/// Relative weights of each maneuver class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManeuverMix {
    /// Weights for S, R, L.
    pub lateral: [f64; 3],
    /// Weights for A, D, C.
    pub longitudinal: [f64; 3],
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            lateral: [0.6, 0.2, 0.2],
            longitudinal: [0.25, 0.25, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_scenes: usize,
    /// Agents per scene, ego included.
    pub n_agents: usize,
    pub maneuver_mix: ManeuverMix,
    /// Standard deviation of Gaussian position noise, m.
    pub noise_std: f64,
    /// Fraction of scenes with a braking leader ahead of the ego.
    pub braking_fraction: f64,
    /// Weights for vehicle, pedestrian, bicycle egos.
    pub ego_type_mix: [f64; 3],
    pub speed_range: [f64; 2],
    pub seed: u64,
    pub window: WindowConfig,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_agents: 4,
            maneuver_mix: ManeuverMix::default(),
            noise_std: 0.05,
            braking_fraction: 0.1,
            ego_type_mix: [1.0, 0.0, 0.0],
            speed_range: [8.0, 20.0],
            seed: 0,
            window: WindowConfig::default(),
        }
    }
}

/// One generated scene before windowing.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub tracks: Vec<Track>,
    pub ego_id: i64,
    pub anchor_frame: i64,
    /// The maneuver the ego was scripted to perform.
    pub intended: ManeuverLabel,
    pub braking_leader: bool,
}

const FRAMES_PER_SCENE: i64 = 10_000;
const MIDDLE_LANE: i64 = 1;

fn lane_center(lane: i64) -> f64 {
    (lane as f64 + 0.5) * LANE_WIDTH
}

fn weighted(rng: &mut ChaCha8Rng, w: &[f64; 3], what: &str) -> Result<usize> {
    WeightedIndex::new(w)
        .map(|d| d.sample(rng))
        .map_err(|e| Error::Config(format!("invalid {what} weights: {e}")))
}

/// Closed-form motion along one axis.
#[derive(Clone, Copy, Debug)]
enum Profile {
    /// Constant velocity until `start`, then constant acceleration `acc`;
    /// the speed never crosses zero.
    Ramp { x0: f64, v0: f64, start: f64, acc: f64 },
    /// Cosine blend from `y0` to `y0 + delta` over `[start, start + dur]`.
    Blend { y0: f64, delta: f64, start: f64, dur: f64 },
}

impl Profile {
    /// Position, velocity and acceleration at time `t` (s, relative to the
    /// anchor).
    fn eval(self, t: f64) -> [f64; 3] {
        match self {
            Profile::Ramp { x0, v0, start, acc } => {
                if t <= start || acc == 0.0 {
                    return [x0 + v0 * t, v0, 0.0];
                }
                let x_start = x0 + v0 * start;
                let tau = t - start;
                let t_stop = if acc < 0.0 { v0 / -acc } else { f64::INFINITY };
                if tau >= t_stop {
                    [x_start + v0 * t_stop + 0.5 * acc * t_stop * t_stop, 0.0, 0.0]
                } else {
                    [x_start + v0 * tau + 0.5 * acc * tau * tau, v0 + acc * tau, acc]
                }
            }
            Profile::Blend { y0, delta, start, dur } => {
                if t <= start {
                    return [y0, 0.0, 0.0];
                }
                if t >= start + dur {
                    return [y0 + delta, 0.0, 0.0];
                }
                let w = std::f64::consts::PI / dur;
                let ph = w * (t - start);
                [
                    y0 + delta * (1.0 - ph.cos()) / 2.0,
                    delta * w * ph.sin() / 2.0,
                    delta * w * w * ph.cos() / 2.0,
                ]
            }
        }
    }
}

/// Generates raw scenes; `synthesize_scenes` windows them.
pub fn synthesize_tracks(spec: &SynthSpec) -> Result<Vec<SyntheticScene>> {
    if spec.n_agents == 0 {
        return Err(Error::Config("synthetic scenes need at least one agent".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config("noise_std must be finite and non-negative".into()));
    }
    if !(spec.speed_range[0] > 0.0 && spec.speed_range[0] <= spec.speed_range[1]) {
        return Err(Error::Config("speed_range must be positive and ordered".into()));
    }
    spec.window.validate()?;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("invalid noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cfg = &spec.window;
    let rate = cfg.frame_rate_hz;
    let rss = RssParameters::for_context(cfg.context);

    let mut scenes = Vec::with_capacity(spec.n_scenes);
    for scene in 0..spec.n_scenes {
        let base = scene as i64 * FRAMES_PER_SCENE;
        let anchor = base + cfg.lookback_frames();
        let last = anchor + cfg.lookahead_frames();
        let time = |f: i64| (f - anchor) as f64 / rate;
        let ego_id = scene as i64 * 100;

        let kind = AgentType::ALL[weighted(&mut rng, &spec.ego_type_mix, "ego type")?];
        let (speed_scale, acc_scale) = match kind {
            AgentType::Vehicle => (1.0, 1.0),
            AgentType::Bicycle => (0.4, 0.5),
            AgentType::Pedestrian => (0.1, 0.3),
        };
        let v0 = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]) * speed_scale;
        let braking = spec.n_agents >= 2 && rng.random_bool(spec.braking_fraction.clamp(0.0, 1.0));

        let mut lat = LateralManeuver::from_index(weighted(&mut rng, &spec.maneuver_mix.lateral, "lateral")?)
            .expect("index below 3");
        let mut lon = LongitudinalManeuver::from_index(weighted(&mut rng, &spec.maneuver_mix.longitudinal, "longitudinal")?)
            .expect("index below 3");
        if kind != AgentType::Vehicle || braking {
            lat = LateralManeuver::Straight;
        }
        if braking {
            lon = LongitudinalManeuver::Decelerate;
        }

        let x0 = 0.0;
        let y0 = lane_center(MIDDLE_LANE);
        let lon_start = rng.random_range(-1.0..=0.0);
        let acc = match lon {
            LongitudinalManeuver::Accelerate => rng.random_range(1.5..=2.5) * acc_scale,
            LongitudinalManeuver::Decelerate => -rng.random_range(2.0..=4.0) * acc_scale,
            LongitudinalManeuver::Constant => 0.0,
        };
        let lat_profile = {
            let dir = match lat {
                LateralManeuver::Straight => 0.0,
                LateralManeuver::Left => 1.0,
                LateralManeuver::Right => -1.0,
            };
            Profile::Blend {
                y0,
                delta: dir * (LANE_WIDTH + rng.random_range(0.05..=0.25)),
                start: rng.random_range(-1.0..=0.0),
                dur: rng.random_range(3.0..=4.0),
            }
        };

        let frames: Vec<i64> = (base..=last).collect();
        let mut tracks = Vec::with_capacity(spec.n_agents);

        // leader for braking scenes, then free neighbors
        let mut leader_states: Option<Vec<AgentState>> = None;
        if braking {
            let gap0 = safe_longitudinal_distance(v0, v0, &rss)? * rng.random_range(1.0..=1.5);
            let profile = Profile::Ramp {
                x0: x0 + gap0,
                v0,
                start: rng.random_range(-1.5..=-0.5),
                acc: -rng.random_range(3.0..=5.0),
            };
            leader_states = Some(
                frames
                    .iter()
                    .map(|&f| {
                        let [x, vx, ax] = profile.eval(time(f));
                        AgentState {
                            agent_id: ego_id + 1,
                            frame: f,
                            p: [x, y0],
                            v: [vx, 0.0],
                            a: [ax, 0.0],
                            kind: AgentType::Vehicle,
                            lane_id: Some(MIDDLE_LANE),
                        }
                    })
                    .collect(),
            );
        }

        let ego_states: Vec<AgentState> = if let Some(leader) = &leader_states {
            // stepwise: brake at `b` whenever the gap is short of the RSS distance
            let b = -acc;
            let dt = 1.0 / rate;
            let t_first = time(base);
            let mut x = x0 + v0 * t_first;
            let mut v = v0;
            let mut out = Vec::with_capacity(frames.len());
            for (k, &f) in frames.iter().enumerate() {
                let l = &leader[k];
                let gap = l.p[0] - x;
                let need = safe_longitudinal_distance(v, l.v[0], &rss)?;
                let mut a = if gap < need && v > 0.0 { -b } else { 0.0 };
                if a < 0.0 && v + a * dt < 0.0 {
                    a = -v / dt;
                }
                out.push(AgentState {
                    agent_id: ego_id,
                    frame: f,
                    p: [x, y0],
                    v: [v, 0.0],
                    a: [a, 0.0],
                    kind,
                    lane_id: Some(MIDDLE_LANE),
                });
                x += v * dt + 0.5 * a * dt * dt;
                v += a * dt;
            }
            out
        } else {
            let lon_profile = Profile::Ramp {
                x0,
                v0,
                start: lon_start,
                acc,
            };
            frames
                .iter()
                .map(|&f| {
                    let t = time(f);
                    let [x, vx, ax] = lon_profile.eval(t);
                    let [y, vy, ay] = lat_profile.eval(t);
                    AgentState {
                        agent_id: ego_id,
                        frame: f,
                        p: [x, y],
                        v: [vx, vy],
                        a: [ax, ay],
                        kind,
                        lane_id: Some((y / LANE_WIDTH).floor() as i64),
                    }
                })
                .collect()
        };
        tracks.push(Track {
            agent_id: ego_id,
            states: ego_states,
        });
        if let Some(states) = leader_states {
            tracks.push(Track {
                agent_id: ego_id + 1,
                states,
            });
        }

        let mut placed: Vec<(i64, f64)> = vec![(MIDDLE_LANE, x0)];
        while tracks.len() < spec.n_agents {
            let id = ego_id + tracks.len() as i64;
            let lane = rng.random_range(0..3i64);
            let mut x_anchor = rng.random_range(-30.0..=30.0);
            // keep 8 m between agents sharing a lane at the anchor
            for _ in 0..20 {
                if placed.iter().all(|&(l, x)| l != lane || (x - x_anchor).abs() >= 8.0) {
                    break;
                }
                x_anchor = rng.random_range(-30.0..=30.0);
            }
            placed.push((lane, x_anchor));
            let vx = (v0 + rng.random_range(-3.0..=3.0)).max(0.5);
            let y = lane_center(lane);
            tracks.push(Track {
                agent_id: id,
                states: frames
                    .iter()
                    .map(|&f| AgentState {
                        agent_id: id,
                        frame: f,
                        p: [x_anchor + vx * time(f), y],
                        v: [vx, 0.0],
                        a: [0.0, 0.0],
                        kind: AgentType::Vehicle,
                        lane_id: Some(lane),
                    })
                    .collect(),
            });
        }

        if spec.noise_std > 0.0 {
            for t in &mut tracks {
                for s in &mut t.states {
                    s.p[0] += noise.sample(&mut rng);
                    s.p[1] += noise.sample(&mut rng);
                }
            }
        }

        scenes.push(SyntheticScene {
            tracks,
            ego_id,
            anchor_frame: anchor,
            intended: ManeuverLabel::new(lat, lon),
            braking_leader: braking,
        });
    }
    Ok(scenes)
}

/// One ego window per generated scene.
pub fn synthesize_scenes(spec: &SynthSpec) -> Result<Vec<SceneWindow>> {
    let source = format!("synthetic:{}", spec.seed);
    synthesize_tracks(spec)?
        .iter()
        .map(|s| {
            build_window(&s.tracks, &s.tracks[0], s.anchor_frame, &spec.window, &source)
                .ok_or_else(|| Error::Inference("generated scene lacks a complete ego window".into()))
        })
        .collect()
}
