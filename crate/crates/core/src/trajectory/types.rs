use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentType {
    #[default]
    Vehicle,
    Pedestrian,
    Bicycle,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::Vehicle, AgentType::Pedestrian, AgentType::Bicycle];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AgentType::Vehicle => "vehicle",
            AgentType::Pedestrian => "pedestrian",
            AgentType::Bicycle => "bicycle",
        }
    }
}

impl fmt::Display for AgentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vehicle" | "car" | "truck" | "0" => Ok(AgentType::Vehicle),
            "pedestrian" | "1" => Ok(AgentType::Pedestrian),
            "bicycle" | "cyclist" | "bike" | "2" => Ok(AgentType::Bicycle),
            other => Err(format!("unknown agent type `{other}`")),
        }
    }
}

/// Driving context; selects RSS defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Context {
    #[default]
    Highway,
    Urban,
}

impl FromStr for Context {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "highway" => Ok(Context::Highway),
            "urban" => Ok(Context::Urban),
            other => Err(format!("unknown context `{other}` (expected highway or urban)")),
        }
    }
}

/// One agent at one frame. Positions in meters, velocities in m/s,
/// accelerations in m/s². `+x` is the driving direction, `+y` is left.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: i64,
    pub frame: i64,
    pub p: [f64; 2],
    pub v: [f64; 2],
    pub a: [f64; 2],
    pub kind: AgentType,
    pub lane_id: Option<i64>,
}

impl AgentState {
    pub fn speed(&self) -> f64 {
        self.v[0].hypot(self.v[1])
    }

    pub fn distance_to(&self, other: &AgentState) -> f64 {
        (self.p[0] - other.p[0]).hypot(self.p[1] - other.p[1])
    }
}

/// All states of one agent, strictly increasing in frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub agent_id: i64,
    pub states: Vec<AgentState>,
}

impl Track {
    pub fn state_at(&self, frame: i64) -> Option<&AgentState> {
        self.states
            .binary_search_by_key(&frame, |s| s.frame)
            .ok()
            .map(|i| &self.states[i])
    }

    pub fn first_frame(&self) -> Option<i64> {
        self.states.first().map(|s| s.frame)
    }

    pub fn last_frame(&self) -> Option<i64> {
        self.states.last().map(|s| s.frame)
    }
}

/// Aligned history and future for one ego agent at one anchor frame.
///
/// States are stored in source coordinates; `origin` is the ego position at
/// the anchor, which model features subtract. Neighbor slots are padded to a
/// fixed count; `padding[slot][step]` is set iff that entry is synthetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneWindow {
    pub source: String,
    pub ego_id: i64,
    pub anchor_frame: i64,
    /// Seconds between consecutive window steps (after downsampling).
    pub dt: f64,
    pub context: Context,
    pub origin: [f64; 2],
    pub ego_history: Vec<AgentState>,
    pub neighbor_ids: Vec<Option<i64>>,
    pub neighbor_history: Vec<Vec<AgentState>>,
    pub padding: Vec<Vec<bool>>,
    pub ego_future: Vec<AgentState>,
}

impl SceneWindow {
    pub fn history_len(&self) -> usize {
        self.ego_history.len()
    }

    pub fn future_len(&self) -> usize {
        self.ego_future.len()
    }

    pub fn n_slots(&self) -> usize {
        self.neighbor_history.len()
    }

    pub fn ego_type(&self) -> AgentType {
        self.ego_history.last().map(|s| s.kind).unwrap_or_default()
    }

    /// States of all agents (ego first) at one history step, `None` for
    /// padded slots.
    pub fn agents_at(&self, step: usize) -> Vec<Option<AgentState>> {
        let mut out = Vec::with_capacity(1 + self.n_slots());
        out.push(Some(self.ego_history[step]));
        for (slot, hist) in self.neighbor_history.iter().enumerate() {
            out.push((!self.padding[slot][step]).then_some(hist[step]));
        }
        out
    }

    /// Identifies a window across splits.
    pub fn key(&self) -> (String, i64, i64) {
        (self.source.clone(), self.ego_id, self.anchor_frame)
    }

    /// Ego future positions relative to `origin`.
    pub fn future_relative(&self) -> Vec<[f64; 2]> {
        self.ego_future
            .iter()
            .map(|s| [s.p[0] - self.origin[0], s.p[1] - self.origin[1]])
            .collect()
    }

    /// Shifts every position, including `origin`, by `offset`.
    pub fn translated(&self, offset: [f64; 2]) -> SceneWindow {
        let mut w = self.clone();
        let shift = |s: &mut AgentState| {
            s.p[0] += offset[0];
            s.p[1] += offset[1];
        };
        w.origin[0] += offset[0];
        w.origin[1] += offset[1];
        w.ego_history.iter_mut().for_each(shift);
        w.ego_future.iter_mut().for_each(shift);
        for (slot, hist) in w.neighbor_history.iter_mut().enumerate() {
            for (step, s) in hist.iter_mut().enumerate() {
                if !self.padding[slot][step] {
                    shift(s);
                }
            }
        }
        w
    }
}

/// Train/validation/test partition of windows.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<SceneWindow>,
    pub val: Vec<SceneWindow>,
    pub test: Vec<SceneWindow>,
    pub seed: u64,
}
