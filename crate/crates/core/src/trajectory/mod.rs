//! Trajectory logs, synthetic scenes, windowing, maneuver labels and
//! dataset splits.

pub mod labels;
pub mod loader;
pub mod split;
pub mod synth;
mod types;
pub mod window;

pub use labels::{
    extract_maneuver_labels, LabelConfig, LateralManeuver, LongitudinalManeuver, ManeuverLabel, NUM_MODES,
};
pub use loader::{load_trajectories, write_ngsim_csv, LoadReport, TrajectoryFormat};
pub use split::{split_windows, SplitConfig};
pub use synth::{synthesize_scenes, synthesize_tracks, ManeuverMix, SynthSpec, SyntheticScene};
pub use types::{AgentState, AgentType, Context, DatasetSplit, SceneWindow, Track};
pub use window::{build_window, window_scenes, WindowConfig};
