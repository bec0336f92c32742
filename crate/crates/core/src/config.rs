//! Run configuration and dataset assembly shared by the commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{prepare_sample, ModelConfig, ModelDims, Sample};
use crate::rss::{estimate_parameters, RssParameters};
use crate::train::TrainConfig;
use crate::trajectory::{
    build_window, load_trajectories, split_windows, synthesize_tracks, window_scenes, DatasetSplit, LabelConfig, SceneWindow,
    SplitConfig, SynthSpec, Track, TrajectoryFormat, WindowConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Trajectory files; relative paths resolve against the config file.
    pub paths: Vec<PathBuf>,
    pub format: TrajectoryFormat,
    pub frame_rate_hz: f64,
    pub window: WindowConfig,
    pub split: SplitConfig,
    pub labels: LabelConfig,
    /// Generates scenes instead of reading `paths`. Its `window` and `seed`
    /// are replaced by the ones in this section.
    pub synthetic: Option<SynthSpec>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            paths: Vec::new(),
            format: TrajectoryFormat::NgsimCsv,
            frame_rate_hz: 10.0,
            window: WindowConfig::default(),
            split: SplitConfig::default(),
            labels: LabelConfig::default(),
            synthetic: None,
            seed: 0,
        }
    }
}

/// `"estimate"` fits parameters to all loaded tracks; an object gives
/// them explicitly. Absent means the context defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RssChoice {
    Keyword(RssKeyword),
    Params(RssParameters),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RssKeyword {
    Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub rss: Option<RssChoice>,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            rss: None,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Parses JSON, reporting the line and column of any schema error.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))
}

impl RunConfig {
    /// Reads and fully validates a config file. Relative data paths become
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = parse_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in &mut cfg.data.paths {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        d.window.validate()?;
        if !(d.frame_rate_hz > 0.0) {
            return Err(Error::Config("data.frame_rate_hz must be positive".into()));
        }
        if (d.frame_rate_hz - d.window.frame_rate_hz).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "data.frame_rate_hz {} disagrees with data.window.frame_rate_hz {}",
                d.frame_rate_hz, d.window.frame_rate_hz
            )));
        }
        let fr = [d.split.train, d.split.val, d.split.test];
        if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || fr.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("data.split fractions must be non-negative with a positive sum".into()));
        }
        match (&d.synthetic, d.paths.is_empty()) {
            (None, true) => return Err(Error::Config("data needs `paths` or a `synthetic` spec".into())),
            (Some(_), false) => return Err(Error::Config("data.paths and data.synthetic are exclusive".into())),
            (Some(s), true) if s.n_scenes == 0 || s.n_agents == 0 => {
                return Err(Error::Config("data.synthetic needs at least one scene and agent".into()));
            }
            _ => {}
        }
        for p in &d.paths {
            if !p.is_file() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(RssChoice::Params(p)) = &self.rss {
            p.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn dims(&self) -> ModelDims {
        let w = &self.data.window;
        ModelDims {
            history_steps: w.history_steps(),
            future_steps: w.future_steps(),
            nodes: w.n_max + 1,
            dt: w.step_dt(),
        }
    }
}

/// Windows, their split, the source tracks and the resolved RSS parameters.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub windows: Vec<SceneWindow>,
    pub split: DatasetSplit,
    pub tracks: Vec<Track>,
    pub rss: RssParameters,
    pub rss_warning: Option<String>,
}

impl Dataset {
    /// Loads or generates tracks, windows them and splits deterministically.
    /// `rss_override` (for example from a checkpoint) wins over the config.
    pub fn build(cfg: &RunConfig, rss_override: Option<RssParameters>) -> Result<Self> {
        let d = &cfg.data;
        let mut tracks = Vec::new();
        let mut windows = Vec::new();
        if let Some(spec) = &d.synthetic {
            let spec = SynthSpec {
                window: d.window.clone(),
                seed: d.seed,
                ..spec.clone()
            };
            let source = format!("synthetic:{}", spec.seed);
            for scene in synthesize_tracks(&spec)? {
                let w = build_window(&scene.tracks, &scene.tracks[0], scene.anchor_frame, &spec.window, &source)
                    .ok_or_else(|| Error::Inference("generated scene lacks a complete ego window".into()))?;
                windows.push(w);
                tracks.extend(scene.tracks);
            }
        } else {
            for path in &d.paths {
                let report = load_trajectories(path, d.format, d.frame_rate_hz)?;
                if report.skipped_rows > 0 {
                    log::warn!("{}: skipped {} malformed rows", path.display(), report.skipped_rows);
                }
                let source = path.display().to_string();
                windows.extend(window_scenes(&report.tracks, &d.window, &source)?);
                tracks.extend(report.tracks);
            }
        }
        if windows.is_empty() {
            return Err(Error::EmptyInput("no complete windows in the data".into()));
        }
        let (rss, rss_warning) = match (rss_override, &cfg.rss) {
            (Some(p), _) => (p, None),
            (None, Some(RssChoice::Params(p))) => (p.clone(), None),
            (None, Some(RssChoice::Keyword(RssKeyword::Estimate))) => {
                let est = estimate_parameters(&tracks, d.window.context);
                (est.params, est.warning)
            }
            (None, None) => (RssParameters::for_context(d.window.context), None),
        };
        if let Some(w) = &rss_warning {
            log::warn!("rss estimation: {w}");
        }
        let split = split_windows(windows.clone(), &d.split, d.seed)?;
        Ok(Self {
            windows,
            split,
            tracks,
            rss,
            rss_warning,
        })
    }

    pub fn samples(&self, windows: &[SceneWindow], cfg: &RunConfig) -> Result<Vec<Sample>> {
        windows
            .iter()
            .map(|w| prepare_sample(w, &self.rss, &cfg.model.graph(), &cfg.data.labels))
            .collect()
    }
}
