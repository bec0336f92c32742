use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gat::GatStackConfig;
use crate::graph::GraphConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Full,
    /// One attention stack over merged intention and safety features, no
    /// temporal safety encoder.
    Small,
}

/// Component switches. Every flag off is the complete model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// A: intention features replaced by zeros.
    pub no_intention: bool,
    /// B: safety graph features replaced by zeros.
    pub no_safety_spatial: bool,
    /// C: temporal safety encoder replaced by a per-step MLP.
    pub no_safety_temporal: bool,
    /// D: single-mode decoder without maneuver prediction.
    pub no_maneuver: bool,
    /// E: fusion attention replaced by a convolution.
    pub conv_fusion: bool,
    /// F: no graph uncertainty noise.
    pub no_guf: bool,
    /// RSS distances zeroed in every input.
    pub no_rss: bool,
}

impl Ablation {
    /// The named method: `A`..`F` switch one component off, `G` is the full
    /// model and `RSS` removes the safety distances.
    pub fn method(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name.trim().to_ascii_uppercase().as_str() {
            "A" => a.no_intention = true,
            "B" => a.no_safety_spatial = true,
            "C" => a.no_safety_temporal = true,
            "D" => a.no_maneuver = true,
            "E" => a.conv_fusion = true,
            "F" => a.no_guf = true,
            "G" => {}
            "RSS" | "NO_RSS" => a.no_rss = true,
            other => return Err(Error::Config(format!("unknown ablation method `{other}`"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let flags = [
            (self.no_intention, "A"),
            (self.no_safety_spatial, "B"),
            (self.no_safety_temporal, "C"),
            (self.no_maneuver, "D"),
            (self.conv_fusion, "E"),
            (self.no_guf, "F"),
            (self.no_rss, "no_rss"),
        ];
        let on: Vec<&str> = flags.iter().filter(|f| f.0).map(|f| f.1).collect();
        if on.is_empty() {
            "G".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub fusion_heads: usize,
    pub gat_heads: usize,
    pub second_gat_heads: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub guf_init_log_sigma: f64,
    pub guf_at_inference: bool,
    pub d_close: f64,
    pub d_close_lon: f64,
    /// Multiplier on the decoder's mean offsets from the constant-velocity
    /// anchor, m.
    pub output_scale: f64,
    pub variant: Variant,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            fusion_heads: 4,
            gat_heads: 2,
            second_gat_heads: 1,
            dropout: 0.1,
            bn_momentum: 0.1,
            guf_init_log_sigma: -3.0,
            guf_at_inference: false,
            d_close: 25.0,
            d_close_lon: 2.0,
            output_scale: 10.0,
            variant: Variant::Full,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.fusion_heads == 0 || self.gat_heads == 0 || self.second_gat_heads == 0 {
            return bad("hidden size and head counts must be positive".into());
        }
        if self.hidden % self.fusion_heads != 0 {
            return bad(format!(
                "hidden size {} is not divisible by {} fusion heads",
                self.hidden, self.fusion_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("bn_momentum must lie in (0, 1], got {}", self.bn_momentum));
        }
        if !(self.d_close > 0.0 && self.d_close_lon > 0.0) {
            return bad("graph radii must be positive".into());
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return bad("output_scale must be positive".into());
        }
        if self.guf_init_log_sigma.is_nan() {
            return bad("guf_init_log_sigma must not be NaN".into());
        }
        let a = &self.ablation;
        if self.variant == Variant::Small && (a.no_intention || a.no_safety_spatial || a.no_safety_temporal) {
            return bad("the small variant has no separate intention, spatial or temporal encoder to ablate".into());
        }
        Ok(())
    }

    pub fn gat_stack(&self) -> GatStackConfig {
        GatStackConfig {
            heads: self.gat_heads,
            second_heads: self.second_gat_heads,
            dropout: self.dropout,
            bn_momentum: self.bn_momentum,
            guf: !self.ablation.no_guf,
            guf_init_log_sigma: self.guf_init_log_sigma,
            guf_at_inference: self.guf_at_inference,
        }
    }

    pub fn graph(&self) -> GraphConfig {
        GraphConfig {
            d_close: self.d_close,
            d_close_lon: self.d_close_lon,
        }
    }
}

/// Window geometry the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub history_steps: usize,
    pub future_steps: usize,
    /// Nodes per graph: ego plus neighbor slots.
    pub nodes: usize,
    /// Seconds per step.
    pub dt: f64,
}
