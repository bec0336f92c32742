use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, ModelDims, Variant};
use super::distribution::ForecastDistribution;
use super::input::{Batch, MERGED_FEATURES, TEMPORAL_FEATURES};
use crate::error::{Error, Result};
use crate::gat::{GraphBatch, UncertaintyGat};
use crate::graph::{DIG_FEATURES, DSG_FEATURES};
use crate::numeric::{Array, Checkpoint, Conv2d, LayerNorm, Linear, LstmCell, ParamStore, Session, Var};
use crate::trajectory::{ManeuverLabel, NUM_MODES};

/// Keeps the correlation strictly inside (-1, 1) when tanh saturates.
pub const CORR_LIMIT: f64 = 1.0 - 1e-6;

/// Which maneuver modes the decoder evaluates.
#[derive(Clone, Copy, Debug)]
pub enum DecodeModes<'a> {
    /// All nine modes; trajectories are `[9, B, t_f, 5]`.
    All,
    /// One mode per sample; trajectories are `[B, t_f, 5]`.
    Given(&'a [ManeuverLabel]),
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, 3]`.
    pub lat_probs: Var,
    /// `[B, 3]`.
    pub lon_probs: Var,
    pub trajectories: Var,
    /// Per-head fusion attention `[B*heads, T, T]`, when attention is used.
    pub fusion_attention: Option<Var>,
    /// False when the probabilities are fixed uniform constants.
    pub predicts_maneuvers: bool,
}

#[derive(Clone, Debug)]
enum TemporalEncoder {
    Lstm { embed: Linear, lstm: LstmCell },
    Mlp { first: Linear, second: Linear },
}

#[derive(Clone, Debug)]
enum Mixer {
    Attention { q: Linear, k: Linear, v: Linear },
    Conv(Conv2d),
}

#[derive(Clone, Debug)]
struct Decoder {
    lat_head: Option<Linear>,
    lon_head: Option<Linear>,
    embed: Linear,
    lstm: LstmCell,
    out: Linear,
}

/// The trajectory forecaster: graph encoders, fusion and the
/// maneuver-conditioned Gaussian decoder.
#[derive(Clone, Debug)]
pub struct Forecaster {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    intention: Option<UncertaintyGat>,
    safety: Option<UncertaintyGat>,
    merged: Option<UncertaintyGat>,
    temporal: Option<TemporalEncoder>,
    grid_conv: Option<Conv2d>,
    grid_mlp: Option<Linear>,
    mixer: Mixer,
    glu_proj: Linear,
    norm: LayerNorm,
    decoder: Decoder,
}

impl Forecaster {
    pub fn new(config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.history_steps == 0 || dims.future_steps == 0 || dims.nodes == 0 || !(dims.dt > 0.0) {
            return Err(Error::Config(format!("invalid model dimensions {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = config.hidden;
        let ab = &config.ablation;
        let stack = config.gat_stack();
        let full = config.variant == Variant::Full;

        let intention = (full && !ab.no_intention)
            .then(|| UncertaintyGat::new(&mut p, "intention", DIG_FEATURES, c, &stack, &mut rng))
            .transpose()?;
        let safety = (full && !ab.no_safety_spatial)
            .then(|| UncertaintyGat::new(&mut p, "safety", DSG_FEATURES, c, &stack, &mut rng))
            .transpose()?;
        let merged = (!full)
            .then(|| UncertaintyGat::new(&mut p, "merged", MERGED_FEATURES, c, &stack, &mut rng))
            .transpose()?;
        let temporal = if !full {
            None
        } else if ab.no_safety_temporal {
            Some(TemporalEncoder::Mlp {
                first: Linear::new(&mut p, "temporal.mlp1", TEMPORAL_FEATURES, c, true, &mut rng)?,
                second: Linear::new(&mut p, "temporal.mlp2", c, c, true, &mut rng)?,
            })
        } else {
            Some(TemporalEncoder::Lstm {
                embed: Linear::new(&mut p, "temporal.embed", TEMPORAL_FEATURES, c, true, &mut rng)?,
                lstm: LstmCell::new(&mut p, "temporal.lstm", c, c, &mut rng)?,
            })
        };
        let grid_conv = full
            .then(|| Conv2d::new(&mut p, "fusion.grid_conv", 2 * c, c, 3, &mut rng))
            .transpose()?;
        let grid_mlp = full
            .then(|| Linear::new(&mut p, "fusion.grid_mlp", c, c, true, &mut rng))
            .transpose()?;
        let mixer = if ab.conv_fusion {
            Mixer::Conv(Conv2d::new(&mut p, "fusion.mix_conv", 2 * c, c, 3, &mut rng)?)
        } else {
            Mixer::Attention {
                q: Linear::new(&mut p, "fusion.query", c, c, false, &mut rng)?,
                k: Linear::new(&mut p, "fusion.key", c, c, false, &mut rng)?,
                v: Linear::new(&mut p, "fusion.value", c, c, false, &mut rng)?,
            }
        };
        let glu_proj = Linear::new(&mut p, "fusion.glu", c, 2 * c, true, &mut rng)?;
        let norm = LayerNorm::new(&mut p, "fusion.norm", c)?;

        let maneuvers = !ab.no_maneuver;
        let dec_in = if maneuvers { c + 12 } else { c };
        let decoder = Decoder {
            lat_head: maneuvers
                .then(|| Linear::new(&mut p, "decoder.lat_head", c, 3, true, &mut rng))
                .transpose()?,
            lon_head: maneuvers
                .then(|| Linear::new(&mut p, "decoder.lon_head", c, 3, true, &mut rng))
                .transpose()?,
            embed: Linear::new(&mut p, "decoder.embed", dec_in, c, true, &mut rng)?,
            lstm: LstmCell::new(&mut p, "decoder.lstm", c, c, &mut rng)?,
            out: Linear::new(&mut p, "decoder.out", c, 5, true, &mut rng)?,
        };
        Ok(Self {
            config: config.clone(),
            dims,
            params: p,
            intention,
            safety,
            merged,
            temporal,
            grid_conv,
            grid_mlp,
            mixer,
            glu_proj,
            norm,
            decoder,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_trainable()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let d = &self.dims;
        if (batch.history_steps, batch.future_steps, batch.nodes) != (d.history_steps, d.future_steps, d.nodes) {
            return Err(Error::dim(
                "model input",
                &[d.history_steps, d.future_steps, d.nodes],
                &[batch.history_steps, batch.future_steps, batch.nodes],
            ));
        }
        Ok(())
    }

    fn grid(&self, s: &mut Session<'_>, stack: Option<&UncertaintyGat>, graphs: &GraphBatch, b: usize) -> Result<Var> {
        let (t, n, c) = (self.dims.history_steps, self.dims.nodes, self.config.hidden);
        match stack {
            Some(st) => {
                let y = st.forward_batch(s, graphs)?;
                s.tape.reshape(y, &[b, t, n, c])
            }
            None => Ok(s.constant(Array::zeros(&[b, t, n, c]))),
        }
    }

    /// Intention features `[B, T, N, C]`; zeros when ablated.
    pub fn intention_encode(&self, s: &mut Session<'_>, batch: &Batch) -> Result<Var> {
        self.grid(s, self.intention.as_ref(), &batch.dig, batch.size)
    }

    /// Safety graph features `[B, T, N, C]` and temporal features `[B, T, C]`.
    pub fn safety_encode(&self, s: &mut Session<'_>, batch: &Batch) -> Result<(Var, Var)> {
        let f_s = self.grid(s, self.safety.as_ref(), &batch.dsg, batch.size)?;
        let (b, t, c) = (batch.size, self.dims.history_steps, self.config.hidden);
        let x = s.constant(batch.temporal.clone());
        let f_t = match &self.temporal {
            Some(TemporalEncoder::Mlp { first, second }) => {
                let h = first.forward(s, x)?;
                let h = s.tape.elu(h);
                second.forward(s, h)?
            }
            Some(TemporalEncoder::Lstm { embed, lstm }) => {
                let e = embed.forward(s, x)?;
                let e = s.tape.elu(e);
                let gates = lstm.input_gates(s, e)?;
                let (mut h, mut cell) = lstm.zero_state(s, b);
                let mut outs = Vec::with_capacity(t);
                for k in 0..t {
                    let g = s.tape.slice(gates, 1, k, 1)?;
                    let g = s.tape.reshape(g, &[b, 4 * c])?;
                    (h, cell) = lstm.step_from_gates(s, g, h, cell)?;
                    outs.push(s.tape.reshape(h, &[b, 1, c])?);
                }
                s.tape.concat(&outs, 1)?
            }
            None => return Err(Error::Inference("the small variant has no temporal encoder".into())),
        };
        Ok((f_s, f_t))
    }

    /// Ego slice plus mean over valid neighbors: `[B, T, N, C]` to `[B, T, C]`.
    fn pool(&self, s: &mut Session<'_>, grid: Var, batch: &Batch) -> Result<Var> {
        let (b, t, n, c) = (batch.size, self.dims.history_steps, self.dims.nodes, self.config.hidden);
        let flat = s.tape.reshape(grid, &[b * t, n, c])?;
        let w = s.constant(batch.pool.clone());
        let pooled = s.tape.bmm(w, flat, false)?;
        s.tape.reshape(pooled, &[b, t, c])
    }

    fn split_heads(&self, s: &mut Session<'_>, x: Var, b: usize) -> Result<Var> {
        let (t, c, h) = (self.dims.history_steps, self.config.hidden, self.config.fusion_heads);
        let x = s.tape.reshape(x, &[b, t, h, c / h])?;
        let x = s.tape.permute(x, &[0, 2, 1, 3])?;
        s.tape.reshape(x, &[b * h, t, c / h])
    }

    /// Mixes temporal features (queries) with pooled scene features (keys
    /// and values), then applies GLU and layer norm. Returns `[B, T, C]`.
    pub fn fuse(&self, s: &mut Session<'_>, f_is: Var, f_t: Var, b: usize) -> Result<(Var, Option<Var>)> {
        let (t, c, heads) = (self.dims.history_steps, self.config.hidden, self.config.fusion_heads);
        let (mixed, attention) = match &self.mixer {
            Mixer::Attention { q, k, v } => {
                let qv = q.forward(s, f_t)?;
                let kv = k.forward(s, f_is)?;
                let vv = v.forward(s, f_is)?;
                let qh = self.split_heads(s, qv, b)?;
                let kh = self.split_heads(s, kv, b)?;
                let vh = self.split_heads(s, vv, b)?;
                let scores = s.tape.bmm(qh, kh, true)?;
                let scores = s.tape.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
                let att = s.tape.softmax(scores, None)?;
                let out = s.tape.bmm(att, vh, false)?;
                let out = s.tape.reshape(out, &[b, heads, t, c / heads])?;
                let out = s.tape.permute(out, &[0, 2, 1, 3])?;
                (s.tape.reshape(out, &[b, t, c])?, Some(att))
            }
            Mixer::Conv(conv) => {
                let x = s.tape.concat(&[f_t, f_is], 2)?;
                let x = s.tape.permute(x, &[0, 2, 1])?;
                let x = s.tape.reshape(x, &[b, 2 * c, t, 1])?;
                let y = conv.forward(s, x)?;
                let y = s.tape.reshape(y, &[b, c, t])?;
                (s.tape.permute(y, &[0, 2, 1])?, None)
            }
        };
        let g = self.glu_proj.forward(s, mixed)?;
        let g = s.tape.glu(g)?;
        Ok((self.norm.forward(s, g)?, attention))
    }

    /// Scene features `[B, T, C]` (pooled) and temporal features `[B, T, C]`.
    fn encode(&self, s: &mut Session<'_>, batch: &Batch) -> Result<(Var, Var)> {
        let (b, t, n, c) = (batch.size, self.dims.history_steps, self.dims.nodes, self.config.hidden);
        match self.config.variant {
            Variant::Full => {
                let f_i = self.intention_encode(s, batch)?;
                let (f_s, f_t) = self.safety_encode(s, batch)?;
                let x = s.tape.concat(&[f_i, f_s], 3)?;
                let x = s.tape.permute(x, &[0, 3, 1, 2])?;
                let conv = self.grid_conv.as_ref().expect("full variant has a grid conv");
                let y = conv.forward(s, x)?;
                let y = s.tape.relu(y);
                let y = s.tape.permute(y, &[0, 2, 3, 1])?;
                let grid = self.grid_mlp.as_ref().expect("full variant has a grid mlp").forward(s, y)?;
                Ok((self.pool(s, grid, batch)?, f_t))
            }
            Variant::Small => {
                let grid = self.grid(s, self.merged.as_ref(), &batch.merged, b)?;
                let flat = s.tape.reshape(grid, &[b * t, n, c])?;
                let ego = s.tape.slice(flat, 1, 0, 1)?;
                let f_t = s.tape.reshape(ego, &[b, t, c])?;
                Ok((self.pool(s, grid, batch)?, f_t))
            }
        }
    }

    fn uniform_probs(&self, s: &mut Session<'_>, b: usize) -> Var {
        s.constant(Array::full(&[b, 3], 1.0 / 3.0))
    }

    /// Maneuver probabilities and Gaussian trajectories from fused
    /// features `[B, T, C]`.
    pub fn decode(&self, s: &mut Session<'_>, fused: Var, batch: &Batch, modes: DecodeModes<'_>) -> Result<ForwardOutput> {
        let (b, t, c, tf) = (batch.size, self.dims.history_steps, self.config.hidden, self.dims.future_steps);
        let ctx = s.tape.slice(fused, 1, t - 1, 1)?;
        let ctx = s.tape.reshape(ctx, &[b, c])?;
        let dec = &self.decoder;

        let (lat_probs, lon_probs, trajectories) = match (&dec.lat_head, &dec.lon_head) {
            (Some(lat_head), Some(lon_head)) => {
                let lat = lat_head.forward(s, ctx)?;
                let lat = s.tape.softmax(lat, None)?;
                let lon = lon_head.forward(s, ctx)?;
                let lon = s.tape.softmax(lon, None)?;
                let mode_input = |s: &mut Session<'_>, labels: &[ManeuverLabel]| -> Result<Var> {
                    let mut onehot = vec![0.0; b * 6];
                    for (i, l) in labels.iter().enumerate() {
                        onehot[i * 6 + l.lat.index()] = 1.0;
                        onehot[i * 6 + 3 + l.lon.index()] = 1.0;
                    }
                    let oh = s.constant(Array::new(&[b, 6], onehot)?);
                    s.tape.concat(&[ctx, lat, lon, oh], 1)
                };
                let traj = match modes {
                    DecodeModes::Given(labels) => {
                        if labels.len() != b {
                            return Err(Error::dim("decoder labels", &[b], &[labels.len()]));
                        }
                        let x = mode_input(s, labels)?;
                        self.unroll(s, x, &batch.anchor, b)?
                    }
                    DecodeModes::All => {
                        let mut inputs = Vec::with_capacity(NUM_MODES);
                        for m in 0..NUM_MODES {
                            let label = ManeuverLabel::from_mode_index(m).expect("mode below 9");
                            inputs.push(mode_input(s, &vec![label; b])?);
                        }
                        let x = s.tape.concat(&inputs, 0)?;
                        let anchor = tile(&batch.anchor, NUM_MODES)?;
                        let y = self.unroll(s, x, &anchor, NUM_MODES * b)?;
                        s.tape.reshape(y, &[NUM_MODES, b, tf, 5])?
                    }
                };
                (lat, lon, traj)
            }
            _ => {
                let y = self.unroll(s, ctx, &batch.anchor, b)?;
                let traj = match modes {
                    DecodeModes::Given(_) => y,
                    DecodeModes::All => {
                        let one = s.tape.reshape(y, &[1, b, tf, 5])?;
                        s.tape.concat(&vec![one; NUM_MODES], 0)?
                    }
                };
                (self.uniform_probs(s, b), self.uniform_probs(s, b), traj)
            }
        };
        Ok(ForwardOutput {
            lat_probs,
            lon_probs,
            trajectories,
            fusion_attention: None,
            predicts_maneuvers: dec.lat_head.is_some(),
        })
    }

    /// Runs the decoder recurrence for `rows` inputs; returns `[rows, t_f, 5]`.
    fn unroll(&self, s: &mut Session<'_>, x: Var, anchor: &Array, rows: usize) -> Result<Var> {
        let tf = self.dims.future_steps;
        let dec = &self.decoder;
        let e = dec.embed.forward(s, x)?;
        let e = s.tape.elu(e);
        let gates = dec.lstm.input_gates(s, e)?;
        let (mut h, mut cell) = dec.lstm.zero_state(s, rows);
        let mut steps = Vec::with_capacity(tf);
        for _ in 0..tf {
            (h, cell) = dec.lstm.step_from_gates(s, gates, h, cell)?;
            let o = dec.out.forward(s, h)?;
            steps.push(s.tape.reshape(o, &[rows, 1, 5])?);
        }
        let raw = s.tape.concat(&steps, 1)?;
        let mu = s.tape.slice(raw, 2, 0, 2)?;
        let mu = s.tape.scale(mu, self.config.output_scale);
        let base = s.constant(anchor.clone());
        let mu = s.tape.add(base, mu)?;
        let log_sigma = s.tape.slice(raw, 2, 2, 2)?;
        let sigma = s.tape.exp(log_sigma);
        let corr = s.tape.slice(raw, 2, 4, 1)?;
        let corr = s.tape.tanh(corr);
        let corr = s.tape.scale(corr, CORR_LIMIT);
        s.tape.concat(&[mu, sigma, corr], 2)
    }

    pub fn forward(&self, s: &mut Session<'_>, batch: &Batch, modes: DecodeModes<'_>) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (f_is, f_t) = self.encode(s, batch)?;
        let (fused, attention) = self.fuse(s, f_is, f_t, batch.size)?;
        let mut out = self.decode(s, fused, batch, modes)?;
        out.fusion_attention = attention;
        Ok(out)
    }

    /// Forecasts for every sample of `batch` in evaluation mode.
    pub fn predict(&self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<Vec<ForecastDistribution>> {
        let mut s = Session::new(&self.params, false, rng);
        let out = self.forward(&mut s, batch, DecodeModes::All)?;
        let dists = distributions(&s, &out, batch)?;
        for d in &dists {
            d.validate()?;
        }
        Ok(dists)
    }
}

fn tile(a: &Array, times: usize) -> Result<Array> {
    let mut shape = a.shape().to_vec();
    shape[0] *= times;
    let data = (0..times).flat_map(|_| a.data().iter().copied()).collect();
    Array::new(&shape, data)
}

/// Reads forecast distributions out of an all-modes forward pass.
pub fn distributions(s: &Session<'_>, out: &ForwardOutput, batch: &Batch) -> Result<Vec<ForecastDistribution>> {
    let traj = s.tape.value(out.trajectories);
    let (b, tf) = (batch.size, batch.future_steps);
    if traj.shape() != [NUM_MODES, b, tf, 5] {
        return Err(Error::dim("forecast trajectories", traj.shape(), &[NUM_MODES, b, tf, 5]));
    }
    let lat = s.tape.value(out.lat_probs).data();
    let lon = s.tape.value(out.lon_probs).data();
    let td = traj.data();
    Ok((0..b)
        .map(|i| ForecastDistribution {
            lat_probs: [lat[i * 3], lat[i * 3 + 1], lat[i * 3 + 2]],
            lon_probs: [lon[i * 3], lon[i * 3 + 1], lon[i * 3 + 2]],
            modes: (0..NUM_MODES)
                .map(|m| {
                    (0..tf)
                        .map(|k| {
                            let o = ((m * b + i) * tf + k) * 5;
                            [td[o], td[o + 1], td[o + 2], td[o + 3], td[o + 4]]
                        })
                        .collect()
                })
                .collect(),
            origin: batch.origins[i],
        })
        .collect())
}

impl Forecaster {
    /// Checkpoint of the weights with the model config and dims in `meta`.
    /// Keys already present in `extra` are kept.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let mut meta = match extra {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            other => return Err(Error::Argument(format!("checkpoint meta must be an object, got {other}"))),
        };
        meta.insert("model".into(), serde_json::to_value(&self.config)?);
        meta.insert("dims".into(), serde_json::to_value(self.dims)?);
        Ok(Checkpoint::from_store(&self.params, serde_json::Value::Object(meta)))
    }

    /// Rebuilds a model from a checkpoint written by [`Forecaster::to_checkpoint`].
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint meta lacks `{k}`")))
        };
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let dims: ModelDims = serde_json::from_value(field("dims")?)?;
        let mut model = Self::new(&config, dims, 0)?;
        ckpt.apply_to(&mut model.params)?;
        Ok(model)
    }
}
