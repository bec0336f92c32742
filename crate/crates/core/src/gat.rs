//! Uncertainty-aware graph attention.
//!
//! Graphs are processed in batches of `G` graphs with `N` nodes each:
//! features `[G, N, F]`, adjacency `[G, N, N]` and validity `[G, N]` as
//! flat row-major boolean masks.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::numeric::{Array, BatchNorm, Linear, ParamId, ParamStore, Session, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// A batch of graphs sharing the node count.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub graphs: usize,
    pub nodes: usize,
    pub features: Array,
    pub adjacency: Vec<bool>,
    pub valid: Vec<bool>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[SceneGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::EmptyInput("no graphs to batch".into()))?;
        let (n, f) = (first.n_nodes(), first.feature_dim());
        let mut data = Vec::with_capacity(graphs.len() * n * f);
        let mut adjacency = Vec::with_capacity(graphs.len() * n * n);
        let mut valid = Vec::with_capacity(graphs.len() * n);
        for g in graphs {
            if g.n_nodes() != n || g.feature_dim() != f {
                return Err(Error::dim("graph batch", &[n, f], &[g.n_nodes(), g.feature_dim()]));
            }
            data.extend(g.node_features.iter().flatten());
            adjacency.extend(g.adjacency.iter().flatten());
            valid.extend(&g.valid);
        }
        Ok(Self {
            graphs: graphs.len(),
            nodes: n,
            features: Array::new(&[graphs.len(), n, f], data)?,
            adjacency,
            valid,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.last_dim()
    }

    /// `[G, N, 1]` mask with 1 for valid nodes.
    pub fn valid_mask(&self, width: usize) -> Array {
        let data = self
            .valid
            .iter()
            .flat_map(|&v| std::iter::repeat_n(if v { 1.0 } else { 0.0 }, width))
            .collect();
        Array::new(&[self.graphs, self.nodes, width], data).expect("mask shape")
    }
}

/// Learnable per-feature Gaussian noise, shared by every node of a pass.
#[derive(Clone, Debug)]
pub struct GufNoise {
    pub log_sigma: ParamId,
    pub dim: usize,
    /// Also perturb in evaluation mode.
    pub at_inference: bool,
}

impl GufNoise {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, init_log_sigma: f64, at_inference: bool) -> Result<Self> {
        let log_sigma = store.add(format!("{name}.log_sigma"), Array::full(&[dim], init_log_sigma), true)?;
        Ok(Self {
            log_sigma,
            dim,
            at_inference,
        })
    }

    pub fn sigma(&self, store: &ParamStore) -> Vec<f64> {
        store.value(self.log_sigma).data().iter().map(|v| v.exp()).collect()
    }

    /// `x + exp(log_sigma) * z` with one `z ~ N(0, I)` of length `F` drawn
    /// per call and broadcast over all rows.
    pub fn apply(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        if !(s.training || self.at_inference) {
            return Ok(x);
        }
        if s.tape.shape(x).last() != Some(&self.dim) {
            return Err(Error::dim("guf", s.tape.shape(x), &[self.dim]));
        }
        let z: Vec<f64> = (0..self.dim).map(|_| s.rng.sample(StandardNormal)).collect();
        let ls = s.param(self.log_sigma);
        let sigma = s.tape.exp(ls);
        let eps = s.tape.mul_const(sigma, &Array::from_vec(z))?;
        s.tape.add_bias(x, eps)
    }
}

/// Masked attention coefficients for `h: [G, N, C]` given the projections
/// `a_src, a_dst: [C, 1]`: `softmax_j LeakyReLU(a_src·h_i + a_dst·h_j)`
/// over neighbors `j` of `i`. Rows without neighbors are zero.
pub fn attention_coefficients(tape: &mut Tape, h: Var, a_src: Var, a_dst: Var, adjacency: &[bool], slope: f64) -> Result<Var> {
    let shape = tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("attention input", &shape, &[0, 0, 0]));
    }
    let (g, n) = (shape[0], shape[1]);
    if adjacency.len() != g * n * n {
        return Err(Error::dim("attention adjacency", &[g, n, n], &[adjacency.len()]));
    }
    let s1 = tape.matmul(h, a_src)?;
    let s1 = tape.reshape(s1, &[g, n])?;
    let s2 = tape.matmul(h, a_dst)?;
    let s2 = tape.reshape(s2, &[g, n])?;
    let gamma = tape.outer_sum(s1, s2)?;
    let gamma = tape.leaky_relu(gamma, slope);
    tape.softmax(gamma, Some(adjacency))
}

#[derive(Clone, Debug)]
pub struct GatHead {
    pub weight: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

/// Multi-head graph attention; heads are averaged and passed through ELU.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub slope: f64,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config(format!("{name}: attention needs at least one head")));
        }
        let heads = (0..heads)
            .map(|k| {
                Ok(GatHead {
                    weight: store.add_uniform(format!("{name}.head{k}.weight"), &[in_dim, out_dim], in_dim, rng)?,
                    a_src: store.add_uniform(format!("{name}.head{k}.a_src"), &[out_dim, 1], out_dim, rng)?,
                    a_dst: store.add_uniform(format!("{name}.head{k}.a_dst"), &[out_dim, 1], out_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heads,
            in_dim,
            out_dim,
            slope: LEAKY_SLOPE,
        })
    }

    /// Returns the layer output and each head's attention coefficients.
    pub fn forward_with_attention(&self, s: &mut Session<'_>, x: Var, adjacency: &[bool]) -> Result<(Var, Vec<Var>)> {
        if s.tape.shape(x).last() != Some(&self.in_dim) {
            return Err(Error::dim("gat layer", s.tape.shape(x), &[self.in_dim]));
        }
        let mut total: Option<Var> = None;
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let w = s.param(head.weight);
            let h = s.tape.matmul(x, w)?;
            let a1 = s.param(head.a_src);
            let a2 = s.param(head.a_dst);
            let alpha = attention_coefficients(&mut s.tape, h, a1, a2, adjacency, self.slope)?;
            let out = s.tape.bmm(alpha, h, false)?;
            alphas.push(alpha);
            total = Some(match total {
                Some(t) => s.tape.add(t, out)?,
                None => out,
            });
        }
        let avg = s.tape.scale(total.expect("at least one head"), 1.0 / self.heads.len() as f64);
        Ok((s.tape.elu(avg), alphas))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, adjacency: &[bool]) -> Result<Var> {
        Ok(self.forward_with_attention(s, x, adjacency)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatStackConfig {
    pub heads: usize,
    /// Heads of the attention layer after dropout.
    pub second_heads: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub guf: bool,
    pub guf_init_log_sigma: f64,
    pub guf_at_inference: bool,
}

impl Default for GatStackConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            second_heads: 1,
            dropout: 0.1,
            bn_momentum: 0.1,
            guf: true,
            guf_init_log_sigma: -3.0,
            guf_at_inference: false,
        }
    }
}

/// Batch norm, GUF, multi-head attention, dropout, a second attention
/// layer, a residual from the post-GUF features and a final linear map.
/// Invalid nodes leave as zero rows.
#[derive(Clone, Debug)]
pub struct UncertaintyGat {
    pub norm: BatchNorm,
    pub guf: Option<GufNoise>,
    pub first: GatLayer,
    pub second: GatLayer,
    pub residual: Linear,
    pub output: Linear,
    pub dropout: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl UncertaintyGat {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cfg: &GatStackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", cfg.dropout)));
        }
        let guf = if cfg.guf {
            Some(GufNoise::new(store, &format!("{name}.guf"), in_dim, cfg.guf_init_log_sigma, cfg.guf_at_inference)?)
        } else {
            None
        };
        Ok(Self {
            norm: BatchNorm::new(store, &format!("{name}.norm"), in_dim, cfg.bn_momentum)?,
            guf,
            first: GatLayer::new(store, &format!("{name}.att1"), in_dim, out_dim, cfg.heads, rng)?,
            second: GatLayer::new(store, &format!("{name}.att2"), out_dim, out_dim, cfg.second_heads, rng)?,
            residual: Linear::new(store, &format!("{name}.residual"), in_dim, out_dim, false, rng)?,
            output: Linear::new(store, &format!("{name}.out"), out_dim, out_dim, true, rng)?,
            dropout: cfg.dropout,
            in_dim,
            out_dim,
        })
    }

    /// `x: [G, N, F]` on the tape; returns `[G, N, C]`.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, batch: &GraphBatch) -> Result<Var> {
        let (g, n) = (batch.graphs, batch.nodes);
        let flat = s.tape.reshape(x, &[g * n, self.in_dim])?;
        let normed = self.norm.forward(s, flat, &batch.valid)?;
        let normed = s.tape.reshape(normed, &[g, n, self.in_dim])?;
        let noisy = match &self.guf {
            Some(guf) => guf.apply(s, normed)?,
            None => normed,
        };
        let h = self.first.forward(s, noisy, &batch.adjacency)?;
        let h = s.dropout(h, self.dropout)?;
        let h = self.second.forward(s, h, &batch.adjacency)?;
        let skip = self.residual.forward(s, noisy)?;
        let h = s.tape.add(h, skip)?;
        let h = self.output.forward(s, h)?;
        s.tape.mul_const(h, &batch.valid_mask(self.out_dim))
    }

    pub fn forward_batch(&self, s: &mut Session<'_>, batch: &GraphBatch) -> Result<Var> {
        let x = s.constant(batch.features.clone());
        self.forward(s, x, batch)
    }
}
