//! Window preprocessing into model tensors.

use crate::error::{Error, Result};
use crate::gat::GraphBatch;
use crate::graph::{build_dig, build_dsg, GraphConfig, DIG_FEATURES, DSG_FEATURES};
use crate::numeric::Array;
use crate::rss::{safety_envelope, RssParameters};
use crate::trajectory::{extract_maneuver_labels, AgentType, LabelConfig, ManeuverLabel, SceneWindow};

pub const POS_SCALE: f64 = 0.1;
pub const VEL_SCALE: f64 = 0.1;
pub const ACC_SCALE: f64 = 0.5;
pub const LON_DIST_SCALE: f64 = 0.1;
pub const LAT_DIST_SCALE: f64 = 0.5;

/// Merged node features of the small variant: intention features followed
/// by the two RSS distances.
pub const MERGED_FEATURES: usize = DIG_FEATURES + 2;
/// Ego RSS distances followed by ego position, velocity and acceleration.
pub const TEMPORAL_FEATURES: usize = 8;

const DIG_SCALES: [f64; DIG_FEATURES] = [
    POS_SCALE, POS_SCALE, VEL_SCALE, VEL_SCALE, ACC_SCALE, ACC_SCALE, 1.0, 1.0, 1.0,
];
const DSG_SCALES: [f64; DSG_FEATURES] = [POS_SCALE, POS_SCALE, LON_DIST_SCALE, LAT_DIST_SCALE];

/// One window converted to scaled model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub key: (String, i64, i64),
    pub history_steps: usize,
    pub nodes: usize,
    /// `[T, N, 9]`.
    pub dig: Vec<f64>,
    /// `[T, N, N]`.
    pub dig_adjacency: Vec<bool>,
    /// `[T, N, 4]`.
    pub dsg: Vec<f64>,
    pub dsg_adjacency: Vec<bool>,
    /// `[T, N]`.
    pub valid: Vec<bool>,
    /// `[T, 8]`.
    pub temporal: Vec<f64>,
    pub ego_velocity: [f64; 2],
    /// Ground-truth future relative to `origin`, m.
    pub truth: Vec<[f64; 2]>,
    pub label: ManeuverLabel,
    pub ego_type: AgentType,
    pub origin: [f64; 2],
    pub dt: f64,
}

pub fn prepare_sample(
    window: &SceneWindow,
    rss: &RssParameters,
    graph: &GraphConfig,
    labels: &LabelConfig,
) -> Result<Sample> {
    let t = window.history_len();
    let n = 1 + window.n_slots();
    if t == 0 || window.future_len() == 0 {
        return Err(Error::EmptyInput("window without history or future".into()));
    }
    let mut dig = Vec::with_capacity(t * n * DIG_FEATURES);
    let mut dsg = Vec::with_capacity(t * n * DSG_FEATURES);
    let mut dig_adjacency = Vec::with_capacity(t * n * n);
    let mut dsg_adjacency = Vec::with_capacity(t * n * n);
    let mut valid = Vec::with_capacity(t * n);
    let mut temporal = Vec::with_capacity(t * TEMPORAL_FEATURES);
    for k in 0..t {
        let gi = build_dig(window, k, graph.d_close)?;
        let gs = build_dsg(window, k, rss, graph.d_close_lon)?;
        for row in &gi.node_features {
            dig.extend(row.iter().zip(DIG_SCALES).map(|(v, s)| v * s));
        }
        for row in &gs.node_features {
            dsg.extend(row.iter().zip(DSG_SCALES).map(|(v, s)| v * s));
        }
        dig_adjacency.extend(gi.adjacency.iter().flatten());
        dsg_adjacency.extend(gs.adjacency.iter().flatten());
        valid.extend(&gi.valid);

        let ego = &window.ego_history[k];
        let present: Vec<_> = window.agents_at(k).into_iter().flatten().collect();
        let env = safety_envelope(ego, &present, rss)?;
        temporal.extend([
            env.d_lon * LON_DIST_SCALE,
            env.d_lat * LAT_DIST_SCALE,
            (ego.p[0] - window.origin[0]) * POS_SCALE,
            (ego.p[1] - window.origin[1]) * POS_SCALE,
            ego.v[0] * VEL_SCALE,
            ego.v[1] * VEL_SCALE,
            ego.a[0] * ACC_SCALE,
            ego.a[1] * ACC_SCALE,
        ]);
    }
    Ok(Sample {
        key: window.key(),
        history_steps: t,
        nodes: n,
        dig,
        dig_adjacency,
        dsg,
        dsg_adjacency,
        valid,
        temporal,
        ego_velocity: window.ego_history[t - 1].v,
        truth: window.future_relative(),
        label: extract_maneuver_labels(window, labels),
        ego_type: window.ego_type(),
        origin: window.origin,
        dt: window.dt,
    })
}

/// Samples stacked along a leading batch axis.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub nodes: usize,
    pub dig: GraphBatch,
    pub dsg: GraphBatch,
    pub merged: GraphBatch,
    /// `[B, T, 8]`.
    pub temporal: Array,
    /// Constant-velocity positions `[B, t_f, 2]`.
    pub anchor: Array,
    /// `[B, t_f, 2]`.
    pub truth: Array,
    pub labels: Vec<ManeuverLabel>,
    pub ego_types: Vec<AgentType>,
    pub origins: Vec<[f64; 2]>,
    /// `[B*T, 1, N]` weights: one for the ego, `1/k` for each of the `k`
    /// valid neighbors.
    pub pool: Array,
}

impl Batch {
    /// Stacks samples; `no_rss` zeroes every RSS distance input.
    pub fn new(samples: &[&Sample], no_rss: bool) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
        let (t, n, tf) = (first.history_steps, first.nodes, first.truth.len());
        let b = samples.len();
        for s in samples {
            if (s.history_steps, s.nodes, s.truth.len()) != (t, n, tf) {
                return Err(Error::dim(
                    "batch samples",
                    &[t, n, tf],
                    &[s.history_steps, s.nodes, s.truth.len()],
                ));
            }
        }
        let g = b * t;
        let cat_f = |f: fn(&Sample) -> &Vec<f64>| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
        let cat_b = |f: fn(&Sample) -> &Vec<bool>| samples.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();
        let valid = cat_b(|s| &s.valid);
        let mut dsg = cat_f(|s| &s.dsg);
        let mut temporal = cat_f(|s| &s.temporal);
        if no_rss {
            for row in dsg.chunks_mut(DSG_FEATURES) {
                row[2] = 0.0;
                row[3] = 0.0;
            }
            for row in temporal.chunks_mut(TEMPORAL_FEATURES) {
                row[0] = 0.0;
                row[1] = 0.0;
            }
        }
        let dig = cat_f(|s| &s.dig);
        let merged: Vec<f64> = dig
            .chunks(DIG_FEATURES)
            .zip(dsg.chunks(DSG_FEATURES))
            .flat_map(|(i, s)| i.iter().chain(&s[2..]).copied().collect::<Vec<_>>())
            .collect();
        let dig_adjacency = cat_b(|s| &s.dig_adjacency);

        let mut pool = Vec::with_capacity(g * n);
        for row in valid.chunks(n) {
            let k = row[1..].iter().filter(|&&v| v).count();
            pool.push(1.0);
            pool.extend(row[1..].iter().map(|&v| if v { 1.0 / k as f64 } else { 0.0 }));
        }
        let mut anchor = Vec::with_capacity(b * tf * 2);
        let mut truth = Vec::with_capacity(b * tf * 2);
        for s in samples {
            for k in 0..tf {
                let h = (k + 1) as f64 * s.dt;
                anchor.extend([s.ego_velocity[0] * h, s.ego_velocity[1] * h]);
                truth.extend(s.truth[k]);
            }
        }
        Ok(Self {
            size: b,
            history_steps: t,
            future_steps: tf,
            nodes: n,
            dig: GraphBatch {
                graphs: g,
                nodes: n,
                features: Array::new(&[g, n, DIG_FEATURES], dig)?,
                adjacency: dig_adjacency.clone(),
                valid: valid.clone(),
            },
            dsg: GraphBatch {
                graphs: g,
                nodes: n,
                features: Array::new(&[g, n, DSG_FEATURES], dsg)?,
                adjacency: cat_b(|s| &s.dsg_adjacency),
                valid: valid.clone(),
            },
            merged: GraphBatch {
                graphs: g,
                nodes: n,
                features: Array::new(&[g, n, MERGED_FEATURES], merged)?,
                adjacency: dig_adjacency,
                valid,
            },
            temporal: Array::new(&[b, t, TEMPORAL_FEATURES], temporal)?,
            anchor: Array::new(&[b, tf, 2], anchor)?,
            truth: Array::new(&[b, tf, 2], truth)?,
            labels: samples.iter().map(|s| s.label).collect(),
            ego_types: samples.iter().map(|s| s.ego_type).collect(),
            origins: samples.iter().map(|s| s.origin).collect(),
            pool: Array::new(&[g, 1, n], pool)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{synthesize_scenes, SynthSpec};

    fn samples(n: usize) -> Vec<Sample> {
        synthesize_scenes(&SynthSpec {
            n_scenes: n,
            ..Default::default()
        })
        .unwrap()
        .iter()
        .map(|w| prepare_sample(w, &RssParameters::default(), &GraphConfig::default(), &LabelConfig::default()).unwrap())
        .collect()
    }

    #[test]
    fn batch_shapes() {
        let s = samples(3);
        let refs: Vec<&Sample> = s.iter().collect();
        let b = Batch::new(&refs, false).unwrap();
        assert_eq!(b.dig.features.shape(), &[45, 9, DIG_FEATURES]);
        assert_eq!(b.merged.features.shape(), &[45, 9, MERGED_FEATURES]);
        assert_eq!(b.temporal.shape(), &[3, 15, TEMPORAL_FEATURES]);
        assert_eq!(b.truth.shape(), &[3, 25, 2]);
        assert_eq!(b.pool.shape(), &[45, 1, 9]);
        for row in b.pool.data().chunks(9) {
            assert_eq!(row[0], 1.0);
            let rest: f64 = row[1..].iter().sum();
            assert!(rest == 0.0 || (rest - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_rss_zeroes_distance_columns_only() {
        let s = samples(2);
        let refs: Vec<&Sample> = s.iter().collect();
        let with = Batch::new(&refs, false).unwrap();
        let without = Batch::new(&refs, true).unwrap();
        assert!(with.temporal.data().chunks(8).any(|r| r[1] != 0.0));
        for (a, b) in with.temporal.data().chunks(8).zip(without.temporal.data().chunks(8)) {
            assert_eq!((b[0], b[1]), (0.0, 0.0));
            assert_eq!(a[2..], b[2..]);
        }
        assert_eq!(with.dig.features, without.dig.features);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(Batch::new(&[], false).is_err());
    }
}
