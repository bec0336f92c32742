use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SceneWindow};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

/// Shuffles windows with `seed` and partitions them by the given
/// fractions. Windows sharing a key (source, ego, anchor) always land in
/// the same split.
pub fn split_windows(windows: Vec<SceneWindow>, cfg: &SplitConfig, seed: u64) -> Result<DatasetSplit> {
    let fr = [cfg.train, cfg.val, cfg.test];
    if fr.iter().any(|f| !(f.is_finite() && *f >= 0.0)) || fr.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("split fractions must be non-negative with a positive sum".into()));
    }
    let total: f64 = fr.iter().sum();

    let mut groups: BTreeMap<(String, i64, i64), Vec<SceneWindow>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.key()).or_default().push(w);
    }
    let mut groups: Vec<Vec<SceneWindow>> = groups.into_values().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let n = groups.len();
    let n_train = ((cfg.train / total) * n as f64).round() as usize;
    let n_val = (((cfg.train + cfg.val) / total) * n as f64).round() as usize - n_train;
    let mut split = DatasetSplit {
        seed,
        ..Default::default()
    };
    for (i, g) in groups.into_iter().enumerate() {
        let dest = if i < n_train {
            &mut split.train
        } else if i < n_train + n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        dest.extend(g);
    }
    Ok(split)
}
