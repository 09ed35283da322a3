use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::model::Query;
use crate::oracle::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub query: Query,
    pub target: f64,
}

/// How training records are cut into mini-batches each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Groups of (transmitter, pattern) records are visited in shuffled
    /// order, `groups_per_batch` at a time; the pooled records of those
    /// groups are shuffled and cut into batches, so every batch touches at
    /// most that many groups.
    Grouped,
    /// Plain shuffle over all training records.
    Shuffled,
}

/// Training and validation samples of one dataset.
///
/// Receivers strictly inside a solid are dropped from both sets: they carry
/// no propagation signal and the oracle reports them as zero power.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub scene: Scene,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Contiguous (transmitter, pattern) runs of `train`.
    pub train_groups: Vec<Range<usize>>,
    pub train_tx: Vec<usize>,
    pub val_tx: Vec<usize>,
    pub masked: usize,
    pub p_bounds_db: (f64, f64),
    pub scene_hash: String,
}

impl TrainingData {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let scene = Scene::from_file(ds.header.scene.clone())?;
        if scene.hash() != ds.header.scene_hash {
            return Err(Error::format("dataset scene does not match its recorded hash"));
        }
        let split = &ds.header.split;
        let n_tx = ds.header.n_tx;
        if split.train_tx_indices.iter().chain(&split.val_tx_indices).any(|&t| t >= n_tx) {
            return Err(Error::format("split references a transmitter outside the dataset"));
        }
        if split.train_tx_indices.iter().any(|t| split.val_tx_indices.contains(t)) {
            return Err(Error::format("split assigns a transmitter to both train and validation"));
        }
        let mut out = Self {
            scene,
            train: Vec::new(),
            val: Vec::new(),
            train_groups: Vec::new(),
            train_tx: split.train_tx_indices.clone(),
            val_tx: split.val_tx_indices.clone(),
            masked: 0,
            p_bounds_db: (ds.header.p_min_db, ds.header.p_max_db),
            scene_hash: ds.header.scene_hash.clone(),
        };
        let per_group = ds.header.rx_grid.len();
        for (set, indices) in [(0, &split.train_tx_indices), (1, &split.val_tx_indices)] {
            for &t in indices {
                for group in ds.tx_records(t).chunks(per_group) {
                    let start = out.train.len();
                    for r in group {
                        let rx = r.rx_vec();
                        if out.scene.inside_solid(&rx) {
                            out.masked += 1;
                            continue;
                        }
                        let s = Sample {
                            query: Query { tx: r.tx_vec(), pattern_id: r.pattern_id, rx },
                            target: r.p_norm as f64,
                        };
                        if set == 0 {
                            out.train.push(s);
                        } else {
                            out.val.push(s);
                        }
                    }
                    if set == 0 && out.train.len() > start {
                        out.train_groups.push(start..out.train.len());
                    }
                }
            }
        }
        if out.train.is_empty() || out.val.is_empty() {
            return Err(Error::validation(format!(
                "dataset yields {} training and {} validation samples; both must be non-empty",
                out.train.len(),
                out.val.len()
            )));
        }
        Ok(out)
    }

    /// Mini-batches of indices into `train` for `epoch`; a pure function of
    /// `(seed, epoch)`.
    pub fn epoch_batches(
        &self,
        batching: Batching,
        batch_size: usize,
        groups_per_batch: usize,
        seed: u64,
        epoch: usize,
    ) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        match batching {
            Batching::Shuffled => {
                let mut idx: Vec<usize> = (0..self.train.len()).collect();
                idx.shuffle(&mut rng);
                idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
            }
            Batching::Grouped => {
                let mut order: Vec<usize> = (0..self.train_groups.len()).collect();
                order.shuffle(&mut rng);
                let mut out = Vec::new();
                for pool in order.chunks(groups_per_batch.max(1)) {
                    let mut idx: Vec<usize> = pool.iter().flat_map(|&g| self.train_groups[g].clone()).collect();
                    idx.shuffle(&mut rng);
                    out.extend(idx.chunks(batch_size).map(<[usize]>::to_vec));
                }
                out
            }
        }
    }
}
