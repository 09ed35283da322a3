//! Training loop, metrics, checkpoints, and the ablation and baseline
//! harnesses.

mod ablation;
mod baseline;
mod checkpoint;
mod data;
mod metrics;

pub use ablation::{run_ablation, AblationReport};
pub use baseline::{run_baseline_mlp, BaselineMlp, BASELINE_HIDDEN};
pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry,
    CHECKPOINT_MAGIC,
};
pub use data::{Batching, Sample, TrainingData};
pub use metrics::{compute_metrics, median, psnr, Metrics};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Query, SceneContext};
use crate::tensor::{Adam, Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    /// Stop after this many epochs without a validation improvement; 0
    /// disables early stopping.
    pub patience: usize,
    pub batching: Batching,
    /// Groups pooled per batch under [`Batching::Grouped`].
    pub groups_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1000,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
            checkpoint_interval: 0,
            patience: 20,
            batching: Batching::Grouped,
            groups_per_batch: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        if self.groups_per_batch == 0 {
            return Err(Error::validation("groups_per_batch must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    #[serde(with = "metrics::sentinel")]
    pub val_psnr: f64,
}

/// Anything trainable by [`fit`]: a parameter store plus a differentiable
/// forward pass and a gradient-free prediction path over queries.
pub trait Regressor {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward(&self, g: &mut Graph, queries: &[Query]) -> Result<Var>;
    fn predict(&self, queries: &[Query]) -> Result<Vec<f64>>;
}

/// The point-field model bound to its scene context.
pub struct NeuralRegressor<'a> {
    pub model: Model,
    pub ctx: &'a SceneContext,
}

impl Regressor for NeuralRegressor<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn forward(&self, g: &mut Graph, queries: &[Query]) -> Result<Var> {
        self.model.forward(g, self.ctx, queries)
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<f64>> {
        self.model.predict(self.ctx, queries)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch, rounded to f32.
    pub best_params: ParamStore,
    pub best_epoch: usize,
    pub best: Metrics,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

pub fn evaluate<R: Regressor + ?Sized>(r: &R, samples: &[Sample]) -> Result<Metrics> {
    let queries: Vec<Query> = samples.iter().map(|s| s.query).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
    compute_metrics(&r.predict(&queries)?, &targets)
}

/// Evaluates with parameters rounded to f32, the precision checkpoints
/// store, so the reported metric survives a save/load round trip.
fn evaluate_rounded<R: Regressor>(r: &mut R, samples: &[Sample]) -> Result<(Metrics, ParamStore)> {
    let rounded = r.params().rounded_to_f32();
    let full = std::mem::replace(r.params_mut(), rounded);
    let metrics = evaluate(r, samples);
    let rounded = std::mem::replace(r.params_mut(), full);
    Ok((metrics?, rounded))
}

/// Adam on the MSE loss with seeded batching, validation after every
/// epoch, best-epoch retention, and early stopping. `on_epoch` sees each
/// record and the current parameters.
pub fn fit<R: Regressor>(
    r: &mut R,
    data: &TrainingData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &R) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut adam = Adam::new(r.params(), cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut sum_sq = 0.0;
        for (bi, batch) in data.epoch_batches(cfg.batching, cfg.batch_size, cfg.groups_per_batch, cfg.seed, epoch).iter().enumerate() {
            let queries: Vec<Query> = batch.iter().map(|&i| data.train[i].query).collect();
            let targets: Vec<f64> = batch.iter().map(|&i| data.train[i].target).collect();
            let mut g = Graph::new();
            let pred = r.forward(&mut g, &queries)?;
            let target = g.constant(Tensor::matrix(batch.len(), 1, targets)?);
            let loss = g.mse(pred, target)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            sum_sq += value * batch.len() as f64;
            let grads = g.backward(loss)?.for_params(r.params());
            adam.step(r.params_mut(), &grads).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {bi}: {m}")),
                other => other,
            })?;
        }
        let (val, rounded) = evaluate_rounded(r, &data.val)?;
        let record = EpochRecord {
            epoch,
            train_mse: sum_sq / data.train.len() as f64,
            val_mse: val.mse,
            val_psnr: val.psnr,
        };
        log::info!(
            "epoch {epoch}: train {:.3e} val {:.3e} ({:.2} dB)",
            record.train_mse,
            record.val_mse,
            record.val_psnr
        );
        on_epoch(&record, r)?;
        history.push(record);
        let improved = best.as_ref().map_or(true, |(_, m, _)| val.mse < m.mse);
        if improved {
            best = Some((epoch, val, rounded));
        } else if cfg.patience > 0 && epoch - best.as_ref().unwrap().0 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best, best_params) = best.ok_or_else(|| Error::validation("epochs must be >= 1"))?;
    Ok(FitOutcome { best_params, best_epoch, best, history, stopped_early })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best-validation model (f32-rounded weights).
    pub model: Model,
    pub best_epoch: usize,
    pub best: Metrics,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Trains a fresh model initialized from `train_cfg.seed`.
pub fn train(
    data: &TrainingData,
    ctx: &SceneContext,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut on_epoch = on_epoch;
    let mut r = NeuralRegressor { model: Model::new(model_cfg.clone(), train_cfg.seed)?, ctx };
    let out = fit(&mut r, data, train_cfg, |rec, r| on_epoch(rec, &r.model))?;
    Ok(TrainOutcome {
        model: Model::from_params(model_cfg.clone(), out.best_params)?,
        best_epoch: out.best_epoch,
        best: out.best,
        history: out.history,
        stopped_early: out.stopped_early,
    })
}

/// Validation metrics of `model` on `data`.
pub fn evaluate_model(model: &Model, ctx: &SceneContext, data: &TrainingData) -> Result<Metrics> {
    let r = NeuralRegressor { model: model.clone(), ctx };
    evaluate(&r, &data.val)
}
