//! Plain MLP baseline on raw `(tx, one-hot pattern, rx)` inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, fit, FitOutcome, Metrics, Regressor, TrainConfig, TrainingData};
use crate::error::Result;
use crate::geometry::{PatternKind, WorldTransform};
use crate::model::Query;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const BASELINE_HIDDEN: [usize; 4] = [64, 64, 32, 64];

const INPUTS: usize = 6 + PatternKind::COUNT;

#[derive(Debug, Clone)]
pub struct BaselineMlp {
    pub params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
    /// Positions are fed in the scene's normalized frame.
    transform: WorldTransform,
}

impl BaselineMlp {
    pub fn new(transform: WorldTransform, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = INPUTS;
        for (i, &w) in BASELINE_HIDDEN.iter().chain(std::iter::once(&1)).enumerate() {
            let wid = params.add_uniform(format!("mlp{i}.w"), &[width, w], width, &mut rng)?;
            let bid = params.add_uniform(format!("mlp{i}.b"), &[w], width, &mut rng)?;
            layers.push((wid, bid));
            width = w;
        }
        Ok(Self { params, layers, transform })
    }

    fn inputs(&self, queries: &[Query]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(queries.len() * INPUTS);
        for q in queries {
            PatternKind::from_id(q.pattern_id)?;
            data.extend(self.transform.to_normalized(&q.tx).iter());
            data.extend((0..PatternKind::COUNT as u32).map(|p| if p == q.pattern_id { 1.0 } else { 0.0 }));
            data.extend(self.transform.to_normalized(&q.rx).iter());
        }
        Tensor::matrix(queries.len(), INPUTS, data)
    }
}

impl Regressor for BaselineMlp {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward(&self, g: &mut Graph, queries: &[Query]) -> Result<Var> {
        let mut h = g.constant(self.inputs(queries)?);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, w);
            let b = g.param(&self.params, b);
            h = g.linear(h, w, b)?;
            if i < last {
                h = g.leaky_relu(h);
            }
        }
        Ok(g.sigmoid(h))
    }

    fn predict(&self, queries: &[Query]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, queries)?;
        Ok(g.value(y).data().to_vec())
    }
}

/// Trains the baseline with the same budget and batching as the main model
/// and reports its best validation metrics.
pub fn run_baseline_mlp(data: &TrainingData, cfg: &TrainConfig) -> Result<(Metrics, FitOutcome)> {
    let transform = WorldTransform::from_bounds(&data.scene.bounds)?;
    let mut mlp = BaselineMlp::new(transform, cfg.seed)?;
    let out = fit(&mut mlp, data, cfg, |_, _| Ok(()))?;
    mlp.params = out.best_params.clone();
    let metrics = evaluate(&mlp, &data.val)?;
    Ok((metrics, out))
}
