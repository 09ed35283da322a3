use serde::{Deserialize, Serialize};

use super::{median, train, Metrics, TrainConfig, TrainingData};
use crate::error::Result;
use crate::model::{ModelConfig, SceneContext, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub full: Vec<Metrics>,
    pub no_probes: Vec<Metrics>,
    pub full_param_count: usize,
    pub no_probes_param_count: usize,
}

impl AblationReport {
    pub fn median_mse(&self) -> (f64, f64) {
        let m = |v: &[Metrics]| median(&v.iter().map(|m| m.mse).collect::<Vec<_>>());
        (m(&self.full), m(&self.no_probes))
    }
}

/// Trains the full model and the probe-free variant once per seed under the
/// same budget and reports both validation metric sets.
pub fn run_ablation(
    data: &TrainingData,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let full_cfg = ModelConfig { variant: Variant::Full, ..model_cfg.clone() };
    let ablated_cfg = ModelConfig { variant: Variant::NoProbes, ..model_cfg.clone() };
    let ctx = SceneContext::new(&data.scene, &full_cfg)?;
    let mut report = AblationReport {
        seeds: seeds.to_vec(),
        full: Vec::new(),
        no_probes: Vec::new(),
        full_param_count: 0,
        no_probes_param_count: 0,
    };
    for &seed in seeds {
        let tc = TrainConfig { seed, ..train_cfg.clone() };
        for (cfg, sink, count) in [
            (&full_cfg, &mut report.full, &mut report.full_param_count),
            (&ablated_cfg, &mut report.no_probes, &mut report.no_probes_param_count),
        ] {
            let out = train(data, &ctx, cfg, &tc, |_, _| Ok(()))?;
            log::info!("ablation seed {seed} {:?}: val mse {:.4e}", cfg.variant, out.best.mse);
            *count = out.model.param_count();
            sink.push(out.best);
        }
    }
    Ok(report)
}
