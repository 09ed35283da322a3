//! Command implementations.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use probefield::geometry::{load_scene, Aabb, Material, Primitive, Scene, Vec3};
use probefield::model::{gradcheck_model, write_map, write_pgm, Model, ModelConfig, Query, SceneContext, Variant};
use probefield::oracle::{generate_dataset, read_dataset, sample_transmitters, RxGrid, TraceConfig};
use probefield::train::{
    evaluate_model, load_checkpoint, run_ablation, run_baseline_mlp, save_checkpoint, train, Batching, Checkpoint,
    EpochRecord, Metrics, TrainConfig, TrainingData,
};
use probefield::{Error, Result};

use crate::args::{
    parse_fixed, parse_grid, parse_list, AblateArgs, BaselineArgs, BatchingArg, Cli, Command, DatasetArgs, EvalArgs,
    FitArgs, GradcheckArgs, ModelArgs, PredictArgs, ServeArgs, TrainArgs, VariantArg,
};
use crate::manifest::Recorder;

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset(a) => dataset(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Baseline(a) => baseline(&a),
        Command::Predict(a) => predict(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn dataset(a: &DatasetArgs) -> Result<()> {
    let mut rec = Recorder::start("dataset", a, Some(a.seed));
    rec.input(&a.scene)?;
    let scene = load_scene(&a.scene)?;
    let [lo, hi] = parse_fixed::<2>("tx-height", &a.tx_height)?;
    let patterns: Vec<u32> = parse_list("patterns", &a.patterns)?;
    let [nx, ny, nh] = parse_grid(&a.rx_grid)?;
    let heights: Vec<f64> = parse_list("rx-heights", &a.rx_heights)?;
    if heights.len() != nh {
        return Err(Error::validation(format!(
            "--rx-heights lists {} heights but --rx-grid has {nh} layers",
            heights.len()
        )));
    }
    let cfg = TraceConfig {
        frequency_hz: a.freq,
        max_reflection_order: a.max_reflections,
        diffraction_enabled: a.diffraction,
        p_min_db: a.p_min,
        p_max_db: a.p_max,
    };
    cfg.validate()?;
    let tx = sample_transmitters(&scene, a.tx_count, (lo, hi), a.seed)?;
    let grid = RxGrid::over_scene(&scene, nx, ny, heights);
    let t = Instant::now();
    let ds = generate_dataset(&scene, &tx, &patterns, &grid, &cfg, Some(&a.out))?;
    rec.timing("trace", t.elapsed().as_secs_f64());
    rec.output(&a.out)?;
    rec.finish(&a.out)?;
    println!("{} records ({} transmitters × {} patterns × {} receivers) -> {}", ds.records.len(), tx.len(), patterns.len(), grid.len(), a.out.display());
    Ok(())
}

fn train_config(f: &FitArgs, checkpoint_interval: usize) -> TrainConfig {
    TrainConfig {
        batch_size: f.batch_size,
        learning_rate: f.lr,
        epochs: f.epochs,
        seed: f.seed,
        checkpoint_interval,
        patience: f.patience,
        batching: match f.batching {
            BatchingArg::Grouped => Batching::Grouped,
            BatchingArg::Shuffled => Batching::Shuffled,
        },
        groups_per_batch: f.groups_per_batch,
    }
}

fn model_config(m: &ModelArgs, rec: &mut Recorder) -> Result<ModelConfig> {
    let mut cfg = match &m.model_config {
        Some(path) => {
            rec.input(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        }
        None => ModelConfig::default(),
    };
    match m.variant {
        Some(VariantArg::Full) => cfg.variant = Variant::Full,
        Some(VariantArg::NoProbes) => cfg.variant = Variant::NoProbes,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path, rec: &mut Recorder) -> Result<TrainingData> {
    rec.input(path)?;
    TrainingData::from_dataset(&read_dataset(path)?)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut rec = Recorder::start("train", a, Some(a.fit.seed));
    let data = load_data(&a.fit.data, &mut rec)?;
    let mc = model_config(&a.model, &mut rec)?;
    let tc = train_config(&a.fit, a.checkpoint_interval);
    tc.validate()?;
    let ctx = SceneContext::new(&data.scene, &mc)?;
    let history_path = with_suffix(&a.out, ".history.jsonl");
    let mut history = String::new();
    let mut intermediate = Vec::new();
    let t = Instant::now();
    let out = train(&data, &ctx, &mc, &tc, |r: &EpochRecord, model: &Model| {
        history.push_str(&serde_json::to_string(r).expect("record serializes"));
        history.push('\n');
        std::fs::write(&history_path, &history).map_err(|e| Error::io(&history_path, e))?;
        if tc.checkpoint_interval > 0 && (r.epoch + 1) % tc.checkpoint_interval == 0 {
            let path = with_suffix(&a.out, &format!(".epoch{}.rpnc", r.epoch + 1));
            let rounded = Model::from_params(model.config.clone(), model.params.rounded_to_f32())?;
            save_checkpoint(&Checkpoint::new(rounded, tc.digest(), data.p_bounds_db, &data.scene), &path)?;
            intermediate.push(path);
        }
        Ok(())
    })?;
    rec.timing("train", t.elapsed().as_secs_f64());
    let ck = Checkpoint::new(out.model, tc.digest(), data.p_bounds_db, &data.scene);
    save_checkpoint(&ck, &a.out)?;
    rec.output(&a.out)?;
    rec.output(&history_path)?;
    for p in &intermediate {
        rec.output(p)?;
    }
    rec.finish(&a.out)?;
    println!(
        "best epoch {}: val MSE {:.6e}, PSNR {:.3} dB{} -> {}",
        out.best_epoch,
        out.best.mse,
        out.best.psnr,
        if out.stopped_early { " (stopped early)" } else { "" },
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    #[serde(flatten)]
    metrics: Metrics,
    n_val: usize,
    masked: usize,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut rec = Recorder::start("eval", a, None);
    rec.input(&a.model)?;
    let ck = load_checkpoint(&a.model)?;
    let data = load_data(&a.data, &mut rec)?;
    if ck.header.scene_hash != data.scene_hash {
        return Err(Error::validation(format!(
            "checkpoint scene {} does not match dataset scene {}",
            ck.header.scene_hash, data.scene_hash
        )));
    }
    let ctx = SceneContext::new(&ck.scene()?, &ck.model.config)?;
    let t = Instant::now();
    let metrics = evaluate_model(&ck.model, &ctx, &data)?;
    rec.timing("eval", t.elapsed().as_secs_f64());
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.model, ".eval.json"));
    write_json(&out, &EvalReport { metrics, n_val: data.val.len(), masked: data.masked })?;
    rec.output(&out)?;
    rec.finish(&out)?;
    println!("val MSE {:.12e}, PSNR {:.6} dB", metrics.mse, metrics.psnr);
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let mut rec = Recorder::start("ablate", a, Some(a.fit.seed));
    let data = load_data(&a.fit.data, &mut rec)?;
    let mc = model_config(&a.model, &mut rec)?;
    let tc = train_config(&a.fit, 0);
    let seeds: Vec<u64> = parse_list("seeds", &a.seeds)?;
    let t = Instant::now();
    let report = run_ablation(&data, &mc, &tc, &seeds)?;
    rec.timing("ablate", t.elapsed().as_secs_f64());
    write_json(&a.out, &report)?;
    rec.output(&a.out)?;
    rec.finish(&a.out)?;
    let (full, ablated) = report.median_mse();
    println!("median val MSE: full {full:.6e}, without probes {ablated:.6e}");
    Ok(())
}

#[derive(Serialize)]
struct BaselineReport {
    metrics: Metrics,
    best_epoch: usize,
    stopped_early: bool,
    history: Vec<EpochRecord>,
}

fn baseline(a: &BaselineArgs) -> Result<()> {
    let mut rec = Recorder::start("baseline", a, Some(a.fit.seed));
    let data = load_data(&a.fit.data, &mut rec)?;
    let tc = train_config(&a.fit, 0);
    let t = Instant::now();
    let (metrics, out) = run_baseline_mlp(&data, &tc)?;
    rec.timing("train", t.elapsed().as_secs_f64());
    let report = BaselineReport { metrics, best_epoch: out.best_epoch, stopped_early: out.stopped_early, history: out.history };
    write_json(&a.out, &report)?;
    rec.output(&a.out)?;
    rec.finish(&a.out)?;
    println!("baseline val MSE {:.6e}, PSNR {:.3} dB", metrics.mse, metrics.psnr);
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let mut rec = Recorder::start("predict", a, None);
    rec.input(&a.model)?;
    let ck = load_checkpoint(&a.model)?;
    let tx = Vec3::from(parse_fixed::<3>("tx", &a.tx)?);
    let ctx = SceneContext::new(&ck.scene()?, &ck.model.config)?;
    let t = Instant::now();
    let map = ck.model.predict_map(&ctx, &tx, a.pattern, a.height, a.res, (ck.header.p_min_db, ck.header.p_max_db))?;
    rec.timing("predict", t.elapsed().as_secs_f64());
    let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.model, ".map.rpnm"));
    write_map(&map, &out)?;
    rec.output(&out)?;
    if let Some(pgm) = &a.pgm {
        write_pgm(&map, pgm)?;
        rec.output(pgm)?;
    }
    rec.finish(&out)?;
    println!("{}×{} map at {} m -> {}", a.res, a.res, a.height, out.display());
    Ok(())
}

/// The tiny configuration used for gradient checks: two rays, two probe
/// links, 8-wide features.
pub fn micro_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        n: 2,
        k: 2,
        encoder_widths: vec![8],
        point_feature_dim: 8,
        d_model: 8,
        heads: 2,
        pe_frequencies: 2,
        decoder_layers: 2,
        decoder_width: 8,
        point_density: 0.15,
        probe_spacing: Some(8.0),
        ..Default::default()
    }
}

#[derive(Serialize)]
struct GradcheckRow {
    variant: Variant,
    name: String,
    len: usize,
    rel_error: f64,
    max_abs_error: f64,
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut rec = Recorder::start("gradcheck", a, Some(a.seed));
    let scene = Scene::new(
        vec![Primitive::Box { min: [-2.0, -2.0, 0.0], max: [2.0, 2.0, 3.0], material: Material::default() }],
        Some(Aabb::new(Vec3::new(-10.0, -10.0, 0.0), Vec3::new(10.0, 10.0, 6.0))),
    )?;
    let queries = [
        Query { tx: Vec3::new(-6.0, 1.0, 4.0), pattern_id: 0, rx: Vec3::new(5.0, 3.0, 1.5) },
        Query { tx: Vec3::new(-6.0, 1.0, 4.0), pattern_id: 1, rx: Vec3::new(4.0, -7.0, 1.5) },
        Query { tx: Vec3::new(7.0, 7.0, 2.0), pattern_id: 3, rx: Vec3::new(-3.0, 6.5, 2.5) },
    ];
    let targets = [0.2, 0.9, 0.6];
    let mut rows = Vec::new();
    let t = Instant::now();
    for variant in [Variant::Full, Variant::NoProbes] {
        let cfg = micro_config(variant);
        let ctx = SceneContext::new(&scene, &cfg)?;
        let model = Model::new(cfg, a.seed)?;
        for e in gradcheck_model(&model, &ctx, &queries, &targets, a.step)? {
            rows.push(GradcheckRow { variant, name: e.name, len: e.len, rel_error: e.rel_error, max_abs_error: e.max_abs_error });
        }
    }
    rec.timing("gradcheck", t.elapsed().as_secs_f64());
    write_json(&a.out, &rows)?;
    rec.output(&a.out)?;
    rec.finish(&a.out)?;
    let worst = rows.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    let failing: Vec<String> =
        rows.iter().filter(|r| !(r.rel_error < a.tolerance)).map(|r| format!("{:?} {}", r.variant, r.name)).collect();
    println!("{} parameter arrays checked, worst relative error {worst:.3e}", rows.len());
    if !failing.is_empty() {
        return Err(Error::Numerical(format!(
            "relative gradient error >= {} for {}",
            a.tolerance,
            failing.join(", ")
        )));
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> Result<()> {
    let mut rec = Recorder::start("serve", a, None);
    rec.input(&a.model)?;
    let addr: SocketAddr = a
        .addr
        .parse()
        .map_err(|_| Error::validation(format!("--addr: `{}` is not a socket address", a.addr)))?;
    let snapshot = probefield_server::Snapshot::load(&a.model)?;
    rec.finish(&with_suffix(&a.model, ".serve"))?;
    let state = probefield_server::AppState::new(snapshot);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    log::info!("listening on {addr}");
    rt.block_on(probefield_server::serve(state, addr)).map_err(|e| Error::io(format!("socket {addr}"), e))
}
