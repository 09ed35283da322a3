//! Flag definitions and `--config` merging.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use probefield::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "probefield", version, about = "Radio coverage prediction with a point-field surrogate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace a dataset with the ray-tracing oracle.
    #[command(args_override_self = true)]
    Dataset(DatasetArgs),
    /// Train the neural model.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Validation metrics of a checkpoint.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Full model vs the variant without probe attention, over several seeds.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
    /// Train and evaluate the plain MLP baseline.
    #[command(args_override_self = true)]
    Baseline(BaselineArgs),
    /// Predict a coverage map.
    #[command(args_override_self = true)]
    Predict(PredictArgs),
    /// Finite-difference gradient check on a tiny configuration.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
    /// Serve a checkpoint over HTTP.
    #[command(args_override_self = true)]
    Serve(ServeArgs),
}

/// JSON file whose keys are flag names (without `--`), or a run manifest.
#[derive(Debug, Args, Serialize)]
pub struct ConfigArg {
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct DatasetArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub tx_count: usize,
    /// Transmitter height range `lo,hi` in meters.
    #[arg(long, default_value = "2,20")]
    pub tx_height: String,
    /// Antenna pattern ids, comma separated.
    #[arg(long, default_value = "0,1")]
    pub patterns: String,
    /// Receiver grid `NXxNYxNH`.
    #[arg(long, default_value = "32x32x1")]
    pub rx_grid: String,
    /// Receiver heights in meters, one per grid layer.
    #[arg(long, default_value = "1.5")]
    pub rx_heights: String,
    #[arg(long, default_value_t = 2.14e9)]
    pub freq: f64,
    #[arg(long, default_value_t = 2)]
    pub max_reflections: u32,
    #[arg(long)]
    pub diffraction: bool,
    #[arg(long, default_value_t = -160.0, allow_negative_numbers = true)]
    pub p_min: f64,
    #[arg(long, default_value_t = -50.0, allow_negative_numbers = true)]
    pub p_max: f64,
    /// Seed for transmitter placement.
    #[arg(long, env = "RPN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchingArg {
    Grouped,
    Shuffled,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Full,
    NoProbes,
}

/// Optimization flags shared by `train`, `ablate`, and `baseline`.
#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, env = "RPN_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, value_enum, default_value_t = BatchingArg::Grouped)]
    pub batching: BatchingArg,
    /// Transmitter-pattern groups pooled per batch when batching is grouped.
    #[arg(long, default_value_t = 8)]
    pub groups_per_batch: usize,
}

/// Model architecture: a JSON model configuration file plus a variant
/// override.
#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    #[arg(long, value_name = "FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_config: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<VariantArg>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Write `<out>.epoch<N>.rpnc` every N epochs; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON; defaults to `<model>.eval.json`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Initialization seeds, comma separated.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct BaselineArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Transmitter position `x,y,z` in meters.
    #[arg(long, allow_hyphen_values = true)]
    pub tx: String,
    #[arg(long, default_value_t = 0)]
    pub pattern: u32,
    #[arg(long, default_value_t = 1.5)]
    pub height: f64,
    #[arg(long, default_value_t = 64)]
    pub res: usize,
    /// Map file; defaults to `<model>.map.rpnm`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Also write a grayscale PGM image here.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pgm: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct GradcheckArgs {
    #[arg(long, env = "RPN_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value = "gradcheck.json")]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[command(flatten)]
    #[serde(skip)]
    pub config: ConfigArg,
}

pub enum ArgError {
    Clap(clap::Error),
    Core(Error),
}

/// Parses `argv`, splicing flags from any `--config` file in front of the
/// command-line flags so the latter override them.
pub fn parse(argv: Vec<OsString>) -> std::result::Result<Cli, ArgError> {
    let mut argv = argv;
    if let Some(path) = config_path(&argv) {
        let injected = config_flags(&path, argv.get(1).and_then(|s| s.to_str())).map_err(ArgError::Core)?;
        argv.splice(2..2, injected.into_iter().map(OsString::from));
    }
    Cli::try_parse_from(argv).map_err(ArgError::Clap)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(2);
    while let Some(a) = it.next() {
        let a = a.to_str()?;
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

fn config_flags(path: &std::path::Path, command: Option<&str>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut obj = match value {
        Value::Object(o) => o,
        _ => return Err(Error::validation(format!("{}: config must be a JSON object", path.display()))),
    };
    // A run manifest carries its flags under "args".
    if let (Some(Value::String(cmd)), Some(Value::Object(args))) = (obj.get("command"), obj.get("args")) {
        if command.is_some_and(|c| c != cmd) {
            return Err(Error::validation(format!(
                "{} is a manifest for `{cmd}`, not `{}`",
                path.display(),
                command.unwrap_or_default()
            )));
        }
        obj = args.clone();
    }
    let mut out = Vec::new();
    for (key, v) in obj {
        if key == "config" {
            return Err(Error::validation(format!("{}: nested config files are not supported", path.display())));
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Null | Value::Bool(false) => {}
            Value::Bool(true) => out.push(flag),
            Value::Number(n) => out.extend([flag, n.to_string()]),
            Value::String(s) => out.push(format!("{flag}={s}")),
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(|i| match i {
                        Value::Number(n) => Ok(n.to_string()),
                        Value::String(s) => Ok(s.clone()),
                        _ => Err(Error::validation(format!("{}: `{key}` must hold scalars", path.display()))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(format!("{flag}={}", parts.join(",")));
            }
            Value::Object(_) => {
                return Err(Error::validation(format!("{}: `{key}` must not be an object", path.display())))
            }
        }
    }
    Ok(out)
}

/// Comma-separated numbers, e.g. `"0,0,10"`.
pub fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::validation(format!("--{flag}: cannot parse `{p}` in `{s}`")))
        })
        .collect()
}

pub fn parse_fixed<const N: usize>(flag: &str, s: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(flag, s)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::validation(format!("--{flag}: expected {N} values, got {}", v.len())))
}

/// `NXxNYxNH`.
pub fn parse_grid(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse().map_err(|_| Error::validation(format!("--rx-grid: cannot parse `{s}`"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::validation(format!("--rx-grid: expected NXxNYxNH, got `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(parts: &[&str]) -> Vec<OsString> {
        parts.iter().map(OsString::from).collect()
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"epochs": 7, "lr": 0.01, "data": "a.rpnd", "out": "m.rpnc"}"#).unwrap();
        let cli = match parse(argv(&["probefield", "train", "--config", cfg.to_str().unwrap(), "--epochs", "3"])) {
            Ok(c) => c,
            Err(_) => panic!("parse failed"),
        };
        let Command::Train(t) = cli.command else { panic!() };
        assert_eq!(t.fit.epochs, 3);
        assert_eq!(t.fit.lr, 0.01);
        assert_eq!(t.fit.data, PathBuf::from("a.rpnd"));
    }

    #[test]
    fn list_and_grid_parsing() {
        assert_eq!(parse_fixed::<3>("tx", "0,-1.5,10").unwrap(), [0.0, -1.5, 10.0]);
        assert!(parse_fixed::<3>("tx", "0,1").is_err());
        assert_eq!(parse_grid("32x16x2").unwrap(), [32, 16, 2]);
        assert!(parse_grid("32x16").is_err());
        assert_eq!(parse_list::<u64>("seeds", "0,1,2").unwrap(), vec![0, 1, 2]);
    }
}
