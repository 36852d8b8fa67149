//! Command-line front end: synthesize data, train, evaluate, predict and
//! report from one TOML configuration, with flags taking precedence.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! command-line flags. The merged result is written to
//! `run_config_resolved.toml` in the output directory of every command.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use semimamba::backbones::Network;
use semimamba::data::{
    load_dataset, read_mask_png, resize_bilinear, resize_nearest_to, split, synth_generate, write_mask, Sample,
    SplitManifest, SynthConfig, MANIFEST_FILE,
};
use semimamba::evaluation::{emit_report, evaluate_predictions, predict_masks, report_from_metrics, Evaluation};
use semimamba::trainer::{train, TrainConfig};
use semimamba::{Error, Result};

pub const RESOLVED_CONFIG_FILE: &str = "run_config_resolved.toml";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Everything a command can be configured with.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    /// Defaults to `<data_root>/manifest.toml`.
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out_dir
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: pass --out or set out_dir".into()))
    }

    fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset: pass --data or set data_root".into()))
    }

    fn manifest_path(&self) -> Result<PathBuf> {
        match &self.manifest {
            Some(m) => Ok(m.clone()),
            None => Ok(self.data_root()?.join(MANIFEST_FILE)),
        }
    }

    /// Writes the resolved snapshot into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Parser)]
#[command(name = "semimamba", version, about = "Semi-supervised segmentation with a Mamba/CNN network pair")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic nested-shape dataset and its split manifest.
    Synth(SynthArgs),
    /// Train the network pair.
    Train(TrainArgs),
    /// Score a checkpoint or a directory of predicted masks.
    Eval(EvalArgs),
    /// Write predicted masks as PNGs.
    Predict(PredictArgs),
    /// Render histogram and box-plot data from a metrics file.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(d) = self.deterministic {
            cfg.train.deterministic = d;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset root (`<case>/slice_<k>_img.png`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split manifest; defaults to `<data>/manifest.toml`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.data {
            cfg.data_root = Some(d.clone());
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
        }
    }
}

fn parse_classes(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(c @ (2 | 4)) => Ok(c),
        Ok(c) => Err(format!("{c} classes unsupported; use 2 or 4")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
    #[arg(long, value_parser = parse_classes)]
    pub classes: Option<usize>,
    /// Side length of the generated square slices.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub labelled_per_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub validate_every: Option<usize>,
    /// Input size of both networks.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Disable cross pseudo-label supervision.
    #[arg(long)]
    pub no_semi: bool,
    /// Disable the feature-consistency term.
    #[arg(long)]
    pub no_contra: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Labelled,
    Validation,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Network checkpoint to run on the split.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<case>/slice_<k>_pred.png` masks.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Label used in the box-plot file.
    #[arg(long, default_value = "semi-mamba")]
    pub method: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// `metrics.csv` written by `eval`.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value = "semi-mamba")]
    pub method: String,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        Error::Io { .. } | Error::Parse { .. } | Error::Validation(_) | Error::ClassRange { .. } | Error::Checkpoint(_) => {
            EXIT_DATA
        }
        _ => EXIT_INTERNAL,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Report(a) => cmd_report(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn resolve_synth(a: &SynthArgs) -> Result<RunConfig> {
    let mut cfg = a.common.resolve()?;
    let s = &mut cfg.synth;
    if let Some(v) = a.cases {
        s.cases = v;
    }
    if let Some(v) = a.slices {
        s.slices_per_case = v;
    }
    if let Some(v) = a.classes {
        s.classes = v;
    }
    if let Some(v) = a.size {
        s.size = v;
    }
    if let Some(v) = a.common.seed {
        s.seed = v;
    }
    cfg.out_dir()?;
    Ok(cfg)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = resolve_synth(a)?;
    let out = cfg.out_dir()?;
    synth_generate(&cfg.synth, out)?;
    cfg.write_snapshot()?;
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn resolve_train(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = a.common.resolve()?;
    a.data.apply(&mut cfg);
    let t = &mut cfg.train;
    if let Some(v) = a.common.seed {
        t.seed = v;
    }
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.labelled_per_batch {
        t.labelled_per_batch = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.validate_every {
        t.validate_every = v;
    }
    if let Some(v) = a.input_size {
        t.network1.input_size = v;
        t.network2.input_size = v;
    }
    if a.no_semi {
        t.semi = false;
    }
    if a.no_contra {
        t.contra = false;
    }
    t.validate()?;
    cfg.out_dir()?;
    cfg.data_root()?;
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train(a)?;
    cfg.write_snapshot()?;
    let outcome = train(&cfg.train, cfg.data_root()?, &cfg.manifest_path()?, cfg.out_dir()?)?;
    println!("{}", serde_json::to_string_pretty(&outcome.record).map_err(|e| Error::Config(e.to_string()))?);
    Ok(())
}

/// Samples of one split at native resolution; all carry masks.
fn load_split(cfg: &RunConfig, classes: usize, which: SplitName) -> Result<Vec<Sample>> {
    let manifest = SplitManifest::read(&cfg.manifest_path()?)?;
    let samples = load_dataset(cfg.data_root()?, classes)?;
    let splits = split(&samples, &manifest)?;
    Ok(match which {
        SplitName::Labelled => splits.labelled,
        SplitName::Validation => splits.validation,
        SplitName::Test => splits.test,
    })
}

fn load_checkpoint(path: &Path) -> Result<Network> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    Network::load(path)
}

/// Predicts at the network's input size and maps masks back to each slice's
/// native resolution.
pub fn predict_native(net: &Network, samples: &[Sample], batch: usize) -> Result<Vec<Array2<u8>>> {
    let size = net.spec().input_size;
    let resized: Vec<Array2<f32>> = samples.iter().map(|s| resize_bilinear(&s.image, size)).collect();
    let refs: Vec<&Array2<f32>> = resized.iter().collect();
    let preds = predict_masks(net, &refs, batch)?;
    Ok(preds
        .iter()
        .zip(samples)
        .map(|(p, s)| resize_nearest_to(p, s.image.dim()))
        .collect())
}

pub fn prediction_path(dir: &Path, case_id: &str, slice_index: usize) -> PathBuf {
    dir.join(case_id).join(format!("slice_{slice_index}_pred.png"))
}

fn print_aggregate(eval: &Evaluation) -> Result<()> {
    let text = serde_json::to_string_pretty(&eval.aggregate).map_err(|e| Error::Config(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    a.data.apply(&mut cfg);
    cfg.out_dir()?;
    let eval = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            let net = load_checkpoint(ckpt)?;
            let classes = net.spec().classes;
            let samples = load_split(&cfg, classes, a.split)?;
            let preds = predict_native(&net, &samples, cfg.train.eval_batch_size)?;
            evaluate_predictions(&samples, &preds, classes)?
        }
        (None, Some(dir)) => {
            let classes = cfg.train.classes();
            let samples = load_split(&cfg, classes, a.split)?;
            let preds = samples
                .iter()
                .map(|s| read_mask_png(&prediction_path(dir, &s.case_id, s.slice_index), classes))
                .collect::<Result<Vec<_>>>()?;
            evaluate_predictions(&samples, &preds, classes)?
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    cfg.write_snapshot()?;
    emit_report(&eval, &a.method, cfg.out_dir()?)?;
    print_aggregate(&eval)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    a.data.apply(&mut cfg);
    let out = cfg.out_dir()?.to_path_buf();
    let net = load_checkpoint(&a.checkpoint)?;
    let samples = load_split(&cfg, net.spec().classes, a.split)?;
    let preds = predict_native(&net, &samples, cfg.train.eval_batch_size)?;
    cfg.write_snapshot()?;
    for (s, p) in samples.iter().zip(&preds) {
        let path = prediction_path(&out, &s.case_id, s.slice_index);
        let parent = path.parent().unwrap();
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        write_mask(&path, p)?;
    }
    println!("{} masks written to {}", preds.len(), out.display());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let out = cfg.out_dir()?;
    cfg.write_snapshot()?;
    report_from_metrics(&a.metrics, &a.method, out)?;
    println!("report written to {}", out.display());
    Ok(())
}
