//! Command-line surface. Every command writes into
//! `<out-dir>/<manifest hash>/` next to a `manifest.txt`.

pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use manifest::{sha256_hex, RunManifest};

use crate::data::{
    label_map_bytes, normalize, save_cube, stratified_split, synthesize_cube, HsiCube, SampleSplit, SynthSpec,
};
use crate::error::{Error, Result};
use crate::model::{read_checkpoint, write_checkpoint, SdmambaConfig};
use crate::model::SdmambaModel;
use crate::params::Parameterized;
use crate::train::{embedding_text, evaluate, lambda_sweep, predict_map, sweep_table, train, SWEEP_LAMBDAS};

#[derive(Debug, Parser)]
#[command(name = "sdmamba", version, about = "Sparse deformable Mamba hyperspectral classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled cube.
    Synth(SynthArgs),
    /// Train on a cube and save checkpoint, history, split and manifest.
    Train(TrainArgs),
    /// Print accuracy metrics of a checkpoint.
    Eval(EvalArgs),
    /// Write a label map for every labeled pixel.
    Predict(ModelArgs),
    /// Print sparse and dense FLOP counts over a sweep of ratios.
    Flops(FlopsArgs),
    /// Write fused centre-pixel features.
    Export(EvalArgs),
}

/// Overrides for every config field. Unset flags fall back to the config
/// file, then to the defaults.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// Flat key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, visible_alias = "patch", alias = "patch_size")]
    pub patch_size: Option<usize>,
    #[arg(long, visible_alias = "bands", alias = "in_bands")]
    pub in_bands: Option<usize>,
    #[arg(long, visible_alias = "hidden", alias = "hidden_dim")]
    pub hidden_dim: Option<usize>,
    #[arg(long, visible_alias = "classes", alias = "num_classes")]
    pub num_classes: Option<usize>,
    /// Sets both sparsity ratios.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, alias = "lambda_spatial")]
    pub lambda_spatial: Option<f64>,
    #[arg(long, alias = "lambda_spectral")]
    pub lambda_spectral: Option<f64>,
    #[arg(long, alias = "d_state")]
    pub d_state: Option<usize>,
    #[arg(long)]
    pub expand: Option<usize>,
    #[arg(long, alias = "stem_kernel")]
    pub stem_kernel: Option<usize>,
    #[arg(long, alias = "use_conv")]
    pub use_conv: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, visible_alias = "lr", alias = "learning_rate")]
    pub learning_rate: Option<f64>,
    #[arg(long, visible_alias = "batch", alias = "batch_size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Leave a one-pixel unlabeled border.
    #[arg(long)]
    pub background: bool,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 0.1)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_ratio: f64,
    /// Skip per-band min-max scaling.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value = "runs")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Split file from `train`; without it every labeled pixel is used.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Which part of the split: train, val or test.
    #[arg(long, default_value = "test")]
    pub set: String,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
}

impl ConfigArgs {
    /// Defaults, then the config file, then flags. Returns the keys that
    /// were set explicitly.
    pub fn resolve(&self) -> Result<(SdmambaConfig, Vec<String>)> {
        let mut cfg = SdmambaConfig::default();
        let mut explicit = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
            explicit.extend(
                text.lines()
                    .filter_map(|l| l.split_once('='))
                    .map(|(k, _)| k.trim().to_string()),
            );
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
                explicit.push(key.into());
            }
            Ok(())
        };
        let s = |v: Option<usize>| v.map(|x| x.to_string());
        let f = |v: Option<f64>| v.map(|x| x.to_string());
        set("patch_size", s(self.patch_size))?;
        set("in_bands", s(self.in_bands))?;
        set("hidden_dim", s(self.hidden_dim))?;
        set("num_classes", s(self.num_classes))?;
        set("lambda_spatial", f(self.lambda))?;
        set("lambda_spectral", f(self.lambda))?;
        set("lambda_spatial", f(self.lambda_spatial))?;
        set("lambda_spectral", f(self.lambda_spectral))?;
        set("d_state", s(self.d_state))?;
        set("expand", s(self.expand))?;
        set("stem_kernel", s(self.stem_kernel))?;
        set("use_conv", self.use_conv.map(|b| b.to_string()))?;
        set("seed", self.seed.map(|x| x.to_string()))?;
        set("learning_rate", f(self.learning_rate))?;
        set("batch_size", s(self.batch_size))?;
        set("epochs", s(self.epochs))?;
        Ok((cfg, explicit))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_inputs(args: &ModelArgs) -> Result<(Vec<u8>, Vec<u8>, SdmambaModel, HsiCube)> {
    let ckpt = read(&args.checkpoint)?;
    let cube_bytes = read(&args.cube)?;
    let model = read_checkpoint(&ckpt)?;
    let mut cube = HsiCube::from_bytes(&cube_bytes)?;
    if !args.raw {
        cube = normalize(&cube);
    }
    if cube.bands != model.config.in_bands || cube.num_classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint expects {} bands and {} classes, cube has {} and {}",
            model.config.in_bands, model.config.num_classes, cube.bands, cube.num_classes
        )));
    }
    Ok((ckpt, cube_bytes, model, cube))
}

fn select_coords(args: &EvalArgs, cube: &HsiCube) -> Result<Vec<(usize, usize)>> {
    let Some(path) = &args.split else {
        return Ok(cube.labeled_coords());
    };
    let split = SampleSplit::load(path)?;
    let coords = match args.set.as_str() {
        "train" => split.train,
        "val" => split.val,
        "test" => split.test,
        other => return Err(Error::Config(format!("unknown split set `{other}`"))),
    };
    if let Some(&(r, c)) = coords.iter().find(|&&(r, c)| r >= cube.height || c >= cube.width) {
        return Err(Error::Validation(format!("split pixel ({r}, {c}) lies outside the cube")));
    }
    Ok(coords)
}

/// Runs one command and returns what it would print.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Flops(a) => cmd_flops(&a),
        Command::Export(a) => cmd_export(&a),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let spec = SynthSpec {
        size: a.size,
        bands: a.bands,
        classes: a.classes,
        noise_sigma: a.noise,
        seed: a.seed,
        background: a.background,
    };
    let cube = synthesize_cube(&spec)?;
    let mut m = RunManifest::new("synth", a.seed);
    m.param("size", a.size)
        .param("bands", a.bands)
        .param("classes", a.classes)
        .param("noise", a.noise)
        .param("background", a.background);
    let dir = m.create_run_dir(&a.out_dir)?;
    let path = dir.join("cube.hsc");
    save_cube(&cube, &path)?;
    Ok(format!("{}\n", path.display()))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let cube_bytes = read(&a.cube)?;
    let mut cube = HsiCube::from_bytes(&cube_bytes)?;
    if !a.raw {
        cube = normalize(&cube);
    }
    let (mut cfg, explicit) = a.config.resolve()?;
    if !explicit.iter().any(|k| k == "in_bands") {
        cfg.in_bands = cube.bands;
    }
    if !explicit.iter().any(|k| k == "num_classes") {
        cfg.num_classes = cube.num_classes;
    }
    cfg.validate()?;
    if cfg.in_bands != cube.bands || cfg.num_classes != cube.num_classes {
        return Err(Error::Config(format!(
            "config has {} bands and {} classes, cube has {} and {}",
            cfg.in_bands, cfg.num_classes, cube.bands, cube.num_classes
        )));
    }

    let split = stratified_split(&cube, a.train_ratio, a.val_ratio, cfg.seed)?;
    let mut m = RunManifest::new("train", cfg.seed);
    m.input("cube", &cube_bytes)
        .param("train_ratio", a.train_ratio)
        .param("val_ratio", a.val_ratio)
        .param("normalize", !a.raw);
    m.config = Some(cfg.clone());
    let dir = m.create_run_dir(&a.out_dir)?;
    split.save(dir.join("split.txt"))?;

    let outcome = train(SdmambaModel::new(cfg)?, &cube, &split)?;
    std::fs::write(dir.join("model.sdmb"), write_checkpoint(&outcome.model))?;
    std::fs::write(dir.join("history.csv"), outcome.history.to_text())?;
    let report = evaluate(&outcome.model, &cube, &split.test)?;
    Ok(format!(
        "run directory {}\nparameters {}\nbest epoch {}\ntest OA {:.4}  AA {:.4}  kappa {:.4}\n",
        dir.display(),
        outcome.model.num_parameters(),
        outcome.best_epoch,
        report.oa,
        report.aa,
        report.kappa
    ))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let (_, _, model, cube) = load_inputs(&a.model)?;
    let coords = select_coords(a, &cube)?;
    Ok(format!("{}\n", evaluate(&model, &cube, &coords)?))
}

pub fn cmd_predict(a: &ModelArgs) -> Result<String> {
    let (ckpt, cube_bytes, model, cube) = load_inputs(a)?;
    let map = predict_map(&model, &cube)?;
    let mut m = RunManifest::new("predict", model.config.seed);
    m.input("checkpoint", &ckpt).input("cube", &cube_bytes).param("normalize", !a.raw);
    let dir = m.create_run_dir(&a.out_dir)?;
    let path = dir.join("labels.hsl");
    std::fs::write(&path, label_map_bytes(cube.height, cube.width, &map))?;
    Ok(format!("{}\n", path.display()))
}

pub fn cmd_flops(a: &FlopsArgs) -> Result<String> {
    let (cfg, _) = a.config.resolve()?;
    cfg.validate()?;
    Ok(sweep_table(&lambda_sweep(&cfg, &SWEEP_LAMBDAS)))
}

pub fn cmd_export(a: &EvalArgs) -> Result<String> {
    let (ckpt, cube_bytes, model, cube) = load_inputs(&a.model)?;
    let coords = select_coords(a, &cube)?;
    let mut m = RunManifest::new("export", model.config.seed);
    m.input("checkpoint", &ckpt)
        .input("cube", &cube_bytes)
        .param("normalize", !a.model.raw)
        .param("set", &a.set);
    if let Some(split) = &a.split {
        m.input("split", &read(split)?);
    }
    let dir = m.create_run_dir(&a.model.out_dir)?;
    let path = dir.join("embeddings.csv");
    std::fs::write(&path, embedding_text(&model, &cube, &coords)?)?;
    Ok(format!("{}\n", path.display()))
}
