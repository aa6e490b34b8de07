//! `dmfa`: train, evaluate and inspect conditional density models of images.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use dmfa_core::dmfa::{ArchKind, DmfaNetwork};
use dmfa_core::eval::{self, Metrics};
use dmfa_core::mfa::{self, MfaTrainConfig};
use dmfa_core::tensorio::{self, Container};
use dmfa_core::trainer::{self, TrainConfig, TrainState};
use dmfa_core::{Dataset, ImageShape, Imputation, MfaModel};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] dmfa_core::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dmfa", version, about = "Conditional densities of missing image regions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a mixture of factor analyzers on complete images.
    TrainMfa(TrainMfaArgs),
    /// Train the deep conditional model on complete images with simulated masks.
    TrainDmfa(TrainDmfaArgs),
    /// Score one or more models on the same evaluation masks.
    Eval(EvalArgs),
    /// Write an imputation grid for the first test images.
    Impute(ImputeArgs),
    /// Export mean, factor and noise images of one model output.
    ExportParams(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Idx,
    Imgdir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ArchArg {
    ConvDense,
    FullConv,
    Dense,
}

impl From<ArchArg> for ArchKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::ConvDense => ArchKind::ConvDense,
            ArchArg::FullConv => ArchKind::FullConv,
            ArchArg::Dense => ArchKind::Dense,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ImputeMode {
    TopComponent,
    MixtureMean,
}

impl From<ImputeMode> for Imputation {
    fn from(m: ImputeMode) -> Self {
        match m {
            ImputeMode::TopComponent => Imputation::TopComponent,
            ImputeMode::MixtureMean => Imputation::MixtureMean,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// IDX image file (optionally gzipped) or directory of PGM/PPM images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "idx")]
    format: Format,
    /// Image size for --format imgdir.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    size: Vec<usize>,
    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainMfaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 6)]
    latent: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainDmfaArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, value_enum, default_value = "conv-dense")]
    arch: ArchArg,
    /// Comma-separated layer widths overriding the architecture default.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 4)]
    latent: usize,
    #[arg(long, default_value_t = 4e-5)]
    lr: f32,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Missing patch size; defaults to half the image side.
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    patch: Option<Vec<usize>>,
    /// Epochs trained on NLL plus squared error; defaults to 10 for
    /// full-conv and 0 otherwise.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    mse_weight: f32,
    #[arg(long, default_value_t = 10)]
    checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Model files (MFA or DMFA); repeat to compare several.
    #[arg(long, required = true, num_args = 1..)]
    model: Vec<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    patch: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "top-component")]
    impute_mode: ImputeMode,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ImputeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, num_args = 0..)]
    model: Vec<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    patch: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "top-component")]
    impute_mode: ImputeMode,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
    /// Grid rows (first test images).
    #[arg(long, default_value_t = 8)]
    rows: usize,
}

#[derive(Debug, Args, Serialize)]
struct ExportArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long)]
    model: PathBuf,
    /// Test image whose masked version is fed to the model.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    patch: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    mask_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Applies `DMFA_THREADS` to the global worker pool.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DMFA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("DMFA_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainMfa(a) => train_mfa(a),
        Command::TrainDmfa(a) => train_dmfa(a),
        Command::Eval(a) => evaluate(a),
        Command::Impute(a) => impute(a),
        Command::ExportParams(a) => export_params(a),
    }
}

fn check_input(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn prepare_out(out: &OutArgs) -> Result<&Path> {
    fs::create_dir_all(&out.out).map_err(|e| CliError::Usage(format!("cannot create --out {}: {e}", out.out.display())))?;
    Ok(&out.out)
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let data = match args.format {
        Format::Idx => tensorio::load_idx(&args.data)?,
        Format::Imgdir => tensorio::load_image_dir(&args.data, args.size[0], args.size[1])?,
    };
    Ok(match args.limit {
        Some(n) => data.take(n),
        None => data,
    })
}

/// Half the image side (14×14 on 28×28, 16×16 on 32×32) unless given.
fn resolve_patch(patch: &Option<Vec<usize>>, shape: ImageShape) -> (usize, usize) {
    match patch.as_deref() {
        Some([h, w]) => (*h, *w),
        _ => ((shape.height / 2).max(1), (shape.width / 2).max(1)),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("serializable");
    fs::write(path, bytes).map_err(io_err(path))
}

/// Records the resolved invocation so a run can be repeated exactly.
fn write_manifest(out: &Path, command: &str, args: &impl Serialize, resolved: Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "argv": std::env::args().skip(1).collect::<Vec<_>>(),
        "args": args,
        "resolved": resolved,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": rayon::current_num_threads(),
    });
    write_json(&out.join("manifest.json"), &manifest)
}

struct JsonLines {
    path: PathBuf,
    file: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            file: BufWriter::new(file),
        })
    }

    fn push(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).expect("serializable");
        writeln!(self.file, "{line}")
            .and_then(|_| self.file.flush())
            .map_err(io_err(&self.path))
    }
}

fn train_mfa(a: TrainMfaArgs) -> Result<()> {
    check_input(&a.data.data, "--data")?;
    let out = prepare_out(&a.out)?;
    let data = load_data(&a.data)?;
    let config = MfaTrainConfig {
        k: a.k,
        latent: a.latent,
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    write_manifest(out, "train-mfa", &a, json!({ "config": config, "shape": data.shape() }))?;
    let outcome = mfa::train_mfa(&data, &config)?;
    let mut log = JsonLines::create(out.join("train-log.jsonl"), false)?;
    for record in &outcome.trace {
        log.push(record)?;
        eprintln!("epoch {:>3}  nll {:.3}", record.epoch, record.mean_nll);
    }
    let meta = json!({ "shape": data.shape(), "config": config, "initial_nll": outcome.initial_nll });
    tensorio::save_container(out.join("mfa.dmfa"), &outcome.model.to_container(meta))?;
    Ok(())
}

fn train_dmfa(a: TrainDmfaArgs) -> Result<()> {
    check_input(&a.data.data, "--data")?;
    if let Some(r) = &a.resume {
        check_input(r, "--resume")?;
    }
    let out = prepare_out(&a.out)?;
    let data = load_data(&a.data)?;
    let arch: ArchKind = a.arch.into();
    let config = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch: a.batch,
        seed: a.seed,
        warmup_epochs: a
            .warmup_epochs
            .unwrap_or(if arch == ArchKind::FullConv { 10 } else { 0 })
            .min(a.epochs),
        patch: resolve_patch(&a.patch, data.shape()),
        arch,
        widths: a.widths.clone(),
        latent: a.latent,
        mse_weight: a.mse_weight,
        checkpoint_every: a.checkpoint_every,
    };
    config
        .validate(data.shape())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut state = match &a.resume {
        Some(path) => {
            let (state, saved) = TrainState::load(path)?;
            let same_run = TrainConfig {
                epochs: config.epochs,
                checkpoint_every: config.checkpoint_every,
                ..saved
            };
            if same_run != config {
                return Err(CliError::Usage(
                    "--resume checkpoint was trained with a different configuration".into(),
                ));
            }
            state
        }
        None => TrainState::init(&data, &config)?,
    };
    write_manifest(
        out,
        "train-dmfa",
        &a,
        json!({ "config": config, "shape": data.shape(), "start_epoch": state.epochs_done }),
    )?;
    let mut log = JsonLines::create(out.join("train-log.jsonl"), a.resume.is_some())?;
    let mut on_epoch = |r: &trainer::EpochLog| {
        eprintln!(
            "epoch {:>3}  {}  loss {:.3}  nll {:.3}  ({:.1}s)",
            r.epoch, r.loss_mode, r.mean_loss, r.mean_nll, r.seconds
        );
        log.push(r).map_err(|e| dmfa_core::Error::Config(e.to_string()))
    };
    trainer::run_epochs(&data, &config, &mut state, config.epochs, Some(out), &mut on_epoch)?;
    let meta = json!({ "shape": data.shape(), "config": config });
    tensorio::save_container(out.join("dmfa.dmfa"), &state.net.to_container(meta))?;
    Ok(())
}

enum Model {
    Mfa(MfaModel<f32>),
    Dmfa(DmfaNetwork),
}

impl Model {
    fn load(path: &Path) -> Result<Self> {
        let c: Container = tensorio::load_container(path)?;
        match c.meta.get("model").and_then(Value::as_str) {
            Some("mfa") => Ok(Model::Mfa(MfaModel::from_container(&c)?)),
            Some("dmfa") => Ok(Model::Dmfa(DmfaNetwork::from_container(&c)?)),
            other => Err(dmfa_core::Error::Format(format!(
                "{}: unsupported model kind {other:?}",
                path.display()
            ))
            .into()),
        }
    }

    fn check_shape(&self, shape: ImageShape, path: &Path) -> Result<()> {
        let ok = match self {
            Model::Mfa(m) => m.dim() == shape.len(),
            Model::Dmfa(n) => n.shape() == shape,
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "model {} does not match data shape {shape:?}",
                path.display()
            )))
        }
    }
}

fn load_models(paths: &[PathBuf], shape: ImageShape) -> Result<Vec<Model>> {
    for p in paths {
        check_input(p, "--model")?;
    }
    paths
        .iter()
        .map(|p| {
            let m = Model::load(p)?;
            m.check_shape(shape, p)?;
            Ok(m)
        })
        .collect()
}

fn evaluate(a: EvalArgs) -> Result<()> {
    check_input(&a.data.data, "--data")?;
    let out = prepare_out(&a.out)?;
    let data = load_data(&a.data)?;
    let models = load_models(&a.model, data.shape())?;
    let patch = resolve_patch(&a.patch, data.shape());
    write_manifest(out, "eval", &a, json!({ "patch": patch, "shape": data.shape() }))?;
    let mut results = Vec::with_capacity(models.len());
    for (model, path) in models.iter().zip(&a.model) {
        let mut m: Metrics = match model {
            Model::Mfa(mix) => eval::evaluate_mfa(mix, &data, patch, a.mask_seed, a.impute_mode.into())?,
            Model::Dmfa(net) => eval::evaluate_dmfa(net, &data, patch, a.mask_seed)?,
        };
        m.model = format!("{}:{}", m.model, path.display());
        eprintln!("{}  nll {:.3}  mse {:.3}", m.model, m.mean_nll, m.mean_mse);
        results.push(m);
    }
    write_json(
        &out.join("metrics.json"),
        &json!({ "mask_seed": a.mask_seed, "patch": patch, "pixel_scale": eval::PIXEL_SCALE, "models": results }),
    )
}

fn impute(a: ImputeArgs) -> Result<()> {
    check_input(&a.data.data, "--data")?;
    let out = prepare_out(&a.out)?;
    let data = load_data(&a.data)?;
    let models = load_models(&a.model, data.shape())?;
    let patch = resolve_patch(&a.patch, data.shape());
    write_manifest(out, "impute", &a, json!({ "patch": patch, "shape": data.shape() }))?;
    let subset = data.take(a.rows);
    let samples = eval::eval_samples(&subset, patch, a.mask_seed)?;
    let imputations = models
        .iter()
        .map(|m| match m {
            Model::Mfa(mix) => eval::mfa_imputations(mix, &samples, a.impute_mode.into()),
            Model::Dmfa(net) => eval::dmfa_imputations(net, &samples),
        })
        .collect::<dmfa_core::Result<Vec<_>>>()?;
    let ext = if data.shape().channels == 3 { "ppm" } else { "pgm" };
    let layout = eval::export_imputation_grid(out.join(format!("grid.{ext}")), &samples, &imputations)?;
    let columns: Vec<String> = ["original", "masked"]
        .iter()
        .map(|s| s.to_string())
        .chain(a.model.iter().map(|p| p.display().to_string()))
        .collect();
    write_json(&out.join("grid.json"), &json!({ "layout": layout, "columns": columns }))
}

fn export_params(a: ExportArgs) -> Result<()> {
    check_input(&a.data.data, "--data")?;
    check_input(&a.model, "--model")?;
    let out = prepare_out(&a.out)?;
    let data = load_data(&a.data)?;
    if a.index >= data.count() {
        return Err(CliError::Usage(format!(
            "--index {} out of range for {} images",
            a.index,
            data.count()
        )));
    }
    let model = Model::load(&a.model)?;
    model.check_shape(data.shape(), &a.model)?;
    let patch = resolve_patch(&a.patch, data.shape());
    write_manifest(out, "export-params", &a, json!({ "patch": patch, "shape": data.shape() }))?;
    let mask = eval::eval_mask(data.shape(), patch, a.mask_seed, a.index)?;
    let sample = dmfa_core::apply_mask(data.sample(a.index), &mask)?;
    let g = match &model {
        Model::Dmfa(net) => net.forward(&sample)?,
        Model::Mfa(mix) => mix.component(mix.top_component()).clone(),
    };
    let images = eval::export_parameter_images(&g, data.shape(), out, "")?;
    mask.write_pgm(out.join("mask.pgm"))?;
    let missing = mask.missing_indices();
    let mut d_m: Vec<f32> = missing.iter().map(|&i| g.noise()[i]).collect();
    d_m.sort_by(f32::total_cmp);
    write_json(
        &out.join("params.json"),
        &json!({ "images": images, "median_missing_noise": d_m.get(d_m.len() / 2) }),
    )
}
