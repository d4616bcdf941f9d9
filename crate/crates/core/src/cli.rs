//! Command-line front end: config resolution, subcommand dispatch and run directories.
//!
//! Settings resolve in three layers, later ones winning: built-in defaults,
//! the `--config` TOML file (sections `[model]`, `[train]`, `[data]`, `[run]`),
//! then command-line flags. Every run directory receives a `manifest.toml`
//! in the same format, so `--config <run>/manifest.toml` repeats the run.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_directory, load_images, resize_mask_nearest, split, split_hash, write_image_png,
    write_index_png, write_label_png, write_overlay_png, Palette, SegmentationSample, SplitSpec,
};
use crate::diagnostics::gradient_suite;
use crate::error::{Error, Result};
use crate::metrics::LabelMap;
use crate::model::{count_parameters, DaTransUnet, ModelConfig};
use crate::tensor::{DType, Scalar, TensorError};
use crate::train::{load_checkpoint, read_header, run_ablation, AblationAxes, OptimizerKind, TrainConfig, Trainer};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Run(#[from] Error),
    #[error("gradient check exceeded its tolerance: {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Run(Error::Config(_)) => EXIT_USAGE,
            CliError::Gradcheck(_)
            | CliError::Run(Error::NonFiniteLoss { .. })
            | CliError::Run(Error::Tensor(TensorError::NonFinite { .. })) => EXIT_NUMERIC,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `images/` and `masks/` with matching file stems.
    pub dir: Option<PathBuf>,
    /// Generate this many synthetic samples at the model's input size instead of reading `dir`.
    pub synthetic_count: Option<usize>,
    pub synthetic_seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Mask colors; by default gray levels spread evenly over the label range.
    pub palette: Option<Palette>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            synthetic_count: None,
            synthetic_seed: 0,
            train_fraction: SplitSpec::default().train_fraction,
            split_seed: 0,
            palette: None,
        }
    }
}

/// Run-level settings plus provenance filled in when a manifest is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunInfo {
    pub dtype: String,
    /// Parent of the timestamped run directories.
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_hash: Option<String>,
}

impl Default for RunInfo {
    fn default() -> Self {
        RunInfo {
            dtype: DType::F32.name().into(),
            output: PathBuf::from("runs"),
            tool_version: None,
            command: None,
            created: None,
            split_hash: None,
        }
    }
}

/// Fully resolved settings of a run; also the config file format.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub run: RunInfo,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("encoding manifest: {e}")))
    }

    pub fn dtype(&self) -> Result<DType> {
        DType::parse(&self.run.dtype)
            .ok_or_else(|| Error::Config(format!("dtype `{}` is not f32 or f64", self.run.dtype)))
    }
}

#[derive(Debug, Parser)]
#[command(name = "datransunet", version, about = "Dual-attention Transformer U-Net segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint, curves and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write predicted class-index masks and overlays for a folder of images.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences in 64-bit.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per attention configuration.
    Ablate(AblateArgs),
    /// Write a synthetic shapes dataset to disk.
    Synth(SynthArgs),
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML config with [model], [train], [data] and [run] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory containing images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use this many synthetic samples instead of a dataset directory.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
    /// Seeds model initialization and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    pub dtype: Option<String>,
    /// Parent directory for run outputs.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "sgd" => Ok(OptimizerKind::Sgd),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "runs")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Config whose [model] section sets the network; without one a 32² toy model is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sampled entries per parameter tensor.
    #[arg(long, default_value_t = 3)]
    pub per_parameter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Comma-separated subset of encoder, skip, skip1, skip2, skip3.
    #[arg(long)]
    pub axes: String,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Head channels the data is meant for; 1 and 2 both give binary masks.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "data/synthetic")]
    pub output: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
        Command::Synth(a) => synth(a),
    }
}

fn read_config(path: Option<&Path>) -> Result<(RunManifest, toml::Table)> {
    let Some(path) = path else {
        return Ok((RunManifest::default(), toml::Table::new()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let manifest = RunManifest::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((manifest, table))
}

/// Applies the config file then the flags; returns the manifest and whether the file had a `[model]` section.
pub fn resolve(o: &Overrides) -> Result<(RunManifest, bool)> {
    let (mut m, table) = read_config(o.config.as_deref())?;
    if let Some(dir) = &o.data {
        m.data.dir = Some(dir.clone());
        m.data.synthetic_count = None;
    }
    if let Some(n) = o.synthetic {
        m.data.synthetic_count = Some(n);
        m.data.dir = None;
    }
    if let Some(v) = o.epochs {
        m.train.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        m.train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        m.train.batch_size = v;
    }
    if let Some(v) = o.optimizer {
        m.train.optimizer = v;
    }
    if let Some(v) = o.seed {
        m.train.seed = v;
        m.model.seed = v;
    }
    if let Some(v) = o.input_size {
        m.model.input_size = v;
    }
    if let Some(v) = o.num_classes {
        m.model.num_classes = v;
    }
    if let Some(v) = &o.dtype {
        m.run.dtype = v.clone();
    }
    if let Some(v) = &o.output {
        m.run.output = v.clone();
    }
    m.dtype()?;
    m.model.validate()?;
    m.train.validate()?;
    Ok((m, table.contains_key("model")))
}

pub fn load_samples(m: &RunManifest) -> Result<Vec<SegmentationSample>> {
    let d = &m.data;
    let samples = match (&d.dir, d.synthetic_count) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("set either data.dir or data.synthetic_count, not both".into()))
        }
        (None, None) => {
            return Err(Error::Config("no data: set data.dir or data.synthetic_count, or pass --data".into()))
        }
        (None, Some(n)) => generate_synthetic(n, m.model.input_size, m.model.num_classes, d.synthetic_seed)?,
        (Some(dir), None) => {
            let palette = d.palette.clone().unwrap_or_else(|| Palette::for_labels(m.model.label_classes()));
            let (samples, report) =
                load_directory(&dir.join("images"), &dir.join("masks"), &palette, m.model.in_channels)?;
            if !report.is_clean() {
                eprint!("{report}");
            }
            samples
        }
    };
    if samples.is_empty() {
        return Err(Error::Data("the dataset is empty".into()));
    }
    Ok(samples)
}

fn split_samples(
    m: &RunManifest,
    samples: &[SegmentationSample],
) -> Result<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    split(samples, &SplitSpec { train_fraction: m.data.train_fraction, seed: m.data.split_seed })
}

/// Creates `<output>/<timestamp>`, adding a numeric suffix if that name is taken.
pub fn create_run_dir(output: &Path) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for n in 0.. {
        let name = if n == 0 { stamp.clone() } else { format!("{stamp}-{n}") };
        let dir = output.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write_manifest(dir: &Path, m: &RunManifest, command: &str) -> Result<()> {
    let mut m = m.clone();
    m.run.tool_version = Some(env!("CARGO_PKG_VERSION").into());
    m.run.command = Some(command.into());
    m.run.created = Some(chrono::Local::now().to_rfc3339());
    let path = dir.join("manifest.toml");
    std::fs::write(&path, m.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn train(args: TrainArgs) -> CliResult<()> {
    let (mut m, _) = resolve(&args.overrides)?;
    match m.dtype()? {
        DType::F32 => train_as::<f32>(&mut m, args.resume.as_deref()),
        DType::F64 => train_as::<f64>(&mut m, args.resume.as_deref()),
    }
}

fn train_as<F: Scalar>(m: &mut RunManifest, resume: Option<&Path>) -> CliResult<()> {
    let samples = load_samples(m)?;
    let (train_set, test_set) = split_samples(m, &samples)?;
    m.run.split_hash = Some(split_hash(&train_set, &test_set));
    let mut trainer = match resume {
        Some(dir) => {
            let t = Trainer::<F>::resume(dir, m.train.clone())?;
            m.model = t.model.config().clone();
            t
        }
        None => Trainer::new(DaTransUnet::<F>::new(&m.model)?, m.train.clone())?,
    };
    let dir = create_run_dir(&m.run.output)?;
    write_manifest(&dir, m, "train")?;
    println!("run directory: {}", dir.display());
    println!(
        "training {} parameters on {} samples ({} held out)",
        count_parameters(&m.model),
        train_set.len(),
        test_set.len()
    );
    let mut record = trainer.fit(&train_set, &test_set)?;
    let checkpoint = dir.join("checkpoint");
    trainer.save_checkpoint(&checkpoint)?;
    record.checkpoint = Some(checkpoint);
    record.write_curves_csv(create(&dir.join("curves.csv"))?)?;
    if let Some(report) = &record.final_eval {
        report.write_csv(create(&dir.join("metrics.csv"))?)?;
    }
    let summary = dir.join("summary.toml");
    std::fs::write(&summary, record.summary_toml()).map_err(|e| Error::io(&summary, e))?;
    for e in &record.epochs {
        println!("epoch {:>4}  loss {:.5}  train dice {:.4}", e.epoch + 1, e.train_loss, e.train_dice);
    }
    if let Some(r) = &record.final_eval {
        println!("held-out mean dice {:.4}  iou {:.4}  hd95 {:.3}", r.mean_dice, r.mean_iou, r.mean_hd95);
    }
    Ok(())
}

fn eval(args: EvalArgs) -> CliResult<()> {
    let (mut m, has_model) = resolve(&args.overrides)?;
    let header = read_header(&args.checkpoint)?;
    if !has_model {
        m.model = header.model.clone();
    }
    m.run.dtype = header.dtype.clone();
    match m.dtype()? {
        DType::F32 => eval_as::<f32>(&mut m, &args),
        DType::F64 => eval_as::<f64>(&mut m, &args),
    }
}

fn eval_as<F: Scalar>(m: &mut RunManifest, args: &EvalArgs) -> CliResult<()> {
    let ck = load_checkpoint::<F>(&args.checkpoint, Some(&m.model))?;
    let samples = load_samples(m)?;
    let chosen = match args.split {
        SplitChoice::All => samples,
        part => {
            let (train_set, test_set) = split_samples(m, &samples)?;
            m.run.split_hash = Some(split_hash(&train_set, &test_set));
            if part == SplitChoice::Train {
                train_set
            } else {
                test_set
            }
        }
    };
    if chosen.is_empty() {
        return Err(Error::Data("the selected split is empty".into()).into());
    }
    let trainer = Trainer { model: ck.model, optimizer: ck.optimizer, config: m.train.clone(), epoch: ck.epoch };
    let report = trainer.evaluate(&chosen)?;
    let dir = create_run_dir(&m.run.output)?;
    write_manifest(&dir, m, "eval")?;
    report.write_csv(create(&dir.join("metrics.csv"))?)?;
    println!("run directory: {}", dir.display());
    for c in &report.per_class {
        println!("class {:>3}  iou {:.4}  dice {:.4}  hd {:.3}  hd95 {:.3}", c.class, c.iou, c.dice, c.hd, c.hd95);
    }
    println!(
        "mean dice {:.4}  iou {:.4}  hd {:.3}  hd95 {:.3}",
        report.mean_dice, report.mean_iou, report.mean_hd, report.mean_hd95
    );
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult<()> {
    let header = read_header(&args.checkpoint)?;
    match DType::parse(&header.dtype) {
        Some(DType::F32) => predict_as::<f32>(&args),
        Some(DType::F64) => predict_as::<f64>(&args),
        None => Err(Error::Incompatible { field: "dtype".into(), detail: header.dtype }.into()),
    }
}

fn predict_as<F: Scalar>(args: &PredictArgs) -> CliResult<()> {
    let ck = load_checkpoint::<F>(&args.checkpoint, None)?;
    let cfg = ck.model.config().clone();
    let images = if args.input.is_dir() {
        load_images(&args.input, cfg.in_channels)?
    } else {
        let id = args.input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let (px, h, w) = crate::data::read_image(&args.input, cfg.in_channels)?;
        vec![(id, px, h, w)]
    };
    if images.is_empty() {
        return Err(Error::Data(format!("no images found in {}", args.input.display())).into());
    }
    let samples: Vec<SegmentationSample> = images
        .into_iter()
        .map(|(id, image, h, w)| SegmentationSample {
            id,
            channels: cfg.in_channels,
            height: h,
            width: w,
            image,
            mask: vec![0; h * w],
        })
        .collect();
    let trainer = Trainer { model: ck.model, optimizer: ck.optimizer, config: TrainConfig::default(), epoch: ck.epoch };
    let predictions = trainer.predict(&samples)?;

    let manifest = RunManifest {
        run: RunInfo { dtype: F::DTYPE.name().into(), output: args.output.clone(), ..RunInfo::default() },
        model: cfg.clone(),
        ..RunManifest::default()
    };
    let dir = create_run_dir(&args.output)?;
    write_manifest(&dir, &manifest, &format!("predict {}", args.input.display()))?;
    let masks = dir.join("masks");
    std::fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    for (sample, pred) in samples.iter().zip(&predictions) {
        let labels = LabelMap {
            height: sample.height,
            width: sample.width,
            labels: resize_mask_nearest(&pred.labels, pred.height, pred.width, sample.height, sample.width),
        };
        write_index_png(&masks.join(format!("{}.png", sample.id)), &labels)?;
        write_overlay_png(&masks.join(format!("{}_overlay.png", sample.id)), &sample.image, sample.channels, &labels)?;
    }
    println!("run directory: {}", dir.display());
    println!("wrote {} masks", samples.len());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let (m, table) = read_config(args.config.as_deref())?;
    let cfg = if table.contains_key("model") { m.model } else { ModelConfig::toy(32, 16, 1) };
    cfg.validate()?;
    let suite = gradient_suite(&cfg, args.per_parameter, args.seed)?;
    println!("{:<20} {:>8} {:>14} {:>10}", "check", "entries", "max rel error", "tolerance");
    for e in &suite.entries {
        println!(
            "{:<20} {:>8} {:>14.3e} {:>10.0e}",
            e.name,
            e.report.entries.len(),
            e.report.max_rel_error(),
            e.report.tolerance
        );
        if let Some(w) = e.report.worst() {
            println!("    worst at {}: analytic {:.6e}, numeric {:.6e}", w.index, w.analytic, w.numeric);
        }
    }
    if suite.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = suite.entries.iter().filter(|e| !e.report.passed()).map(|e| e.name.as_str()).collect();
        Err(CliError::Gradcheck(failed.join(", ")))
    }
}

fn ablate(args: AblateArgs) -> CliResult<()> {
    let axes: AblationAxes = args.axes.parse()?;
    let (mut m, _) = resolve(&args.overrides)?;
    let samples = load_samples(&m)?;
    let (train_set, test_set) = split_samples(&m, &samples)?;
    if test_set.is_empty() {
        return Err(Error::Data("the split leaves no test samples".into()).into());
    }
    m.run.split_hash = Some(split_hash(&train_set, &test_set));
    let table = match m.dtype()? {
        DType::F32 => run_ablation::<f32>(&m.model, &m.train, &train_set, &test_set, axes)?,
        DType::F64 => run_ablation::<f64>(&m.model, &m.train, &train_set, &test_set, axes)?,
    };
    let dir = create_run_dir(&m.run.output)?;
    write_manifest(&dir, &m, &format!("ablate --axes {}", args.axes))?;
    table.write_csv(create(&dir.join("ablation.csv"))?)?;
    println!("run directory: {}", dir.display());
    println!("{:>3} {:>7} {:>5} {:>5} {:>5} {:>8} {:>8}", "row", "encoder", "skip1", "skip2", "skip3", "DSC", "HD");
    for r in &table.rows {
        println!(
            "{:>3} {:>7} {:>5} {:>5} {:>5} {:>8.2} {:>8.3}",
            r.row, r.encoder_da, r.skip1_da, r.skip2_da, r.skip3_da, r.dsc, r.hd
        );
    }
    Ok(())
}

fn synth(args: SynthArgs) -> CliResult<()> {
    let samples = generate_synthetic(args.count, args.size, args.classes, args.seed)?;
    let (images, masks) = (args.output.join("images"), args.output.join("masks"));
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let label_classes = args.classes.max(2);
    for s in &samples {
        write_image_png(&images.join(format!("{}.png", s.id)), s)?;
        write_label_png(&masks.join(format!("{}.png", s.id)), &s.label_map(), label_classes)?;
    }
    println!("wrote {} samples to {}", samples.len(), args.output.display());
    Ok(())
}
