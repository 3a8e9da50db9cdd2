//! Command-line front end: dataset generation, training, evaluation,
//! caption-conditioned sampling, gradient checks and the two experiments.
//!
//! Every command resolves its configuration as defaults, then an optional
//! `--config` JSON file, then explicit flags, and prints the resolved
//! configuration as the first line of standard output. That line can be fed
//! back through `--config` to repeat the run.

pub mod export;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use depthprior::diffcore::GRAD_TOLERANCE;
use depthprior::model::{gradient_check_suite, Branch};
use depthprior::objectives::error_map;
use depthprior::scenegen::{default_catalog, generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig};
use depthprior::trainer::{run_caption_ablation, run_ratio_sweep, Checkpoint, EpochLog, TrainConfig};
use depthprior::{Error, Trainer32};

use export::{export_depth, DepthFormat, DEFAULT_METERS_PER_UNIT};

#[derive(Debug, Parser)]
#[command(name = "depthprior", version, about = "Caption-conditioned metric depth estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Draw depth maps from a caption alone.
    Sample(SampleArgs),
    /// Finite-difference check of both training objectives.
    Gradcheck(GradcheckArgs),
    /// Train once per alternation ratio and tabulate test metrics.
    Sweep(SweepArgs),
    /// Train with and without captions and compare.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_objects: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    focal: Option<f64>,
}

/// Training flags shared by `train`, `sweep` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset, used for checkpoint selection.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out_ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for per-sample relative-error maps (16-bit PGM).
    #[arg(long)]
    error_maps: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// pgm16 or raw32.
    #[arg(long)]
    format: Option<DepthFormat>,
    #[arg(long)]
    meters_per_unit: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated alternation ratios.
    #[arg(long, value_delimiter = ',')]
    p_list: Option<Vec<f64>>,
    /// Held-out split to score; defaults to the validation set.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub count: usize,
    pub generator: GeneratorConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            count: 4000,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ckpt: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub error_maps: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub ckpt: Option<PathBuf>,
    pub caption: String,
    pub n: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub format: String,
    pub meters_per_unit: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            ckpt: None,
            caption: String::new(),
            n: 8,
            seed: 0,
            out_dir: None,
            format: DepthFormat::Pgm16.to_string(),
            meters_per_unit: DEFAULT_METERS_PER_UNIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub trials: u64,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            trials: 3,
            step: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub p_list: Vec<f64>,
    pub test_path: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            train: TrainConfig::default(),
            p_list: vec![0.0, 0.01, 0.5, 1.0],
            test_path: None,
            report: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub train: TrainConfig,
    pub test_path: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

/// Process exit status for an error: 2 for numeric failures, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numeric() => 2,
        _ => 1,
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<Error>() {
        Some(Error::Contract { .. }) => "contract",
        Some(Error::Numeric { .. }) => "numeric",
        Some(Error::Config(_)) => "config",
        Some(Error::Vocabulary(_)) => "vocabulary",
        Some(Error::Format(_)) => "format",
        Some(Error::Io(_)) => "io",
        Some(Error::Json(_)) => "json",
        None if err.downcast_ref::<GradcheckFailed>().is_some() => "gradcheck",
        None => "usage",
    }
}

/// One JSON object describing the failure.
pub fn error_line(err: &anyhow::Error) -> String {
    serde_json::json!({
        "error": {
            "kind": error_kind(err),
            "code": exit_code(err),
            "message": format!("{err:#}"),
        }
    })
    .to_string()
}

#[derive(Debug)]
struct GradcheckFailed(f64);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradient check failed: max relative error {:e} > {:e}",
            self.0, GRAD_TOLERANCE
        )
    }
}

impl std::error::Error for GradcheckFailed {}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code. Errors are reported on `err` as one JSON line.
pub fn dispatch<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let wrapped = Error::config(e.to_string().trim().to_string());
            let _ = writeln!(err, "{}", error_line(&wrapped.into()));
            return 1;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", error_line(&e));
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Sweep(a) => sweep(a, out),
        Command::Ablate(a) => ablate(a, out),
    }
}

fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())).into())
}

fn echo<C: Serialize>(out: &mut dyn Write, config: &C) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(config)?)?;
    Ok(())
}

fn emit<V: Serialize>(out: &mut dyn Write, value: &V) -> anyhow::Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    out.flush()?;
    Ok(())
}

fn required<'a, P>(value: &'a Option<P>, flag: &str) -> anyhow::Result<&'a P> {
    value
        .as_ref()
        .ok_or_else(|| Error::config(format!("--{flag} is required")).into())
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn gen(a: GenArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: GenConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.count {
        cfg.count = v;
    }
    let g = &mut cfg.generator;
    if let Some(v) = a.max_objects {
        g.max_objects = v;
        g.min_objects = g.min_objects.min(v);
    }
    if let Some(v) = a.height {
        g.height = v;
    }
    if let Some(v) = a.width {
        g.width = v;
    }
    if let Some(v) = a.focal {
        g.focal = v;
    }
    echo(out, &cfg)?;
    let ds = generate_dataset(cfg.seed, cfg.count, &default_catalog(), &cfg.generator)?;
    write_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(
        out,
        &serde_json::json!({ "wrote": a.out, "count": ds.len(), "vocabulary": ds.header.vocabulary.tokens() }),
    )
}

fn resolve_train(flags: &TrainFlags, mut cfg: TrainConfig) -> TrainConfig {
    if let Some(v) = &flags.data {
        cfg.train_path = Some(v.clone());
    }
    if let Some(v) = &flags.val {
        cfg.val_path = Some(v.clone());
    }
    if let Some(v) = flags.p {
        cfg.p = v;
    }
    if let Some(v) = flags.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = flags.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = flags.gamma {
        cfg.loss.gamma = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr_start {
        cfg.lr_start = v;
    }
    if let Some(v) = flags.lr_end {
        cfg.lr_end = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.latent_dim {
        cfg.model.latent_dim = v;
    }
    cfg
}

/// Reads the train and validation sets named by `cfg` and checks the config.
fn train_inputs(cfg: &TrainConfig) -> anyhow::Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = load_dataset(required(&cfg.train_path, "data")?)?;
    let val = load_dataset(required(&cfg.val_path, "val")?)?;
    Ok((train, val))
}

#[derive(Serialize)]
struct TaggedLog<'a, K: Serialize> {
    #[serde(flatten)]
    tag: K,
    #[serde(flatten)]
    log: &'a EpochLog,
}

fn train(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = resolve_train(&a.flags, load_config(a.flags.config.as_deref())?);
    echo(out, &cfg)?;
    let (train, val) = train_inputs(&cfg)?;
    let mut trainer = Trainer32::new(cfg, train.header.vocabulary.len())?;
    let mut failed = None;
    let fit = trainer.fit(&train, &val, |log| {
        if failed.is_none() {
            failed = emit(out, log).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    fit.best
        .save(&a.out_ckpt)
        .with_context(|| format!("writing {}", a.out_ckpt.display()))?;
    emit(
        out,
        &serde_json::json!({ "best_epoch": fit.best_epoch, "checkpoint": a.out_ckpt, "steps": fit.best.step }),
    )
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: EvalConfig = load_config(a.config.as_deref())?;
    cfg.ckpt = a.ckpt.or(cfg.ckpt);
    cfg.data = a.data.or(cfg.data);
    cfg.report = a.report.or(cfg.report);
    cfg.error_maps = a.error_maps.or(cfg.error_maps);
    echo(out, &cfg)?;
    let ckpt = load_checkpoint(required(&cfg.ckpt, "ckpt")?)?;
    let ds = load_dataset(required(&cfg.data, "data")?)?;
    let mut trainer = Trainer32::from_checkpoint(&ckpt)?;
    let report = trainer.evaluate(&ds)?;
    if let Some(dir) = &cfg.error_maps {
        write_error_maps(&mut trainer, &ds, dir)?;
    }
    if let Some(path) = &cfg.report {
        write_json(path, &report)?;
    }
    emit(out, &report)
}

/// Relative error maps in thousandths, saturating at 65.535.
fn write_error_maps(trainer: &mut Trainer32, ds: &Dataset, dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    let (h, w) = (ds.header.height, ds.header.width);
    let batch = trainer.config.eval_batch;
    for (c, chunk) in ds.samples.chunks(batch).enumerate() {
        let images: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let captions: Vec<&[u16]> = chunk.iter().map(|s| s.caption.as_slice()).collect();
        for (i, (pred, s)) in trainer.predict(&images, &captions)?.iter().zip(chunk).enumerate() {
            let map = error_map(pred.data(), &s.depth, &s.mask)?;
            let bytes = export::encode_pgm16(&map, h, w, 1e-3, true)?;
            let path = dir.join(format!("error_{:05}.pgm", c * batch + i));
            fs::write(&path, bytes)
                .map_err(Error::from)
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleSummary<'a> {
    caption: &'a str,
    tokens: Vec<u16>,
    mu: Vec<f32>,
    sigma: Vec<f32>,
    files: Vec<PathBuf>,
}

fn sample(a: SampleArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: SampleConfig = load_config(a.config.as_deref())?;
    cfg.ckpt = a.ckpt.or(cfg.ckpt);
    cfg.out_dir = a.out_dir.or(cfg.out_dir);
    if let Some(v) = a.caption {
        cfg.caption = v;
    }
    if let Some(v) = a.n {
        cfg.n = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.format {
        cfg.format = v.to_string();
    }
    if let Some(v) = a.meters_per_unit {
        cfg.meters_per_unit = v;
    }
    echo(out, &cfg)?;
    let format: DepthFormat = cfg.format.parse().map_err(Error::config)?;
    if !(cfg.meters_per_unit > 0.0 && cfg.meters_per_unit.is_finite()) {
        bail!(Error::config(format!(
            "meters_per_unit must be positive, got {}",
            cfg.meters_per_unit
        )));
    }
    let ckpt = load_checkpoint(required(&cfg.ckpt, "ckpt")?)?;
    let dir = required(&cfg.out_dir, "out-dir")?;
    let vocab = vocabulary_for(&ckpt)?;
    let tokens = vocab.tokenize(&cfg.caption);
    let mut trainer = Trainer32::from_checkpoint(&ckpt)?;
    let latent = trainer.latent(&tokens)?;
    let maps = trainer.infer_text(&tokens, cfg.n, cfg.seed)?;
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))?;
    let (h, w) = (ckpt.config.model.height, ckpt.config.model.width);
    let mut files = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let path = dir.join(format!("sample_{i:03}.{}", format.extension()));
        export_depth(m.data(), h, w, &path, format, cfg.meters_per_unit)
            .with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
    }
    let summary = SampleSummary {
        caption: &cfg.caption,
        tokens,
        mu: latent.mu.clone(),
        sigma: latent.sigma.clone(),
        files,
    };
    write_json(&dir.join("latent.json"), &summary)?;
    emit(out, &summary)
}

/// The generator vocabulary; checkpoints only record its size.
fn vocabulary_for(ckpt: &Checkpoint) -> anyhow::Result<depthprior::textprior::Vocabulary> {
    let vocab = depthprior::scenegen::catalog_vocabulary(&default_catalog())?;
    if vocab.len() != ckpt.vocab_size {
        bail!(Error::config(format!(
            "checkpoint expects {} tokens but the generator vocabulary has {}",
            ckpt.vocab_size,
            vocab.len()
        )));
    }
    Ok(vocab)
}

#[derive(Serialize)]
struct GradcheckLine<'a> {
    seed: u64,
    branch: Branch,
    max_rel_error: f64,
    pass: bool,
    report: &'a depthprior::diffcore::GradReport,
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: GradcheckConfig = load_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.step {
        cfg.step = v;
    }
    echo(out, &cfg)?;
    let mut worst = 0.0f64;
    let mut all_pass = true;
    for seed in cfg.seed..cfg.seed + cfg.trials {
        for (branch, report) in gradient_check_suite(seed, cfg.step)? {
            worst = worst.max(report.max_rel_error());
            all_pass &= report.pass;
            emit(
                out,
                &GradcheckLine {
                    seed,
                    branch,
                    max_rel_error: report.max_rel_error(),
                    pass: report.pass,
                    report: &report,
                },
            )?;
        }
    }
    if !all_pass {
        return Err(GradcheckFailed(worst).into());
    }
    Ok(())
}

fn sweep(a: SweepArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: SweepConfig = load_config(a.flags.config.as_deref())?;
    cfg.train = resolve_train(&a.flags, cfg.train);
    if let Some(v) = a.p_list {
        cfg.p_list = v;
    }
    cfg.test_path = a.test.or(cfg.test_path);
    cfg.report = a.report.or(cfg.report);
    echo(out, &cfg)?;
    if cfg.p_list.is_empty() {
        bail!(Error::config("--p-list is empty"));
    }
    for &p in &cfg.p_list {
        TrainConfig { p, ..cfg.train.clone() }.validate()?;
    }
    let (train, val) = train_inputs(&cfg.train)?;
    let test = match &cfg.test_path {
        Some(path) => load_dataset(path)?,
        None => val.clone(),
    };
    let mut failed = None;
    let rows = run_ratio_sweep(&cfg.train, &train, &val, &test, &cfg.p_list, |p, log| {
        if failed.is_none() {
            let tag = serde_json::json!({ "p": p });
            failed = emit(out, &TaggedLog { tag, log }).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    if let Some(path) = &cfg.report {
        write_json(path, &rows)?;
    }
    emit(out, &serde_json::json!({ "sweep": rows }))
}

fn ablate(a: AblateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg: AblateConfig = load_config(a.flags.config.as_deref())?;
    cfg.train = resolve_train(&a.flags, cfg.train);
    cfg.test_path = a.test.or(cfg.test_path);
    cfg.report = a.report.or(cfg.report);
    echo(out, &cfg)?;
    let (train, val) = train_inputs(&cfg.train)?;
    let test = match &cfg.test_path {
        Some(path) => load_dataset(path)?,
        None => val.clone(),
    };
    let mut failed = None;
    let report = run_caption_ablation(&cfg.train, &train, &val, &test, |ablated, log| {
        if failed.is_none() {
            let tag = serde_json::json!({ "ablated": ablated });
            failed = emit(out, &TaggedLog { tag, log }).err();
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    if let Some(path) = &cfg.report {
        write_json(path, &report)?;
    }
    emit(out, &report)
}
