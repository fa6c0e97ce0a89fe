//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! TOML file (`--config`) with one section per command, then flags. Every
//! value is validated before any work starts. Exit codes: 0 success, 1
//! runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::analysis::{analyze, AnalysisReport, Tail};
use crate::error::Error;
use crate::latent::{parse_anchors, render_walk, WalkMode, WalkPlan};
use crate::model::{self, build_discriminator, build_generator, generator_forward, verify_architecture, LayerHyper};
use crate::preprocess::{
    self, channel_stats, from_model_range, load_image, make_synthetic_dataset, save_png, scan_images, stack,
    to_model_range, unstack, FilterOrder, PipelineConfig, SyntheticSpec,
};
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, sample_noise, RunOutput, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "mdcgan", version, about = "Train, sample and analyze a modified DCGAN for abstract paintings")]
pub struct Cli {
    /// TOML settings file with [train], [preprocess], [synthetic],
    /// [generate], [walk] and [analyze] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Image scale factor: 1 gives 256x256 images, 8 gives 32x32.
    #[arg(long, global = true, value_parser = ["1", "2", "4", "8"])]
    pub scale: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Resize and filter a directory of images and write channel statistics.
    Preprocess(PreprocessArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Decode seeded latent codes into PNGs.
    Generate(GenerateArgs),
    /// Render a latent combination or random walk as a grid.
    Walk(WalkArgs),
    /// Compare two image sets: SNR, distances and an F-test.
    Analyze(AnalyzeArgs),
    /// Check the full-size architectures against the reference tables.
    VerifyArch,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Output side length; defaults to the scale's image size.
    #[arg(long)]
    pub size: Option<usize>,
    /// Keep a seeded random subset of this many images.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub median_window: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long, conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Train on a generated set of colored shapes instead.
    #[arg(long)]
    pub synthetic: bool,
    #[arg(long)]
    pub synthetic_count: Option<usize>,
    /// Output directory for metrics, checkpoints and statistics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Feed real and fake samples to the discriminator as one batch.
    #[arg(long)]
    pub combined: bool,
    /// Use the saturating generator objective.
    #[arg(long)]
    pub saturating: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WalkArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// minus-v1, minus-v2, minus-v3 or random.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub scale_step: Option<f64>,
    /// Text file of anchor codes, one per line.
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Reference set: a directory of PNGs or a checkpoint to sample from.
    #[arg(long)]
    pub a: PathBuf,
    /// Compared set, same forms as `--a`.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub two_sided: bool,
    /// Images decoded per checkpoint input.
    #[arg(long)]
    pub count: Option<usize>,
    /// Also write the report as a CSV header and row.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub size: Option<usize>,
    pub count: Option<usize>,
    pub gaussian_sigma: f64,
    pub median_window: usize,
    pub order: FilterOrder,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            size: None,
            count: None,
            gaussian_sigma: p.gaussian_sigma,
            median_window: p.median_window,
            order: p.order,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub count: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { count: 16 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WalkSection {
    pub mode: String,
    pub steps: usize,
    pub step_scale: f64,
}

impl Default for WalkSection {
    fn default() -> Self {
        Self {
            mode: "random".into(),
            steps: 16,
            step_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub alpha: f64,
    pub two_sided: bool,
    pub count: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            two_sided: false,
            count: 101,
        }
    }
}

/// Settings for every command.
#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preprocess: PreprocessSection,
    pub synthetic: SyntheticSpec,
    pub generate: GenerateSection,
    pub walk: WalkSection,
    pub analyze: AnalyzeSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn pipeline(&self, size: usize) -> PipelineConfig {
        PipelineConfig {
            size: self.preprocess.size.unwrap_or(size),
            gaussian_sigma: self.preprocess.gaussian_sigma,
            median_window: self.preprocess.median_window,
            order: self.preprocess.order,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        self.pipeline(1).validate()?;
        self.walk
            .mode
            .parse::<WalkMode>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.walk.step_scale >= 0.0) {
            return Err(Error::Config("walk.step_scale must be non-negative".into()));
        }
        if !(self.analyze.alpha > 0.0 && self.analyze.alpha < 1.0) {
            return Err(Error::Config(format!("analyze.alpha must lie in (0, 1), got {}", self.analyze.alpha)));
        }
        if self.analyze.count < 2 || self.generate.count == 0 {
            return Err(Error::Config("analyze.count must be >= 2 and generate.count >= 1".into()));
        }
        Ok(())
    }
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Resolves defaults, the config file and global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(scale) = &cli.scale {
        cfg.train.scale_factor = scale.parse().map_err(|_| usage(format!("bad scale {scale}")))?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> CliResult {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(a, &mut cfg),
        Command::Train(a) => cmd_train(a, cli, &mut cfg),
        Command::Generate(a) => cmd_generate(a, cli, &mut cfg),
        Command::Walk(a) => cmd_walk(a, cli, &mut cfg),
        Command::Analyze(a) => cmd_analyze(a, cli, &mut cfg),
        Command::VerifyArch => cmd_verify_arch(),
    }
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if !path.is_dir() {
        return Err(usage(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> CliResult {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

pub fn cmd_preprocess(a: &PreprocessArgs, cfg: &mut RunConfig) -> CliResult {
    if let Some(s) = a.size {
        cfg.preprocess.size = Some(s);
    }
    if let Some(c) = a.count {
        cfg.preprocess.count = Some(c);
    }
    if let Some(s) = a.sigma {
        cfg.preprocess.gaussian_sigma = s;
    }
    if let Some(w) = a.median_window {
        cfg.preprocess.median_window = w;
    }
    cfg.validate()?;
    require_dir(&a.input, "input")?;
    let pipeline = cfg.pipeline(cfg.train.image_size()?);
    let paths = preprocess::sample_paths(scan_images(&a.input)?, cfg.preprocess.count, cfg.train.seed);
    if paths.is_empty() {
        return Err(CliError::Runtime(Error::invalid(format!(
            "no PNG or JPEG images in {}",
            a.input.display()
        ))));
    }
    fs::create_dir_all(&a.output)?;
    let set = preprocess::load_processed(&paths, &pipeline);
    for (p, e) in &set.failures {
        eprintln!("warning: skipping {}: {e}", p.display());
    }
    if set.images.is_empty() {
        return Err(CliError::Runtime(Error::invalid("every input image failed to load")));
    }
    for (img, p) in set.images.iter().zip(&set.paths) {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        save_png(img, &a.output.join(format!("{stem}.png")))?;
    }
    let refs: Vec<&Tensor<f32>> = set.images.iter().collect();
    let stats = channel_stats(&refs)?;
    stats.save(&a.output.join("stats.toml"))?;
    println!(
        "processed {} of {} images to {}x{}; channel mean {:?}, std {:?}",
        set.images.len(),
        paths.len(),
        pipeline.size,
        pipeline.size,
        stats.mean,
        stats.std
    );
    Ok(())
}

fn training_data(a: &TrainArgs, cfg: &RunConfig) -> CliResult<Tensor<f32>> {
    let side = cfg.train.image_size()?;
    let display = if a.synthetic {
        let spec = SyntheticSpec {
            size: side,
            count: a.synthetic_count.unwrap_or(cfg.synthetic.count),
            ..cfg.synthetic.clone()
        };
        make_synthetic_dataset(&spec)?
    } else {
        let dir = a
            .data
            .as_ref()
            .ok_or_else(|| usage("train needs --data <dir> or --synthetic"))?;
        require_dir(dir, "dataset")?;
        let paths = preprocess::sample_paths(scan_images(dir)?, cfg.preprocess.count, cfg.train.seed);
        let set = preprocess::load_processed(&paths, &cfg.pipeline(side));
        for (p, e) in &set.failures {
            eprintln!("warning: skipping {}: {e}", p.display());
        }
        if set.images.is_empty() {
            return Err(CliError::Runtime(Error::invalid(format!("no usable images in {}", dir.display()))));
        }
        let imgs: Vec<Tensor<f32>> = set
            .images
            .iter()
            .map(|i| preprocess::resize_bilinear(i, (side, side)))
            .collect::<Result<_, _>>()?;
        stack(&imgs)?
    };
    Ok(display)
}

pub fn cmd_train(a: &TrainArgs, cli: &Cli, cfg: &mut RunConfig) -> CliResult {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if a.combined {
        t.disc_batching = crate::train::DiscBatching::Combined;
    }
    if a.saturating {
        t.generator_loss = crate::train::GeneratorLoss::Saturating;
    }
    cfg.validate()?;
    if !a.synthetic && a.data.is_none() {
        return Err(usage("train needs --data <dir> or --synthetic"));
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            require_file(path, "checkpoint")?;
            let cp = load_checkpoint(path)?;
            let mut tr = Trainer::from_checkpoint(&cp)?;
            if a.epochs.is_some() {
                tr.config.epochs = cfg.train.epochs;
            }
            if cli.scale.is_some() && cfg.train.scale_factor != tr.config.scale_factor {
                return Err(usage("--scale differs from the resumed checkpoint"));
            }
            // continue under the checkpoint's settings
            cfg.train = tr.config.clone();
            tr
        }
        None => Trainer::new(cfg.train.clone())?,
    };
    let display = training_data(a, cfg)?;
    fs::create_dir_all(&a.out)?;
    let refs = [&display];
    channel_stats(&refs)?.save(&a.out.join("stats.toml"))?;
    fs::write(a.out.join("train_config.toml"), trainer.config.to_toml())?;
    let data = to_model_range(&display);
    println!(
        "training on {} images at {}x{} from epoch {} (step {})",
        data.shape()[0],
        data.shape()[2],
        data.shape()[3],
        trainer.epoch,
        trainer.step
    );
    let out = RunOutput {
        dir: Some(a.out.clone()),
    };
    trainer.run(&data, &out, &mut |s| {
        println!("{s}");
        let _ = std::io::stdout().flush();
    })?;
    println!("wrote {}", crate::train::last_checkpoint_path(&a.out).display());
    Ok(())
}

fn load_generator(path: &Path) -> CliResult<model::Model<f32>> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint(path)?.generator_model()?)
}

/// Display-range images decoded from `count` seeded latent codes.
pub fn generate_images(gen: &model::Model<f32>, count: usize, seed: u64) -> Result<Vec<Tensor<f32>>, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut left = count;
    while left > 0 {
        let n = left.min(32);
        let z = sample_noise::<f32>(n, model::LATENT_DIM, &mut rng)?;
        out.extend(unstack(&from_model_range(&generator_forward(gen, &z)?))?);
        left -= n;
    }
    Ok(out)
}

pub fn cmd_generate(a: &GenerateArgs, _cli: &Cli, cfg: &mut RunConfig) -> CliResult {
    if let Some(c) = a.count {
        cfg.generate.count = c;
    }
    cfg.validate()?;
    let gen = load_generator(&a.checkpoint)?;
    fs::create_dir_all(&a.out)?;
    let images = generate_images(&gen, cfg.generate.count, cfg.train.seed)?;
    for (i, img) in images.iter().enumerate() {
        save_png(img, &a.out.join(format!("gen_{i:05}.png")))?;
    }
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

pub fn cmd_walk(a: &WalkArgs, _cli: &Cli, cfg: &mut RunConfig) -> CliResult {
    if let Some(m) = &a.mode {
        cfg.walk.mode = m.clone();
    }
    if let Some(s) = a.steps {
        cfg.walk.steps = s;
    }
    if let Some(s) = a.scale_step {
        cfg.walk.step_scale = s;
    }
    cfg.validate()?;
    let mode: WalkMode = cfg.walk.mode.parse().map_err(|e: Error| usage(e.to_string()))?;
    let mut plan = match &a.anchors {
        Some(path) => {
            require_file(path, "anchor file")?;
            WalkPlan {
                mode,
                anchors: parse_anchors(&fs::read_to_string(path)?).map_err(|e| usage(e.to_string()))?,
                steps: cfg.walk.steps,
                step_scale: cfg.walk.step_scale,
                seed: cfg.train.seed,
            }
        }
        None => WalkPlan::seeded(mode, 1, 1.0, cfg.train.seed).map_err(|e| usage(e.to_string()))?,
    };
    plan.steps = cfg.walk.steps;
    plan.step_scale = cfg.walk.step_scale;
    plan.validate().map_err(|e| usage(e.to_string()))?;
    let gen = load_generator(&a.checkpoint)?;
    let out = render_walk(&gen, &plan, &a.out)?;
    println!(
        "wrote {} tiles, {} and {}",
        out.tiles.len(),
        out.grid.display(),
        out.manifest.display()
    );
    Ok(())
}

fn load_set(path: &Path, count: usize, seed: u64) -> CliResult<Vec<Tensor<f32>>> {
    if path.is_dir() {
        let paths = scan_images(path)?;
        if paths.is_empty() {
            return Err(CliError::Runtime(Error::invalid(format!("no images in {}", path.display()))));
        }
        Ok(paths.iter().map(|p| load_image(p)).collect::<Result<_, _>>()?)
    } else if path.is_file() {
        let gen = load_checkpoint(path)?.generator_model()?;
        Ok(generate_images(&gen, count, seed)?)
    } else {
        Err(usage(format!("{} is neither an image directory nor a checkpoint", path.display())))
    }
}

pub fn cmd_analyze(a: &AnalyzeArgs, _cli: &Cli, cfg: &mut RunConfig) -> CliResult {
    if let Some(al) = a.alpha {
        cfg.analyze.alpha = al;
    }
    if a.two_sided {
        cfg.analyze.two_sided = true;
    }
    if let Some(c) = a.count {
        cfg.analyze.count = c;
    }
    cfg.validate()?;
    let seed = cfg.train.seed;
    let set_a = load_set(&a.a, cfg.analyze.count, seed)?;
    let set_b = load_set(&a.b, cfg.analyze.count, seed)?;
    let tail = if cfg.analyze.two_sided { Tail::TwoSided } else { Tail::Upper };
    let report = analyze(&set_a, &set_b, cfg.analyze.alpha, tail)?;
    println!("{report}");
    if let Some(path) = &a.csv {
        fs::write(path, format!("{}\n{}\n", AnalysisReport::CSV_HEADER, report.to_csv_row()))?;
    }
    Ok(())
}

pub fn cmd_verify_arch() -> CliResult {
    let hyper = LayerHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gen = build_generator::<f32>(1, &hyper, &mut rng)?;
    let disc = build_discriminator::<f32>(1, &hyper, &mut rng)?;
    let reports = [verify_architecture(&gen), verify_architecture(&disc)];
    for r in &reports {
        println!("{r}\n");
    }
    if reports.iter().all(|r| r.all_match()) {
        println!("architecture check passed");
        Ok(())
    } else {
        Err(CliError::Runtime(Error::invalid("architecture does not match the reference tables")))
    }
}
