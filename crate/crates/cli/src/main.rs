//! `charm`: dataset generation, cross-validated training, evaluation grids,
//! structured masking, transfer and report rendering.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 I/O or missing
//! artifact, 4 numeric failure.

mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use charm_core::augment::{Representation, SplitAxis};
use charm_core::cnn::{BackboneConfig, ModelKind, ModelSpec};
use charm_core::experiment::{self, ExperimentReport, Format, Run, RunManifest, GRID};
use charm_core::signal::{generate_synthetic, Dataset, Montage, SynthSpec, MANIFEST_FILE};
use charm_core::train::{run_kfold, Augment, TrainConfig, TransferMode};
use charm_core::{DataError, ModelError};

#[derive(Parser)]
#[command(name = "charm", version, about = "Channel remapping experiments on multichannel signals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a built-in alias or a spec JSON file.
    SynthGen {
        /// "synth-A", "synth-B" or a path to a spec JSON.
        #[arg(long)]
        spec: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cross-validated training; writes one checkpoint per fold plus metrics.
    Train {
        /// Dataset directory or built-in alias.
        #[arg(long)]
        data: String,
        #[arg(long, value_enum)]
        model: KindArg,
        #[arg(long, value_enum, default_value = "none")]
        augment: AugmentArg,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 15)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        knobs: Knobs,
        /// Divides every backbone layer's feature maps by this factor.
        #[arg(long, default_value_t = 1)]
        width: usize,
        /// Feature maps of the channel embedding network.
        #[arg(long)]
        embed_maps: Option<usize>,
    },
    /// Evaluate a run under shuffling and masking conditions.
    EvalGrid {
        #[arg(long)]
        run: PathBuf,
        /// Conditions: clean, shuffled, noisy, noisyNN. Defaults to the full grid.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
        #[arg(long, value_enum, default_value = "drop")]
        repr: ReprArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluate a run on each half of the montage.
    Structured {
        #[arg(long)]
        run: PathBuf,
        /// Montage JSON; defaults to the dataset's own montage.
        #[arg(long)]
        montage: Option<PathBuf>,
        /// Split axes; both when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        axis: Vec<AxisArg>,
        #[arg(long, value_enum, default_value = "drop")]
        repr: ReprArg,
        #[command(flatten)]
        output: Output,
    },
    /// Transfer a run's fold models to another dataset.
    Transfer {
        #[arg(long)]
        source_run: PathBuf,
        /// Dataset directory or built-in alias.
        #[arg(long)]
        target_data: String,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long, default_value_t = 2)]
        folds: usize,
        /// Defaults to the source run's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        knobs: Knobs,
        /// Skip training the in-domain reference model.
        #[arg(long)]
        no_in_domain: bool,
        #[command(flatten)]
        output: Output,
    },
    /// Merge report JSON files into one table.
    Report {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: FormatArg,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a bar chart as SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

/// Optimizer knobs; unset values keep the defaults (or the source run's).
#[derive(clap::Args)]
struct Knobs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

impl Knobs {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.window {
            cfg.window = v;
        }
    }
}

#[derive(clap::Args)]
struct Output {
    /// Where to save the report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Table format printed to stdout.
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Baseline,
    CharmBase,
    CharmCkv,
    CharmCq,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Baseline => ModelKind::Baseline,
            KindArg::CharmBase => ModelKind::CharmBase,
            KindArg::CharmCkv => ModelKind::CharmCkv,
            KindArg::CharmCq => ModelKind::CharmCq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AugmentArg {
    None,
    Cms,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReprArg {
    Zero,
    Drop,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fixed,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Md,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
            FormatArg::Md => Format::Markdown,
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let code = if e.is_numeric() {
            4
        } else if e.is_io() || matches!(e, ModelError::Data(DataError::Json { .. })) {
            3
        } else {
            2
        };
        Self { code, message: e.to_string() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        ModelError::Data(e).into()
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

/// Built-in alias or a dataset directory.
fn load_dataset(name: &str) -> Result<Dataset, Failure> {
    if let Some(spec) = SynthSpec::alias(name) {
        return Ok(generate_synthetic(&spec)?);
    }
    Ok(Dataset::load(Path::new(name))?)
}

fn emit(report: &ExperimentReport, output: &Output) -> Result<(), Failure> {
    if let Some(path) = &output.out {
        report.save(path)?;
    }
    print!("{}", experiment::render(report, output.format.into()));
    Ok(())
}

fn synth_gen(spec: &str, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut spec = match SynthSpec::alias(spec) {
        Some(s) => s,
        None => {
            let path = Path::new(spec);
            let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
            serde_json::from_str(&text).map_err(|e| Failure::usage(format!("--spec {}: {e}", path.display())))?
        }
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let ds = generate_synthetic(&spec).map_err(|e| Failure::usage(format!("--spec: {e}")))?;
    ds.save(out)?;
    let manifest = out.join(MANIFEST_FILE);
    let bytes = std::fs::read(&manifest).map_err(|e| io_failure(&manifest, e))?;
    let mut counts = vec![0usize; ds.class_count()];
    for r in &ds.recordings {
        counts[r.label] += 1;
    }
    println!(
        "{}: {} recordings, {} channels, {} classes {:?}, manifest sha256 {}",
        ds.manifest.name,
        ds.recordings.len(),
        ds.channels(),
        ds.class_count(),
        counts,
        hex::encode(Sha256::digest(&bytes))
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &str,
    kind: ModelKind,
    augment: AugmentArg,
    folds: usize,
    epochs: usize,
    seed: u64,
    out: &Path,
    knobs: &Knobs,
    width: usize,
    embed_maps: Option<usize>,
) -> Result<(), Failure> {
    if width == 0 {
        return Err(Failure::usage("--width must be at least 1"));
    }
    let ds = load_dataset(data)?;
    let mut cfg = TrainConfig {
        epochs,
        seed,
        augment: match augment {
            AugmentArg::None => Augment::None,
            AugmentArg::Cms => Augment::Cms,
        },
        ..TrainConfig::default()
    };
    knobs.apply(&mut cfg);
    cfg.validate()?;
    let mut spec = ModelSpec::new(kind, ds.class_count(), ds.channels());
    spec.backbone = BackboneConfig::narrowed(width);
    if let Some(m) = embed_maps {
        spec.charm.embed_maps = m;
    }
    spec.validate()?;
    let (metrics, models) = run_kfold(&ds, &spec, &cfg, folds)?;
    let run = Run { manifest: RunManifest { data: data.into(), kind, folds, config: cfg }, metrics, models };
    run.save(out)?;
    for f in &run.metrics.folds {
        println!("fold {}: test accuracy {:.4}", f.fold, f.test_accuracy);
    }
    println!("{} on {}: {:.4} ± {:.4}", run.method(), run.metrics.dataset, run.metrics.mean, run.metrics.std);
    Ok(())
}

fn representation(r: ReprArg) -> Representation {
    match r {
        ReprArg::Zero => Representation::Zero,
        ReprArg::Drop => Representation::Drop,
    }
}

fn load_run(dir: &Path) -> Result<(Run, Dataset), Failure> {
    let run = Run::load(dir)?;
    let ds = load_dataset(&run.manifest.data.to_string_lossy())?;
    Ok((run, ds))
}

fn eval_grid(run: &Path, grid: &[String], repr: ReprArg, seed: u64, output: &Output) -> Result<(), Failure> {
    let conditions: Vec<&str> = if grid.is_empty() { GRID.to_vec() } else { grid.iter().map(String::as_str).collect() };
    if let Some(bad) = conditions.iter().find(|c| experiment::grid_condition(c).is_none()) {
        return Err(Failure::usage(format!("--grid: unknown condition '{bad}'")));
    }
    let (run, ds) = load_run(run)?;
    let report = experiment::noisy_grid(&[&run], &ds, &conditions, representation(repr), seed)?;
    emit(&report, output)
}

fn structured(run: &Path, montage: Option<&Path>, axis: &[AxisArg], repr: ReprArg, output: &Output) -> Result<(), Failure> {
    let (run, ds) = load_run(run)?;
    let montage = match montage {
        Some(p) => Montage::load(p).map_err(|e| match e {
            DataError::Io { .. } => Failure::from(e),
            e => Failure::usage(format!("--montage: {e}")),
        })?,
        None => ds.montage.clone(),
    };
    if montage.len() != ds.channels() {
        return Err(Failure::usage(format!("--montage has {} electrodes, dataset has {} channels", montage.len(), ds.channels())));
    }
    let axes: Vec<SplitAxis> = if axis.is_empty() {
        vec![SplitAxis::Horizontal, SplitAxis::Vertical]
    } else {
        axis.iter()
            .map(|a| match a {
                AxisArg::Horizontal => SplitAxis::Horizontal,
                AxisArg::Vertical => SplitAxis::Vertical,
            })
            .collect()
    };
    let report = experiment::structured_masking(&[&run], &ds, &montage, &axes, representation(repr))?;
    emit(&report, output)
}

#[allow(clippy::too_many_arguments)]
fn transfer(
    source: &Path,
    target: &str,
    mode: ModeArg,
    folds: usize,
    epochs: Option<usize>,
    seed: u64,
    knobs: &Knobs,
    no_in_domain: bool,
    output: &Output,
) -> Result<(), Failure> {
    let run = Run::load(source)?;
    let ds = load_dataset(target)?;
    let mut cfg = TrainConfig { seed, augment: Augment::None, ..run.manifest.config.clone() };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    knobs.apply(&mut cfg);
    cfg.validate()?;
    let mode = match mode {
        ModeArg::Fixed => TransferMode::Fixed,
        ModeArg::Finetune => TransferMode::Finetune,
    };
    let in_domain = if no_in_domain {
        None
    } else {
        let mut spec = run.metrics.model.clone();
        spec.classes = ds.class_count();
        spec.input_channels = ds.channels();
        Some(run_kfold(&ds, &spec, &cfg, folds)?.0)
    };
    let report = experiment::transfer(&run, &ds, mode, &cfg, folds, in_domain.as_ref())?;
    emit(&report, output)
}

fn report(inputs: &[PathBuf], format: FormatArg, out: Option<&Path>, plot_path: Option<&Path>) -> Result<(), Failure> {
    let reports = inputs.iter().map(|p| ExperimentReport::load(p)).collect::<Result<Vec<_>, _>>()?;
    let merged = experiment::merge_reports(reports)?;
    let text = experiment::render(&merged, format.into());
    match out {
        Some(path) => charm_core::io_util::write_atomic(path, text.as_bytes()).map_err(|e| io_failure(path, e))?,
        None => print!("{text}"),
    }
    if let Some(path) = plot_path {
        let svg = plot::bar_chart(&merged);
        charm_core::io_util::write_atomic(path, svg.as_bytes()).map_err(|e| io_failure(path, e))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthGen { spec, out, seed } => synth_gen(&spec, &out, seed),
        Command::Train { data, model, augment, folds, epochs, seed, out, knobs, width, embed_maps } => {
            train(&data, model.into(), augment, folds, epochs, seed, &out, &knobs, width, embed_maps)
        }
        Command::EvalGrid { run, grid, repr, seed, output } => eval_grid(&run, &grid, repr, seed, &output),
        Command::Structured { run, montage, axis, repr, output } => structured(&run, montage.as_deref(), &axis, repr, &output),
        Command::Transfer { source_run, target_data, mode, folds, epochs, seed, knobs, no_in_domain, output } => {
            transfer(&source_run, &target_data, mode, folds, epochs, seed, &knobs, no_in_domain, &output)
        }
        Command::Report { inputs, format, out, plot } => report(&inputs, format, out.as_deref(), plot.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("CHARM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only fails if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
