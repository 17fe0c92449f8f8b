//! `lesionpipe` command-line front end.
//!
//! [`run`] parses arguments, executes one subcommand and returns the process
//! exit status: 0 on success, 1 on a usage error, 2 when inputs are invalid or
//! a computation fails.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use lesionpipe_core::config::PipelineConfig;
use lesionpipe_core::imageops::{augment_dataset, parse_presets, preprocess_image, AugmentPolicy};
use lesionpipe_core::neuralnet::grad_check;
use lesionpipe_core::predictor::{evaluate, parse_submission, predict_dataset, write_submission, TaskMetrics};
use lesionpipe_core::raster::{encode_ppm, load_crop_spec, load_manifest, read_ppm, DirSource};
use lesionpipe_core::trainer::{load_checkpoint, save_checkpoint, train, EpochStats};
use lesionpipe_core::{Architecture, CalibrationParams, CropSpec, DatasetManifest, ModelCheckpoint, Task, TaskLabeling};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Largest tolerated gradient-check error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
const GRADCHECK_ARCH: &str = "conv(2),relu,maxpool,fc(1)";
const GRADCHECK_SIZE: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "lesionpipe", version, about = "Skin lesion classification pipeline")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker threads; outputs are identical for every value.
    #[arg(long, global = true, env = "LESIONPIPE_JOBS", value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Crop and resize every PPM image in a directory.
    Preprocess(PreprocessArgs),
    /// Write each manifest image plus one transformed copy per preset.
    Augment(AugmentArgs),
    /// Train the model for one task.
    Train(TrainArgs),
    /// Score a test manifest with both task models.
    Predict(PredictArgs),
    /// Accuracy and AUC of a submission against ground truth.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[arg(long)]
    images: PathBuf,
    /// CSV `image_id,x,y,width,height`; images without a row get a centered square crop.
    #[arg(long)]
    crops: Option<PathBuf>,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..))]
    size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated, e.g. `hflip,vflip,scale:1.2,rotate:-15..15`.
    #[arg(long)]
    presets: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    task: Option<u8>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    images: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    out: Option<PathBuf>,
    /// Epoch log destination; standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model1: PathBuf,
    #[arg(long)]
    model2: PathBuf,
    /// Supplies calibration defaults (`a1`, `b1`, `a2`, `b2`); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    a1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    a2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    b2: Option<f64>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Runs the command line `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n as usize).build() {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(e.into()),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Preprocess(a) => preprocess(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => return gradcheck(a),
    }
    .map(|()| EXIT_OK)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(&read_text(path)?).with_context(|| format!("manifest {}", path.display()))
}

fn read_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::parse(&read_text(p)?).with_context(|| format!("config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_model(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&bytes).with_context(|| format!("checkpoint {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Sorted `(stem, path)` of every `.ppm` file directly inside `dir`.
fn list_ppm(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.push((stem.to_string(), path.clone()));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let crops = match &a.crops {
        Some(p) => load_crop_spec(&read_text(p)?).with_context(|| format!("crops {}", p.display()))?,
        None => CropSpec::default(),
    };
    let files = list_ppm(&a.images)?;
    if files.is_empty() {
        bail!("no .ppm images in {}", a.images.display());
    }
    for id in crops.ids() {
        if files.binary_search_by(|(stem, _)| stem.as_str().cmp(id)).is_err() {
            eprintln!("warning: crop row for {id} has no image");
        }
    }
    create_dir(&a.out)?;
    let size = a.size as usize;
    files.par_iter().try_for_each(|(id, path)| -> Result<()> {
        let img = read_ppm(path)?;
        let out = preprocess_image(&img, crops.get(id), size, id)?;
        write_file(&a.out.join(format!("{id}.ppm")), &encode_ppm(&out))
    })
}

fn augment(a: AugmentArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let presets = parse_presets(&a.presets)?;
    let policy = AugmentPolicy::new(presets, a.seed);
    let data = augment_dataset(&manifest, &policy, &DirSource::new(&a.images))?;
    create_dir(&a.out)?;
    data.images.par_iter().try_for_each(|(id, img)| {
        write_file(&a.out.join(format!("{id}.ppm")), &encode_ppm(img))
    })?;
    write_file(&a.out.join("manifest.csv"), data.manifest.to_csv().as_bytes())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = read_config(a.config.as_deref())?;
    if a.dump_config {
        print!("{config}");
        return Ok(());
    }
    let (Some(manifest), Some(images), Some(out)) = (&a.manifest, &a.images, &a.out) else {
        unreachable!("clap enforces required arguments");
    };
    let task = a
        .task
        .and_then(Task::from_tag)
        .context("--task is required (1 = melanoma, 2 = seborrheic keratosis)")?;
    let manifest = read_manifest(manifest)?;
    let labeling = TaskLabeling::from_manifest(&manifest, task);

    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(log, "{}", EpochStats::CSV_HEADER)?;
    let mut log_error = None;
    let outcome = train(&config.train_config(), &labeling, &DirSource::new(images), |s| {
        if log_error.is_none() {
            if let Err(e) = writeln!(log, "{}", s.csv_line()).and_then(|()| log.flush()) {
                log_error = Some(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(e).context("writing training log");
    }
    log.flush()?;
    write_file(out, &save_checkpoint(&outcome.checkpoint))
}

fn predict(a: PredictArgs) -> Result<()> {
    let config = read_config(a.config.as_deref())?;
    let calibration = |task: Task, a: Option<f64>, b: Option<f64>| -> Result<CalibrationParams> {
        let base = config.calibration_for(task);
        CalibrationParams::new(a.unwrap_or(base.a()), b.unwrap_or(base.b()))
            .with_context(|| format!("calibration for {task}"))
    };
    let p1 = calibration(Task::Melanoma, a.a1, a.b1)?;
    let p2 = calibration(Task::Keratosis, a.a2, a.b2)?;
    let m1 = read_model(&a.model1)?;
    let m2 = read_model(&a.model2)?;
    let manifest = read_manifest(&a.manifest)?;
    let table = predict_dataset((&m1, p1), (&m2, p2), &manifest, &DirSource::new(&a.images))?;
    write_file(&a.out, write_submission(&table).as_bytes())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let table = parse_submission(&read_text(&a.pred)?).with_context(|| format!("submission {}", a.pred.display()))?;
    let truth = read_manifest(&a.truth)?;
    let metrics = evaluate(&table, &truth)?;
    let mut out = io::stdout().lock();
    writeln!(out, "{}", TaskMetrics::CSV_HEADER)?;
    for m in &metrics {
        writeln!(out, "{}", m.csv_line())?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let arch: Architecture = GRADCHECK_ARCH.parse()?;
    let err = grad_check(&arch, GRADCHECK_SIZE, a.seed)?;
    println!("{err:e}");
    if err <= GRADCHECK_TOLERANCE {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {err:e} > {GRADCHECK_TOLERANCE:e}");
        Ok(EXIT_DATA)
    }
}
