use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use spml_core::config::RunConfig;
use spml_core::consistency::HeatmapStore;
use spml_core::data::{generate_synthetic, save_dataset, to_single_positive, ObjectCount, SyntheticSpec};
use spml_core::metrics::EvaluationReport;
use spml_core::model::Model;
use spml_core::numerics::Real;
use spml_core::trainer::{
    eval_inputs, evaluate_records, load_checkpoint, load_model, train, val_top1_targets, Precision, RunOptions,
};
use spml_core::Error;

/// Environment variable naming the directory that holds run directories.
const RUN_ROOT_ENV: &str = "SPML_RUN_ROOT";

#[derive(Parser)]
#[command(name = "spml", version, about = "Multi-label training from single positive labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset with single-positive annotations.
    GenData(GenDataArgs),
    /// Train a model; `--key value` pairs override config file entries.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset split.
    Eval(EvalArgs),
    /// Export stored heatmaps as grayscale PNGs.
    InspectHeatmaps(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Mean objects per image (one plus a clamped Poisson draw).
    #[arg(long, default_value_t = 1.5)]
    lambda: f64,
    /// Keep the full labels as annotations instead of one positive per image.
    #[arg(long)]
    full: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines.
    config: Option<PathBuf>,
    /// Run directory; defaults to `$SPML_RUN_ROOT/<config name>` or `runs/<config name>`.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from the last checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many epochs without shortening the schedule.
    #[arg(long)]
    stop_after: Option<u32>,
    /// Overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// `best.bin` or `last.bin` from a run's checkpoints directory.
    checkpoint: PathBuf,
    /// `val` or `train`.
    #[arg(long, default_value = "val")]
    split: String,
    /// Dataset directory, if different from the one the run used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory for `report.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    run_dir: PathBuf,
    /// Training-set positions, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<usize>,
    /// Class ids, comma separated; all classes when omitted.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    /// Output directory; defaults to `<run_dir>/heatmaps/png`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::InvalidArgument(format!("expected `--key value`, got `{a}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(key, "override is missing its value"))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let spec = SyntheticSpec {
        num_images: args.n,
        num_classes: args.classes,
        image_size: args.size,
        objects: ObjectCount::ClampedPoisson {
            lambda: args.lambda,
            max: 5,
        },
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec)?;
    let records = if args.full { records } else { to_single_positive(&records, args.seed)? };
    save_dataset(&args.out, &records)?;
    info!("wrote {} images to {}", records.len(), args.out.display());
    Ok(())
}

fn run_dir_for(args: &TrainArgs) -> PathBuf {
    if let Some(dir) = &args.run_dir {
        return dir.clone();
    }
    let name = args
        .config
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(name)
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    let (train_set, val_set) = cfg.load_splits()?;
    let dir = run_dir_for(args);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let text = cfg.to_text();
    let echo = dir.join("config.echo");
    fs::write(&echo, &text).map_err(|e| Error::io(&echo, e))?;
    info!(
        "training on {} images, validating on {}, run directory {}",
        train_set.len(),
        val_set.len(),
        dir.display()
    );
    let opts = RunOptions {
        run_dir: Some(dir),
        resume: args.resume,
        stop_after: args.stop_after,
        config_text: text,
    };
    let best = match cfg.train.precision {
        Precision::F32 => train::<f32>(&cfg.train, &train_set, &val_set, &opts)?.state.best.map(|b| (b.epoch, b.map)),
        Precision::F64 => train::<f64>(&cfg.train, &train_set, &val_set, &opts)?.state.best.map(|b| (b.epoch, b.map)),
    };
    if let Some((epoch, map)) = best {
        println!("best val mAP {map:.6} at epoch {epoch}");
    }
    Ok(())
}

/// Loads a model from either a best-model file or a full checkpoint.
fn load_any<T: Real>(path: &Path) -> Result<(String, Model<T>), Error> {
    match load_model::<T>(path) {
        Ok(saved) => Ok((saved.config_text, saved.model)),
        Err(first) => match load_checkpoint::<T>(path) {
            Ok((text, state)) => Ok((text, state.model)),
            Err(_) => Err(first),
        },
    }
}

fn evaluate_with<T: Real>(args: &EvalArgs, cfg: &RunConfig, model: &Model<T>) -> Result<EvaluationReport, Error> {
    let (train_set, val_set) = cfg.load_splits()?;
    let records = match args.split.as_str() {
        "val" => val_set,
        "train" => train_set,
        other => return Err(Error::InvalidArgument(format!("unknown split `{other}`, expected val or train"))),
    };
    if records.iter().any(|r| r.annotation.y.is_none()) {
        return Err(Error::InvalidArgument("the dataset has no full labels to evaluate against".into()));
    }
    let inputs = eval_inputs::<T>(&records, model.config.input_size)?;
    let targets = val_top1_targets(&records, &cfg.train)?;
    Ok(evaluate_records(model, &inputs, &records, &targets, cfg.train.ap_variant)?.0)
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    if !args.checkpoint.exists() {
        return Err(Error::format(&args.checkpoint, "checkpoint not found"));
    }
    let text = load_any::<f64>(&args.checkpoint)?.0;
    let mut cfg = RunConfig::from_text(&text)?;
    if let Some(dir) = &args.data {
        cfg.data.dir = dir.to_string_lossy().into_owned();
    }
    let report = match cfg.train.precision {
        Precision::F32 => evaluate_with(args, &cfg, &load_any::<f32>(&args.checkpoint)?.1)?,
        Precision::F64 => evaluate_with(args, &cfg, &load_any::<f64>(&args.checkpoint)?.1)?,
    };
    print!("{}", report.summary());
    println!("mAP (exact) {}", report.map);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("report.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut write = || -> csv::Result<()> {
            w.write_record(["metric", "value"])?;
            for (name, value) in report.rows() {
                w.write_record([name, value.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::format(&path, e.to_string()))?;
    }
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<(), Error> {
    let path = args.run_dir.join("heatmaps").join("store.bin");
    if !path.exists() {
        return Err(Error::format(&path, "no heatmap store; was the run trained with spatial consistency?"));
    }
    let store = HeatmapStore::load(&path)?;
    let classes: Vec<usize> = if args.classes.is_empty() {
        (0..store.num_classes()).collect()
    } else {
        args.classes.clone()
    };
    let out = args.out.clone().unwrap_or_else(|| args.run_dir.join("heatmaps").join("png"));
    for (n, c) in store.export_png(&out, &args.samples, &classes)? {
        warn!("sample {n}, class {c}: heatmap was pruned by top-k retention; wrote an all-zero image");
    }
    info!("wrote {} images to {}", args.samples.len() * classes.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::InspectHeatmaps(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
