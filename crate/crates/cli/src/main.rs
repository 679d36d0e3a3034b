//! spectrarec: generate synthetic paired RGB/HSI datasets, train and
//! fine-tune small reconstruction networks, evaluate them with the full
//! metric suite, export point spectra, and run the built-in verification
//! checks.
//!
//! Exit codes: 0 success, 1 verification-check failure, 2 usage or
//! config error.

mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spectrarec_core::cube::{self, make_range_masks, CameraResponse, Hypercube, RgbImage};
use spectrarec_core::fsio;
use spectrarec_core::metrics::{self, EvalOptions, PerImageMetrics, Stat};
use spectrarec_core::nn::{self, ModelKind, ModelSpec, Weights};
use spectrarec_core::synth::{self, Dataset, DatasetPair, SceneSpec, Split};
use spectrarec_core::train::{self, AugmentConfig, TrainConfig};
use spectrarec_core::verify;

#[derive(Parser)]
#[command(
    name = "spectrarec",
    about = "Hyperspectral reconstruction toolkit: synthetic data, training, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired RGB/HSI dataset directory
    Gen(GenArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Fine-tune a checkpoint on a dataset with a different channel count
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a dataset split and write metric reports
    Eval(EvalArgs),
    /// Export label and predicted spectra at selected pixels as CSV
    Spectra(SpectraArgs),
    /// Run the built-in verification suite (metric oracles, gradient
    /// checks, parameter counts, round-trips)
    Check,
}

#[derive(Args)]
struct GenArgs {
    /// Scene config file (key = value; see README for keys)
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Model name: pixel_feature_net, local_feature_net, or
    /// spectral_attention_net
    #[arg(long)]
    model: String,
    /// Dataset directory (from `spectrarec gen`)
    #[arg(long)]
    dataset: PathBuf,
    /// Training config file (key = value; defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path (HSW1)
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: <out>.history.csv)
    #[arg(long)]
    history: Option<PathBuf>,
    /// Disable geometric augmentation (train on the images as-is)
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Pretrained checkpoint (HSW1)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Training config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// History CSV path (default: <out>.history.csv)
    #[arg(long)]
    history: Option<PathBuf>,
    /// Disable geometric augmentation
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (HSW1)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    dataset: PathBuf,
    /// Split to evaluate: train, val, or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Output report directory
    #[arg(long)]
    out: PathBuf,
    /// Report SAM in degrees instead of radians
    #[arg(long)]
    sam_degrees: bool,
}

#[derive(Args)]
struct SpectraArgs {
    /// Checkpoint to run (HSW1)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Hyperspectral label cube (HSC1)
    #[arg(long)]
    cube: PathBuf,
    /// Paired RGB file (HSC1, C=3); synthesized from the cube with the
    /// default boxcar response when omitted
    #[arg(long)]
    rgb: Option<PathBuf>,
    /// Pixel to export, as `h,w`; repeatable
    #[arg(long = "point", required = true)]
    points: Vec<String>,
    /// Output directory for the per-point CSV files
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Finetune(args) => cmd_finetune(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Spectra(args) => cmd_spectra(args),
        Command::Check => return cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(args: GenArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))?;
    let scene = config::SceneConfig::parse(&text)?;
    let template = SceneSpec {
        height: scene.height,
        width: scene.width,
        lambda_min: scene.lambda_min,
        lambda_max: scene.lambda_max,
        lambda_step: scene.lambda_step,
        endmembers: Vec::new(),
        blob_count: scene.blob_count,
        noise_sigma: scene.noise_sigma,
        seed: scene.seed,
    };
    let grid = template.wavelength_grid();
    let endmembers = synth::make_endmembers(&grid, scene.endmember_count, scene.seed)?;
    let template = SceneSpec {
        endmembers,
        ..template
    };
    let response = CameraResponse::boxcar_thirds(&grid)?;
    let dataset = synth::make_dataset(
        scene.scene_count,
        &template,
        &response,
        (scene.train_frac, scene.val_frac, scene.test_frac),
    )?;
    synth::write_dataset(&dataset, &args.out)?;
    for (split, count) in synth::split_sizes(&dataset) {
        println!("{} {}", split, count);
    }
    println!(
        "wrote {} pairs ({} channels, {}x{}) to {}",
        dataset.pairs.len(),
        dataset.channels(),
        scene.height,
        scene.width,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------------

fn disable_augment(config: &mut TrainConfig, dataset: &Dataset) {
    let (h, w) = dataset
        .pairs
        .first()
        .map(|p| (p.rgb.height(), p.rgb.width()))
        .unwrap_or((1, 1));
    config.augment = AugmentConfig::identity(h, w);
}

fn history_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut os = out.as_os_str().to_os_string();
        os.push(".history.csv");
        PathBuf::from(os)
    })
}

fn report_training(
    spec: &ModelSpec,
    outcome: &train::TrainOutcome,
    out: &Path,
    history: &Path,
) -> Result<()> {
    for row in &outcome.history {
        println!("{} {} {} {}", row.epoch, row.train_loss, row.val_loss, row.lr);
    }
    nn::save_weights(spec, &outcome.weights, out)?;
    fsio::write_atomic(history, train::history_csv(&outcome.history).as_bytes())?;
    println!(
        "best epoch {} (val loss {}); checkpoint {}; history {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        out.display(),
        history.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let kind = ModelKind::from_str(&args.model)?;
    let dataset = synth::load_dataset(&args.dataset)?;
    let mut config = config::load_train_config(args.config.as_deref())?;
    if args.no_augment {
        disable_augment(&mut config, &dataset);
    }
    let spec = kind.build(dataset.channels());
    let outcome = train::train_model(&spec, &dataset, &config)?;
    report_training(
        &spec,
        &outcome,
        &args.out,
        &history_path(&args.out, args.history),
    )
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let (spec, weights) = nn::load_weights(&args.checkpoint)?;
    let dataset = synth::load_dataset(&args.dataset)?;
    let mut config = config::load_train_config(args.config.as_deref())?;
    if args.no_augment {
        disable_augment(&mut config, &dataset);
    }
    let (new_spec, outcome) = train::fine_tune(&spec, &weights, &dataset, &config)?;
    report_training(
        &new_spec,
        &outcome,
        &args.out,
        &history_path(&args.out, args.history),
    )
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn worker_threads() -> usize {
    std::env::var("SPECTRAREC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn predict(
    spec: &ModelSpec,
    weights: &Weights,
    rgb: &RgbImage,
    wavelengths: &[f64],
) -> Result<Hypercube> {
    Ok(nn::forward(spec, weights, rgb)?.with_wavelengths(wavelengths.to_vec())?)
}

fn evaluate_split(
    spec: &ModelSpec,
    weights: &Weights,
    pairs: &[&DatasetPair],
    wavelengths: &[f64],
    opts: &EvalOptions,
) -> Result<Vec<PerImageMetrics>> {
    let masks = make_range_masks(wavelengths)?;
    let threads = worker_threads().min(pairs.len()).max(1);
    let chunk = pairs.len().div_ceil(threads);
    let mut slots: Vec<Option<Result<PerImageMetrics>>> = Vec::new();
    slots.resize_with(pairs.len(), || None);
    std::thread::scope(|scope| {
        for (slot_chunk, pair_chunk) in slots.chunks_mut(chunk).zip(pairs.chunks(chunk)) {
            let masks = &masks;
            scope.spawn(move || {
                for (slot, pair) in slot_chunk.iter_mut().zip(pair_chunk) {
                    let result = predict(spec, weights, &pair.rgb, wavelengths).and_then(|pred| {
                        Ok(metrics::evaluate_pair(&pair.cube, &pred, masks, opts)?)
                    });
                    *slot = Some(result);
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("all slots filled"))
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (spec, weights) = nn::load_weights(&args.checkpoint)?;
    let dataset = synth::load_dataset(&args.dataset)?;
    if spec.output_channels != dataset.channels() {
        bail!(
            "checkpoint predicts {} channels but the dataset has {}; \
             run `spectrarec finetune` to adapt the head",
            spec.output_channels,
            dataset.channels()
        );
    }
    let split = Split::from_str(&args.split)?;
    let pairs = dataset.split(split);
    if pairs.is_empty() {
        bail!("split {:?} is empty in this dataset", args.split);
    }
    let wavelengths = dataset.wavelengths();
    let opts = EvalOptions::default();
    let per_image = evaluate_split(&spec, &weights, &pairs, &wavelengths, &opts)?;
    let mut report = metrics::aggregate_reports(&per_image)?;
    if args.sam_degrees {
        let k = 180.0 / std::f64::consts::PI;
        report.sam = Stat {
            mean: report.sam.mean * k,
            std: report.sam.std * k,
        };
    }
    std::fs::create_dir_all(&args.out)?;
    let files = [
        ("metrics.csv", metrics::metrics_csv(&report)),
        ("ranges.csv", metrics::ranges_csv(&report)),
        (
            "per_channel.csv",
            metrics::per_channel_csv(&report, &wavelengths),
        ),
        ("chart.svg", svg::per_channel_chart(&report, &wavelengths)),
    ];
    for (name, content) in files {
        fsio::write_atomic(&args.out.join(name), content.as_bytes())?;
    }
    println!(
        "evaluated {} {} images ({} channels)",
        pairs.len(),
        args.split,
        dataset.channels()
    );
    for (name, stat) in [
        ("mae", report.mae),
        ("rmse", report.rmse),
        ("psnr", report.psnr),
        ("sam", report.sam),
        ("ssim", report.ssim),
        ("mrae", report.mrae),
    ] {
        println!("{} {} {}", name, stat.mean, stat.std);
    }
    println!("reports written to {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// spectra
// ---------------------------------------------------------------------------

fn parse_point(raw: &str) -> Result<(usize, usize)> {
    let (h, w) = raw
        .split_once(',')
        .ok_or_else(|| anyhow!("point {:?} is not of the form h,w", raw))?;
    Ok((
        h.trim().parse().context("bad point row")?,
        w.trim().parse().context("bad point column")?,
    ))
}

fn cmd_spectra(args: SpectraArgs) -> Result<()> {
    let (spec, weights) = nn::load_weights(&args.checkpoint)?;
    let label = cube::load_cube(&args.cube)?;
    if spec.output_channels != label.channels() {
        bail!(
            "checkpoint predicts {} channels but the cube has {}",
            spec.output_channels,
            label.channels()
        );
    }
    let points = args
        .points
        .iter()
        .map(|p| parse_point(p))
        .collect::<Result<Vec<_>>>()?;
    for &(h, w) in &points {
        if h >= label.height() || w >= label.width() {
            bail!(
                "point ({}, {}) outside the {}x{} cube",
                h,
                w,
                label.height(),
                label.width()
            );
        }
    }
    let rgb: RgbImage = match &args.rgb {
        Some(path) => synth::storage_cube_as_rgb(&cube::load_cube(path)?)?,
        None => {
            let response = CameraResponse::boxcar_thirds(label.wavelengths())?;
            cube::synthesize_rgb(&label, &response)?
        }
    };
    if rgb.height() != label.height() || rgb.width() != label.width() {
        bail!("rgb and cube dimensions differ");
    }
    let prediction = predict(&spec, &weights, &rgb, label.wavelengths())?;
    std::fs::create_dir_all(&args.out)?;
    for (h, w) in points {
        let label_spec = cube::extract_spectrum(&label, h, w)?;
        let pred_spec = cube::extract_spectrum(&prediction, h, w)?;
        let mut csv = String::from("wavelength_nm,label,prediction\n");
        for ((wl, l), p) in label.wavelengths().iter().zip(&label_spec).zip(&pred_spec) {
            csv.push_str(&format!("{},{},{}\n", wl, l, p));
        }
        let path = args.out.join(format!("spectrum_{}_{}.csv", h, w));
        fsio::write_atomic(&path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn cmd_check() -> ExitCode {
    let fault = std::env::var("SPECTRAREC_FAULT").ok();
    let checks = verify::run_all(fault.as_deref());
    let mut failed = 0usize;
    for check in &checks {
        let status = if check.passed { "ok  " } else { "FAIL" };
        println!("{} {}: {}", status, check.name, check.detail);
        if !check.passed {
            failed += 1;
        }
    }
    if failed == 0 {
        println!("all {} checks passed", checks.len());
        ExitCode::SUCCESS
    } else {
        println!("{} of {} checks failed", failed, checks.len());
        ExitCode::from(1)
    }
}
