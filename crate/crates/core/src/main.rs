//! Command-line interface: train, infer, eval, saliency, selftest.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use patchsr::checkpoint::Checkpoint;
use patchsr::config::TrainConfig;
use patchsr::data::{load_corpus, split_dir, Split};
use patchsr::error::{Error, Result};
use patchsr::generator::GeneratorParams;
use patchsr::image::{load_image, save_png, ImageTensor};
use patchsr::losses::LossConfig;
use patchsr::metrics::{metric_rows, visual_activation_map, write_metrics_csv, MetricSpace};
use patchsr::params::load_named;
use patchsr::tensor::Tensor;
use patchsr::training::{run_training, TrainState};

const DATA_ROOT_ENV: &str = "PATCHSR_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "patchsr",
    version,
    about = "Convolution-free transformer-GAN for single-image super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an HR image corpus.
    Train(TrainArgs),
    /// Super-resolve one image with a trained checkpoint.
    Infer(InferArgs),
    /// Evaluate a checkpoint over a dataset, emitting a CSV report.
    Eval(EvalArgs),
    /// Write the input-gradient activation map for an (LR, HR) pair.
    Saliency(SaliencyArgs),
    /// Run the built-in verification suite.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// HR corpus directory (or set PATCHSR_DATA_ROOT).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out_dir: PathBuf,
    /// Config file (key = value lines); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generic override, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    loss_variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    crop_lr: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Resume from a checkpoint (only loop-control keys may be
    /// overridden: max_epochs, steps_per_epoch, checkpoint_every).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Upscale factor (2 or 4; 4 composes the 2x model twice).
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value = "rgb")]
    metric_space: String,
    /// Border pixels to ignore in the metrics.
    #[arg(long, default_value_t = 0)]
    shave: usize,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Low-resolution input image.
    #[arg(long)]
    lr: PathBuf,
    /// High-resolution reference image.
    #[arg(long)]
    hr: PathBuf,
    /// Output PNG (grayscale by default).
    #[arg(long)]
    out: PathBuf,
    /// Write a blue-to-red color map instead of grayscale.
    #[arg(long)]
    color: bool,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Saliency(args) => cmd_saliency(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn resolve_data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| {
            Error::Config(format!(
                "no data root: pass --data-root or set {DATA_ROOT_ENV}"
            ))
        })
}

fn apply_overrides(cfg: &mut TrainConfig, sets: &[String]) -> Result<()> {
    for kv in sets {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(Error::Config(format!(
                "--set expects key=value, got '{kv}'"
            )));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    Ok(())
}

fn print_config_header(cfg: &TrainConfig) {
    println!("# effective config (hash {:016x})", cfg.hash());
    for line in cfg.canonical_text().lines() {
        println!("# {line}");
    }
    if !cfg.transformer_config().is_reference_depth() {
        println!(
            "# note: depth {} is outside the reference ablation set {{3, 5, 7}}",
            cfg.depth
        );
    }
}

fn cmd_train(args: TrainArgs) -> Result<i32> {
    let data_root = resolve_data_root(args.data_root)?;

    if let Some(resume_path) = &args.resume {
        let allowed = ["max_epochs", "steps_per_epoch", "checkpoint_every"];
        for kv in &args.set {
            let key = kv.split('=').next().unwrap_or(kv);
            if !allowed.contains(&key.trim()) {
                return Err(Error::Config(format!(
                    "--resume only accepts --set for {:?}, got '{}'",
                    allowed, key
                )));
            }
        }
        if args.scale.is_some()
            || args.depth.is_some()
            || args.loss_variant.is_some()
            || args.seed.is_some()
            || args.batch_size.is_some()
            || args.epochs.is_some()
            || args.crop_lr.is_some()
            || args.clip_norm.is_some()
            || args.config.is_some()
        {
            return Err(Error::Config(
                "--resume uses the checkpoint's config; only --set max_epochs/steps_per_epoch/checkpoint_every may change".into(),
            ));
        }
        let ck = Checkpoint::load(resume_path)?;
        let mut state = TrainState::from_checkpoint(ck, None)?;
        apply_overrides(&mut state.cfg, &args.set)?;
        state.cfg.validate()?;
        print_config_header(&state.cfg);
        println!("# resuming from {} (epoch {})", resume_path.display(), state.epoch);
        return finish_training(state, &data_root, &args.out_dir);
    }

    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {}", path.display(), e))
            })?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &args.set)?;
    if let Some(v) = args.scale {
        cfg.scale = v;
    }
    if let Some(v) = args.depth {
        cfg.depth = v;
    }
    if let Some(v) = &args.loss_variant {
        cfg.loss_variant = patchsr::losses::LossVariant::parse(v)?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.crop_lr {
        cfg.crop_lr = v;
    }
    if let Some(v) = args.clip_norm {
        cfg.clip_norm = v;
    }
    cfg.validate()?;
    print_config_header(&cfg);
    let state = TrainState::new(cfg)?;
    finish_training(state, &data_root, &args.out_dir)
}

fn finish_training(state: TrainState, data_root: &Path, out_dir: &Path) -> Result<i32> {
    let corpus = load_corpus(data_root, Split::Train)?;
    println!("# corpus: {} images from {}", corpus.len(), data_root.display());
    // A distinct on-disk validation split takes priority over carving
    // one out of the training corpus.
    let val_corpus = match (split_dir(data_root, Split::Train), split_dir(data_root, Split::Valid)) {
        (train_dir, Some(valid_dir)) if train_dir.as_ref() != Some(&valid_dir) => {
            let v = load_corpus(data_root, Split::Valid)?;
            println!("# validation: {} images from {}", v.len(), valid_dir.display());
            Some(v)
        }
        _ => None,
    };
    let summary = run_training(
        state,
        &corpus,
        val_corpus.as_deref(),
        out_dir,
        |msg| println!("{msg}"),
    )?;
    println!(
        "done: {} epochs, {} steps, final val L_R {:.6}, best {:.6}, lr {:.3e}",
        summary.epochs_run, summary.steps_run, summary.final_val, summary.best_val, summary.final_lr
    );
    println!("last checkpoint: {}", summary.last_checkpoint.display());
    println!("best checkpoint: {}", summary.best_checkpoint.display());
    Ok(0)
}

/// Load the generator (and its config) from a checkpoint.
fn load_generator(path: &Path) -> Result<(TrainConfig, GeneratorParams)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.config()?;
    let crop = cfg.resolved_crop();
    let mut gen = GeneratorParams::init(crop, crop, cfg.k, cfg.transformer_config(), cfg.seed)?;
    load_named(&mut gen, &ck.gen)?;
    print_config_header(&cfg);
    Ok((cfg, gen))
}

fn cmd_infer(args: InferArgs) -> Result<i32> {
    if !matches!(args.scale, 2 | 4) {
        return Err(Error::Config(format!("scale must be 2 or 4, got {}", args.scale)));
    }
    let (cfg, gen) = load_generator(&args.checkpoint)?;
    println!("# seed {}", args.seed.unwrap_or(cfg.seed));
    let input = load_image(&args.input)?;
    let output = match args.scale {
        2 => gen.forward_2x(&input)?,
        _ => gen.forward_4x(&input)?,
    };
    save_png(&output, &args.output)?;
    println!(
        "{}x{} -> {}x{} written to {}",
        input.width(),
        input.height(),
        output.width(),
        output.height(),
        args.output.display()
    );
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<i32> {
    if !matches!(args.scale, 2 | 4) {
        return Err(Error::Config(format!("scale must be 2 or 4, got {}", args.scale)));
    }
    let space = MetricSpace::parse(&args.metric_space)?;
    let data_root = resolve_data_root(args.data_root)?;
    let (cfg, gen) = load_generator(&args.checkpoint)?;
    println!(
        "# metric_space {} shave {} seed {}",
        space.as_str(),
        args.shave,
        args.seed.unwrap_or(cfg.seed)
    );
    let corpus = load_corpus(&data_root, Split::All)?;
    let multiple = args.scale * 2 * cfg.k;
    let mut pairs = Vec::with_capacity(corpus.len());
    for item in &corpus {
        let (h, w) = (item.image.height(), item.image.width());
        let (ch, cw) = (h - h % multiple, w - w % multiple);
        if ch == 0 || cw == 0 {
            eprintln!(
                "warning: {} ({}x{}) smaller than one {}px tile, skipping",
                item.id, h, w, multiple
            );
            continue;
        }
        let hr = item.image.crop((h - ch) / 2, (w - cw) / 2, ch, cw);
        let (lr, hr) = patchsr::data::synthesize_lr(&hr, args.scale)?;
        let sr = match args.scale {
            2 => gen.forward_2x(&lr)?,
            _ => gen.forward_4x(&lr)?,
        };
        pairs.push((item.id.clone(), hr, sr));
    }
    let rows = metric_rows(&pairs, args.scale, space, args.shave)?;
    write_metrics_csv(&rows, &args.out)?;
    let mean = rows.last().expect("mean row");
    println!(
        "{} images; mean PSNR {:.4} dB, mean SSIM {:.5}; report: {}",
        rows.len() - 1,
        mean.psnr_db,
        mean.ssim,
        args.out.display()
    );
    Ok(0)
}

/// Blue (low) to red (high) color ramp for activation maps.
fn colorize(map: &Tensor) -> ImageTensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let v = map.data()[y * w + x];
        match c {
            0 => (2.0 * v - 0.5).clamp(0.0, 1.0),
            1 => (1.0 - (2.0 * v - 1.0).abs()).clamp(0.0, 1.0),
            _ => (1.5 - 2.0 * v).clamp(0.0, 1.0),
        }
    })
}

fn cmd_saliency(args: SaliencyArgs) -> Result<i32> {
    let (cfg, gen) = load_generator(&args.checkpoint)?;
    println!("# seed {}", args.seed.unwrap_or(cfg.seed));
    let lr = load_image(&args.lr)?;
    let hr = load_image(&args.hr)?;
    let scale = if hr.height() == 4 * lr.height() { 4 } else { 2 };
    let map = visual_activation_map(&gen, &lr, &hr, &LossConfig::default(), scale)?;
    let img = if args.color {
        colorize(&map)
    } else {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        ImageTensor::from_fn(h, w, 1, |y, x, _| map.data()[y * w + x])
    };
    save_png(&img, &args.out)?;
    println!(
        "{}x{} activation map written to {}",
        img.width(),
        img.height(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_selftest() -> Result<i32> {
    let mut out = std::io::stdout();
    let results = patchsr::selftest::run_all(&mut out);
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} checks passed", results.len());
    if patchsr::selftest::all_passed(&results) {
        Ok(0)
    } else {
        Err(Error::Numeric("selftest failed".into()))
    }
}
