//! Command-line driver: training, inference, evaluation, attention
//! visualization, and numerical self-verification.
//!
//! Exit codes: 0 success, 1 gradient-check failure, 2 bad arguments,
//! 3 data errors, 4 NaN abort during training.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use uattn_core::attnviz::{extract_attention, record_base_image, render_attention_overlay};
use uattn_core::checkpoint::{load_checkpoint, Checkpoint};
use uattn_core::config::TrainConfig;
use uattn_core::data::{self, Dataset};
use uattn_core::losses::FrozenExtractor;
use uattn_core::metrics::{crop_feature_distance, naive_tile, ssim, CFD_CROPS, CFD_FRAC};
use uattn_core::model::{forward, ArchVariant, ForwardOptions};
use uattn_core::tensor::Tensor;
use uattn_core::train::{self, TrainError};

#[derive(Parser)]
#[command(name = "uattn", version, about = "Hierarchical hourglass attention network for 2x texture synthesis")]
struct Cli {
    /// Base seed; sets the model seed and (offset) data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Plain-text key=value config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a texture corpus.
    Train(TrainArgs),
    /// Synthesize a 2x texture from an input exemplar.
    Infer(InferArgs),
    /// Evaluate a checkpoint on a dataset (SSIM, crop feature distance).
    Eval(EvalArgs),
    /// Render an attention-map overlay for one stage.
    VizAttn(VizArgs),
    /// Finite-difference verification of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .ppm target textures.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Manifest of procedural texture specs (key=value lines).
    #[arg(long)]
    procedural: Option<PathBuf>,
    /// Output directory for checkpoints and the metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Architecture: uattn|baseline|pyramid|hourglass-simple.
    #[arg(long)]
    arch: Option<String>,
    /// Disable the adversarial loss (ablation).
    #[arg(long)]
    no_gan: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Input/target side in pixels (divisible by 32).
    #[arg(long)]
    size: Option<usize>,
    /// Resume (or fine-tune, when --size differs) from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input exemplar: either S/2 x S/2 (gets zero-padded) or S x S.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of .ppm target textures.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated metric list: ssim,cfd.
    #[arg(long, default_value = "ssim,cfd")]
    metrics: String,
    /// Also report a baseline column: naive-tile.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Stage index (1-based).
    #[arg(long)]
    stage: usize,
    /// Queried output patch as row,col (default the top-left patch).
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated op families to check (default: all).
    #[arg(long)]
    ops: Option<String>,
    /// Tolerance override for the per-op checks.
    #[arg(long)]
    tol: Option<f64>,
}

const EXIT_GRADCHECK_FAIL: u8 = 1;
const EXIT_BAD_ARGS: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NAN: u8 = 4;

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train(args) => cmd_train(&cli.seed, &cli.config, args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::VizAttn(args) => cmd_viz_attn(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, ExitCode> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| fail(EXIT_BAD_ARGS, format!("{}: {e}", p.display())))?;
            TrainConfig::parse(&text).map_err(|e| fail(EXIT_BAD_ARGS, format!("{}: {e}", p.display())))
        }
    }
}

fn cmd_train(seed: &Option<u64>, config_path: &Option<PathBuf>, args: TrainArgs) -> ExitCode {
    let mut config = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return e,
    };
    if let Some(s) = seed {
        config.seed_model = *s;
        config.seed_data = s.wrapping_add(0xDA7A);
    }
    if let Some(arch) = &args.arch {
        match ArchVariant::parse(arch) {
            Some(v) => config.variant = v,
            None => return fail(EXIT_BAD_ARGS, format!("unknown --arch {arch} (uattn|baseline|pyramid|hourglass-simple)")),
        }
    }
    if args.no_gan {
        config.use_gan = false;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(b) = args.batch {
        config.batch_size = b;
    }
    if let Some(s) = args.size {
        config.input_hw = s;
    }

    let resume = match &args.resume {
        None => None,
        Some(p) => match load_checkpoint(p) {
            Ok(c) => Some(c),
            Err(e) => return fail(EXIT_DATA, e),
        },
    };

    let dataset = match (&args.data, &args.procedural) {
        (Some(dir), None) => data::load_dir(dir, config.input_hw),
        (None, Some(manifest)) => std::fs::read_to_string(manifest)
            .map_err(|e| data::DataError::Io { path: manifest.display().to_string(), source: e })
            .and_then(|text| data::parse_manifest(&text))
            .and_then(|specs| data::generate_corpus(&specs, config.input_hw)),
        _ => return fail(EXIT_BAD_ARGS, "exactly one of --data or --procedural is required"),
    };
    let dataset = match dataset {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };

    // A resume at a different size is the fine-tuning path.
    let result = match resume {
        Some(ckpt) if ckpt.config.input_hw != config.input_hw => {
            train::fine_tune(ckpt, config.input_hw, config.epochs, &dataset, &args.out)
        }
        other => train::train(&config, &dataset, &args.out, other),
    };
    match result {
        Ok(ckpt) => {
            println!("trained to step {} ({} epochs); checkpoints in {}", ckpt.step, config.epochs, args.out.display());
            ExitCode::SUCCESS
        }
        Err(e @ TrainError::NanAbort { .. }) => fail(EXIT_NAN, e),
        Err(TrainError::Data(e)) => fail(EXIT_DATA, e),
        Err(e) => fail(EXIT_DATA, e),
    }
}

/// Accepts a [3,S,S] image as-is, or zero-pads a [3,S/2,S/2] exemplar into
/// the center of an S x S frame.
fn prepare_input(img: Tensor<f32>, model_hw: usize) -> Result<Tensor<f32>, String> {
    let [c, h, w] = *img.shape() else {
        return Err(format!("expected a [3,H,W] image, got {:?}", img.shape()));
    };
    if c != 3 || h != w {
        return Err(format!("expected a square RGB image, got {:?}", img.shape()));
    }
    if h == model_hw {
        return Ok(img);
    }
    if h == model_hw / 2 {
        let s = model_hw;
        let lo = s / 4;
        let mut padded = Tensor::zeros(&[3, s, s]);
        for ci in 0..3 {
            for y in 0..h {
                let dst = ci * s * s + (lo + y) * s + lo;
                let src = ci * h * w + y * w;
                padded.data_mut()[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
            }
        }
        return Ok(padded);
    }
    Err(format!("input side {h} must be {} or {} for this checkpoint", model_hw / 2, model_hw))
}

fn load_ckpt_or_exit(path: &Path) -> Result<Checkpoint, ExitCode> {
    load_checkpoint(path).map_err(|e| fail(EXIT_DATA, e))
}

fn cmd_infer(args: InferArgs) -> ExitCode {
    let ckpt = match load_ckpt_or_exit(&args.ckpt) {
        Ok(c) => c,
        Err(e) => return e,
    };
    let img = match data::load_image(&args.input) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let input = match prepare_input(img, ckpt.config.input_hw) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_BAD_ARGS, e),
    };
    let rec = match forward(&input, &ckpt.gen, ForwardOptions::default()) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_DATA, e),
    };
    match data::save_image(&rec.output, &args.output) {
        Ok(()) => {
            println!("wrote {}", args.output.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_DATA, e),
    }
}

fn cmd_eval(args: EvalArgs) -> ExitCode {
    let mut want_ssim = false;
    let mut want_cfd = false;
    for m in args.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match m {
            "ssim" => want_ssim = true,
            "cfd" => want_cfd = true,
            other => return fail(EXIT_BAD_ARGS, format!("unknown metric {other} (ssim|cfd)")),
        }
    }
    let with_baseline = match args.baseline.as_deref() {
        None => false,
        Some("naive-tile") => true,
        Some(other) => return fail(EXIT_BAD_ARGS, format!("unknown baseline {other} (naive-tile)")),
    };

    let ckpt = match load_ckpt_or_exit(&args.ckpt) {
        Ok(c) => c,
        Err(e) => return e,
    };
    let dataset: Dataset = match data::load_dir(&args.data, ckpt.config.input_hw) {
        Ok(d) => d,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let fx = FrozenExtractor::<f32>::new(ckpt.config.seed_extractor);

    let mut sums: std::collections::BTreeMap<&str, f64> = Default::default();
    for idx in 0..dataset.len() {
        let pair = match dataset.pair(idx) {
            Ok(p) => p,
            Err(e) => return fail(EXIT_DATA, e),
        };
        let out = match forward(&pair.input, &ckpt.gen, ForwardOptions::default()) {
            Ok(r) => r.output,
            Err(e) => return fail(EXIT_DATA, e),
        };
        println!("image: {}", dataset.names[idx]);
        let mut emit = |key: &'static str, value: f64| {
            println!("{key}: {value:.6}");
            *sums.entry(key).or_insert(0.0) += value;
        };
        if want_ssim {
            match ssim(&out, &pair.target) {
                Ok(v) => emit("ssim", v),
                Err(e) => return fail(EXIT_DATA, e),
            }
        }
        if want_cfd {
            match crop_feature_distance(&fx, &out, &pair.target, CFD_CROPS, CFD_FRAC, 0) {
                Ok(v) => emit("cfd", v),
                Err(e) => return fail(EXIT_DATA, e),
            }
        }
        if with_baseline {
            let tiled = naive_tile(&pair);
            if want_ssim {
                match ssim(&tiled, &pair.target) {
                    Ok(v) => emit("naive_ssim", v),
                    Err(e) => return fail(EXIT_DATA, e),
                }
            }
            if want_cfd {
                match crop_feature_distance(&fx, &tiled, &pair.target, CFD_CROPS, CFD_FRAC, 0) {
                    Ok(v) => emit("naive_cfd", v),
                    Err(e) => return fail(EXIT_DATA, e),
                }
            }
        }
        println!();
    }
    println!("mean over {} images", dataset.len());
    for (key, sum) in &sums {
        println!("mean_{key}: {:.6}", sum / dataset.len() as f64);
    }
    ExitCode::SUCCESS
}

fn cmd_viz_attn(args: VizArgs) -> ExitCode {
    let patch = match &args.patch {
        None => (0, 0),
        Some(text) => {
            let parts: Vec<&str> = text.split(',').collect();
            let parsed = if parts.len() == 2 {
                parts[0].trim().parse::<usize>().ok().zip(parts[1].trim().parse::<usize>().ok())
            } else {
                None
            };
            match parsed {
                Some(rc) => rc,
                None => return fail(EXIT_BAD_ARGS, format!("--patch expects row,col; got {text}")),
            }
        }
    };
    let ckpt = match load_ckpt_or_exit(&args.ckpt) {
        Ok(c) => c,
        Err(e) => return e,
    };
    let n_stages = ckpt.config.variant.block_count();
    if args.stage == 0 || args.stage > n_stages {
        return fail(EXIT_BAD_ARGS, format!("stage {} out of range 1..={n_stages}", args.stage));
    }
    let img = match data::load_image(&args.input) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_DATA, e),
    };
    let input = match prepare_input(img, ckpt.config.input_hw) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_BAD_ARGS, e),
    };
    let record = match extract_attention(&ckpt.gen, &input, args.stage, patch) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_BAD_ARGS, e),
    };
    let base = record_base_image(&record);
    let overlay = match render_attention_overlay(&record, &base) {
        Ok(o) => o,
        Err(e) => return fail(EXIT_DATA, e),
    };
    match data::save_image(&overlay, &args.out) {
        Ok(()) => {
            println!("wrote {} (stage {}, patch {},{})", args.out.display(), args.stage, patch.0, patch.1);
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_DATA, e),
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> ExitCode {
    let filter: Option<Vec<String>> =
        args.ops.map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect());
    let known: Vec<&str> = uattn_core::gradcheck::registry().iter().map(|c| c.name).collect();
    if let Some(names) = &filter {
        for n in names {
            if n != "full_network" && !known.contains(&n.as_str()) {
                return fail(EXIT_BAD_ARGS, format!("unknown op {n} (available: {}, full_network)", known.join(", ")));
            }
        }
    }
    let mut all_ok = true;
    let run_ops = filter.as_ref().map(|f| f.iter().any(|n| n != "full_network")).unwrap_or(true);
    if run_ops {
        let op_filter: Option<Vec<String>> =
            filter.as_ref().map(|f| f.iter().filter(|n| *n != "full_network").cloned().collect());
        all_ok &= uattn_core::gradcheck::run_registry(op_filter.as_deref(), args.tol);
    }
    let run_full = filter.as_ref().map(|f| f.iter().any(|n| n == "full_network")).unwrap_or(true);
    if run_full {
        // Stratified sample sized for the verification budget.
        let worst = uattn_core::gradcheck::full_network_check(0.0025);
        let tol = args.tol.unwrap_or(uattn_core::gradcheck::FULL_NETWORK_TOL);
        let ok = worst < tol;
        all_ok &= ok;
        println!(
            "{:<22} worst_rel_err {:.3e}  tol {:.1e}  {}",
            "full_network",
            worst,
            tol,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_GRADCHECK_FAIL)
    }
}
