//! Command-line front end. [`cli_main`] returns the process exit code:
//! 0 on success, 1 on a usage error, 2 on a runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_model, save_checkpoint, Checkpoint, TrainState};
use crate::config::Config;
use crate::data::{read_rgb, reflect_pad, scan_dataset, unpad, write_mask_png, write_prob_map, Pad};
use crate::decoder::binarize;
use crate::error::Error;
use crate::gradcheck::run_suite;
use crate::metrics::{evaluate, EvalItem};
use crate::model::SwinResNet;
use crate::selftest::run_selftest;
use crate::synth::synth_generate;
use crate::tensor::Tensor;
use crate::training::fit;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Inputs are padded to this multiple before inference.
const ALIGN: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "swin-res-net", version, about = "Retinal vessel segmentation with a two-path attention and residual network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a dataset directory and write a checkpoint.
    Train(TrainArgs),
    /// Segment one image with a trained checkpoint.
    Predict(PredictArgs),
    /// Score a checkpoint on a labelled dataset and write a JSON report.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over every layer type.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic synthetic vessel dataset.
    Synth(SynthArgs),
    /// Run every invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// `key = value` configuration file (missing keys keep their defaults).
    #[arg(long)]
    config: PathBuf,
    /// Dataset root with `images/` and `masks/` (optionally `fov/`).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the epoch history goes to `<out>.history.json`.
    #[arg(long)]
    out: PathBuf,
    /// Validation dataset used to pick the saved epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Binary PNG mask, values 0 and 255.
    #[arg(long)]
    out_mask: PathBuf,
    /// Raw probability map with an `SRNP v1 H W` header line.
    #[arg(long)]
    out_prob: Option<PathBuf>,
    /// Overrides the threshold stored in the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Score every pixel even when FOV masks are present.
    #[arg(long)]
    no_fov: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First of the consecutive seeds to check.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Also write every check as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(Error),
    /// The command ran but its checks did not all pass.
    Checks(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownConfigKeys(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Selftest(a) => selftest(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
        Err(Failure::Checks(msg)) => {
            eprintln!("{msg}");
            EXIT_FAILURE
        }
    }
}

fn check_threshold(t: Option<f64>) -> Outcome {
    match t {
        Some(t) if !(t > 0.0 && t < 1.0) => Err(Failure::Usage(format!("--threshold {t} must lie in (0, 1)"))),
        _ => Ok(()),
    }
}

fn require_file(path: &Path, flag: &str) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag} {}: no such file", path.display())))
    }
}

fn require_dir(path: &Path, flag: &str) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{flag} {}: no such directory", path.display())))
    }
}

pub fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.json");
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> Outcome {
    require_file(&a.config, "--config")?;
    require_dir(&a.data, "--data")?;
    if let Some(v) = &a.val {
        require_dir(v, "--val")?;
    }
    let config = Config::load(&a.config)?;
    let manifest = scan_dataset(&a.data)?;
    for w in manifest.warnings() {
        eprintln!("warning: {w}");
    }
    let samples = manifest.load(ALIGN)?;
    let val = match &a.val {
        Some(v) => Some(scan_dataset(v)?.load(ALIGN)?),
        None => None,
    };
    let mut model = SwinResNet::new(config.model.clone(), config.precision, config.train.seed)?;
    if !a.quiet {
        println!(
            "training on {} samples, {} parameters, {} epochs",
            samples.len(),
            model.store.num_scalars(),
            config.train.epochs
        );
    }
    let outcome = fit(&mut model, &samples, val.as_deref(), &config.train, |r| {
        if !a.quiet {
            let val = r.val_loss.map_or(String::new(), |v| format!(" val {v:.5}"));
            println!("epoch {:>4} lr {:.3e} loss {:.5}{val}", r.epoch, r.lr, r.train_loss);
        }
    })?;
    model.store = outcome.best;
    let state = TrainState {
        step: outcome.steps,
        epoch: config.train.epochs,
        best_epoch: outcome.best_epoch,
    };
    save_checkpoint(&a.out, &Checkpoint::from_model(&model, &config, state))?;
    let history = serde_json::to_string_pretty(&outcome.history).map_err(Error::from)?;
    std::fs::write(history_path(&a.out), history)?;
    if !a.quiet {
        println!("saved epoch {} to {}", outcome.best_epoch, a.out.display());
    }
    Ok(())
}

/// Probability map at the source resolution of `image`.
fn probabilities(model: &SwinResNet, image: &Tensor) -> crate::Result<Tensor> {
    let pad = Pad::to_multiple(image.shape()[1], image.shape()[2], ALIGN);
    let probs = model.predict_image(&reflect_pad(image, &pad)?)?;
    unpad(&probs, &pad)
}

fn predict(a: PredictArgs) -> Outcome {
    check_threshold(a.threshold)?;
    require_file(&a.model, "--model")?;
    require_file(&a.image, "--image")?;
    let (model, ckpt) = load_model(&a.model)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.train.threshold);
    let probs = probabilities(&model, &read_rgb(&a.image)?)?;
    let mask = binarize(&probs, threshold)?;
    write_mask_png(&a.out_mask, &mask)?;
    if let Some(p) = &a.out_prob {
        write_prob_map(p, &probs)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    check_threshold(a.threshold)?;
    require_file(&a.model, "--model")?;
    require_dir(&a.data, "--data")?;
    let (model, ckpt) = load_model(&a.model)?;
    let threshold = a.threshold.unwrap_or(ckpt.config.train.threshold);
    let manifest = scan_dataset(&a.data)?;
    for w in manifest.warnings() {
        eprintln!("warning: {w}");
    }
    let mut rows = Vec::new();
    for s in manifest.load(ALIGN)? {
        let probs = unpad(&model.predict_image(&s.image)?, &s.pad)?;
        let gt = unpad(&s.mask, &s.pad)?;
        let fov = match (&s.fov, a.no_fov) {
            (Some(f), false) => Some(unpad(f, &s.pad)?),
            _ => None,
        };
        rows.push((s.name, probs, gt, fov));
    }
    let items: Vec<EvalItem> = rows
        .iter()
        .map(|(name, p, g, f)| EvalItem {
            name,
            probs: p.data(),
            gt: g.data(),
            fov: f.as_ref().map(Tensor::data),
        })
        .collect();
    let report = evaluate(&items, threshold)?;
    std::fs::write(&a.report, report.to_json()?)?;
    let auc = report.auc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!(
        "{} images  Se {:.4}  Sp {:.4}  Acc {:.4}  AUC {auc}  F1 {:.4}  IoU {:.4}",
        report.n_images, report.sensitivity, report.specificity, report.accuracy, report.f1, report.iou
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let mut stdout = std::io::stdout();
    let report = run_suite(&seeds, |c| {
        let _ = writeln!(
            stdout,
            "{} {:<14} {} seed {:<3} max rel err {:.2e} (tol {:.0e}, {} coords)",
            if c.passed { "ok  " } else { "FAIL" },
            c.layer,
            c.precision,
            c.seed,
            c.max_rel_error,
            c.tolerance,
            c.coords
        );
    })?;
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&report.checks).map_err(Error::from)?)?;
    }
    let failed: Vec<String> = report
        .failures()
        .map(|c| format!("  {} {} seed {}: {} analytic {:.6e} numeric {:.6e}", c.layer, c.precision, c.seed, c.worst, c.analytic, c.numeric))
        .collect();
    println!("{} checks in {:.1?}", report.checks.len(), report.elapsed);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Checks(format!("{} gradient checks failed:\n{}", failed.len(), failed.join("\n"))))
    }
}

fn synth(a: SynthArgs) -> Outcome {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    if a.size == 0 || !a.size.is_multiple_of(ALIGN) {
        return Err(Failure::Usage(format!("--size {} must be a positive multiple of {ALIGN}", a.size)));
    }
    let manifest = synth_generate(a.seed, a.count, a.size, &a.out)?;
    println!("wrote {} samples of {}x{} to {}", manifest.samples.len(), a.size, a.size, a.out.display());
    Ok(())
}

fn selftest(a: SelftestArgs) -> Outcome {
    let checks = run_selftest(a.seed, |c| {
        println!("{} {:?}/{}: {}", if c.passed { "ok  " } else { "FAIL" }, c.area, c.name, c.detail);
    });
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Checks(format!("{failed} selftest checks failed")))
    }
}
