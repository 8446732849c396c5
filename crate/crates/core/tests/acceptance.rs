use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use swin_res_net::checkpoint::{Checkpoint, TrainState};
use swin_res_net::config::Config;
use swin_res_net::data::{reflect_pad, unpad, Pad};
use swin_res_net::gradcheck::{run_suite, LAYERS};
use swin_res_net::metrics::{confusion, scalar_metrics};
use swin_res_net::selftest::{run_selftest, Area, Check};
use swin_res_net::synth::synth_samples;
use swin_res_net::tensor::{Precision, Tape, Tensor};
use swin_res_net::training::fit;
use swin_res_net::SwinResNet;

const DESK_CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.conf");

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn area_verdict(checks: &[Check], area: Area) -> Verdict {
    let mine: Vec<&Check> = checks.iter().filter(|c| c.area == area).collect();
    let failed: Vec<String> = mine.iter().filter(|c| !c.passed).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    if failed.is_empty() {
        let names: Vec<&str> = mine.iter().map(|c| c.name).collect();
        verdict(!mine.is_empty(), names.join(", "))
    } else {
        verdict(false, failed.join("; "))
    }
}

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let report = match run_suite(&[0, 1, 2], |_| {}) {
        Ok(r) => r,
        Err(e) => return verdict(false, e.to_string()),
    };
    let elapsed = t0.elapsed();
    let worst = |p: &str| {
        report
            .checks
            .iter()
            .filter(|c| c.precision == p)
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    };
    let failures: Vec<String> = report.failures().map(|c| format!("{} {} seed {}", c.layer, c.precision, c.seed)).collect();
    let expected = LAYERS.len() * 2 * 3;
    verdict(
        report.passed() && report.checks.len() == expected && elapsed < Duration::from_secs(120),
        format!(
            "{} checks over {} layer types, worst f64 {:.1e}, worst f32 {:.1e}, {:.1?}{}",
            report.checks.len(),
            LAYERS.len(),
            worst("f64"),
            worst("f32"),
            elapsed,
            if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(", ")) }
        ),
    )
}

struct Desk {
    model: SwinResNet,
    config: Config,
    steps: u64,
    bce: f64,
    iou: f64,
    elapsed: Duration,
}

fn desk_training() -> swin_res_net::Result<Desk> {
    let config = Config::load(Path::new(DESK_CONFIG))?;
    let samples = synth_samples(42, 8, 64)?;
    let t0 = Instant::now();
    let mut model = SwinResNet::new(config.model.clone(), config.precision, config.train.seed)?;
    let outcome = fit(&mut model, &samples, None, &config.train, |_| {})?;
    let (mut bce, mut pooled) = (0.0, swin_res_net::metrics::ConfusionCounts::default());
    for s in &samples {
        let probs = model.predict_image(&s.image)?;
        let mut tape = Tape::new();
        let p = tape.constant(probs.clone());
        let l = tape.bce_loss(p, &s.mask, None)?;
        bce += tape.value(l).data()[0] / samples.len() as f64;
        let bin: Vec<f64> = probs.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
        pooled = pooled + confusion(&bin, s.mask.data(), None)?;
    }
    Ok(Desk {
        model,
        config,
        steps: outcome.steps,
        bce,
        iou: scalar_metrics(&pooled).iou,
        elapsed: t0.elapsed(),
    })
}

fn desk_verdict(desk: &swin_res_net::Result<Desk>) -> Verdict {
    match desk {
        Ok(d) => verdict(
            d.steps == 200 && d.bce < 0.05 && d.iou > 0.90 && d.elapsed < Duration::from_secs(600),
            format!("{} steps, training BCE {:.4}, IoU {:.4}, {:.1?}", d.steps, d.bce, d.iou, d.elapsed),
        ),
        Err(e) => verdict(false, e.to_string()),
    }
}

fn run_cli(args: &[&str]) -> i32 {
    swin_res_net::cli::cli_main(std::iter::once("swin-res-net").chain(args.iter().copied()))
}

fn repeat_training() -> swin_res_net::Result<Verdict> {
    let dir = tempfile::tempdir()?;
    let root = dir.path();
    let data = root.join("data");
    let conf = root.join("short.conf");
    let mut text = std::fs::read_to_string(DESK_CONFIG)?;
    text.push_str("epochs = 12\naugment = true\nbatch = 4\n");
    std::fs::write(&conf, text)?;
    let s = |p: &Path| p.to_str().expect("utf-8 temp path").to_string();
    if run_cli(&["synth", "--seed", "42", "--count", "8", "--size", "64", "--out", &s(&data)]) != 0 {
        return Ok(verdict(false, "synth failed"));
    }
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(format!("{run}.ckpt"));
        let code = run_cli(&["train", "--config", &s(&conf), "--data", &s(&data), "--out", &s(&out), "--quiet"]);
        if code != 0 {
            return Ok(verdict(false, format!("train run {run} exited {code}")));
        }
        let hist = swin_res_net::cli::history_path(&out);
        outputs.push((std::fs::read(&out)?, std::fs::read(&hist)?));
    }
    let same_ckpt = outputs[0].0 == outputs[1].0;
    let same_hist = outputs[0].1 == outputs[1].1;
    Ok(verdict(
        same_ckpt && same_hist,
        format!(
            "24 augmented steps twice: checkpoints {} ({} bytes), histories {}",
            if same_ckpt { "identical" } else { "differ" },
            outputs[0].0.len(),
            if same_hist { "identical" } else { "differ" }
        ),
    ))
}

fn round_trip(desk: &swin_res_net::Result<Desk>) -> swin_res_net::Result<Verdict> {
    let Ok(d) = desk else {
        return Ok(verdict(false, "no trained model"));
    };
    let state = TrainState {
        step: d.steps,
        epoch: d.config.train.epochs,
        best_epoch: d.config.train.epochs - 1,
    };
    let bytes = Checkpoint::from_model(&d.model, &d.config, state).to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    let rebuilt = back.to_model()?;
    let same_params = d
        .model
        .store
        .params()
        .iter()
        .zip(rebuilt.store.params())
        .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value));
    let same_bytes = back.to_bytes() == bytes && back.state == state;

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(565);
    let image = Tensor::uniform(vec![3, 584, 565], 0.0, 1.0, Precision::F32, &mut rng);
    let pad = Pad::to_multiple(584, 565, 32);
    let padded = reflect_pad(&image, &pad)?;
    let probs = rebuilt.predict_image(&padded)?;
    let restored = unpad(&probs, &pad)?;
    let same_pred = d.model.predict_image(&padded)?.bit_eq(&probs);
    let dims_ok = padded.shape() == [3, 608, 576] && restored.shape() == [1, 584, 565];
    Ok(verdict(
        same_params && same_bytes && same_pred && dims_ok,
        format!(
            "{} tensors, {} bytes, params {}, predictions {}; 584x565 -> {}x{} -> {}x{}",
            back.tensors.len(),
            bytes.len(),
            if same_params { "bit-exact" } else { "differ" },
            if same_pred { "bit-exact" } else { "differ" },
            padded.shape()[1],
            padded.shape()[2],
            restored.shape()[1],
            restored.shape()[2]
        ),
    ))
}

fn flatten(r: swin_res_net::Result<Verdict>) -> Verdict {
    r.unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn main() -> ExitCode {
    let mut results = Vec::new();
    let mut report = |n: usize, title: &str, v: Verdict| {
        println!("criterion {n} {}: {title}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push(v.passed);
    };
    report(1, "gradient checks", gradients());
    let checks = run_selftest(0, |_| {});
    report(2, "structural properties", area_verdict(&checks, Area::Structure));
    report(3, "loss and optimizer oracles", area_verdict(&checks, Area::LossOptimizer));
    report(4, "metric oracles", area_verdict(&checks, Area::Metrics));
    let desk = desk_training();
    report(5, "desk-scale learning", desk_verdict(&desk));
    report(6, "repeatable training", flatten(repeat_training()));
    report(7, "checkpoint and padding round trips", flatten(round_trip(&desk)));
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
