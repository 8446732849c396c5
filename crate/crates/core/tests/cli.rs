use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
epochs = 2
batch = 2
lr = 0.003
input_size = 32
C = 8
swin_heads = 1,1,2,2
stem_channels = 8
res_channels = 8,8,16,16
res_depths = 1,1,1,1
head_channels = 8
";

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swin-res-net")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic dataset and a checkpoint trained on it for two epochs.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let out = bin(&["synth", "--seed", "3", "--count", "2", "--size", "64", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let conf = dir.join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let model = dir.join("m.ckpt");
    let out = bin(&["train", "--config", s(&conf), "--data", s(&data), "--out", s(&model), "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data, model)
}

#[test]
fn train_predict_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained(dir.path());
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(swin_res_net::cli::history_path(&model)).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 2);

    let odd = dir.path().join("odd.png");
    image::RgbImage::from_fn(50, 37, |x, y| image::Rgb([(x * 5) as u8, (y * 7) as u8, 90])).save(&odd).unwrap();
    let (mask, prob) = (dir.path().join("mask.png"), dir.path().join("p.srnp"));
    let out = bin(&["predict", "--model", s(&model), "--image", s(&odd), "--out-mask", s(&mask), "--out-prob", s(&prob)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = image::open(&mask).unwrap();
    assert_eq!((m.width(), m.height()), (50, 37));
    assert!(matches!(m, image::DynamicImage::ImageLuma8(_)));
    assert!(m.to_luma8().pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let bytes = std::fs::read(&prob).unwrap();
    assert!(bytes.starts_with(b"SRNP v1 37 50\n"));
    assert_eq!(bytes.len(), "SRNP v1 37 50\n".len() + 4 * 37 * 50);

    let report = dir.path().join("report.json");
    let out = bin(&["eval", "--model", s(&model), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["sensitivity", "specificity", "accuracy", "auc", "f1", "iou", "threshold", "n_images", "per_image", "degenerate_flags"] {
        assert!(r.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(r["n_images"], 2);
    assert_eq!(r["per_image"][0]["name"], "synth_000");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin(&[])), 1);
    assert_eq!(code(&bin(&["frobnicate"])), 1);
    assert_eq!(code(&bin(&["synth", "--seed", "1", "--count", "2"])), 1);
    assert_eq!(code(&bin(&["synth", "--seed", "1", "--count", "0", "--size", "64", "--out", "x"])), 1);
    assert_eq!(code(&bin(&["predict", "--model", "/nonexistent.ckpt", "--image", "a.png", "--out-mask", "b.png"])), 1);
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "windw = 4\n").unwrap();
    let out = bin(&["train", "--config", s(&conf), "--data", s(dir.path()), "--out", "x"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("windw"));
    assert_eq!(code(&bin(&["--help"])), 0);
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let img = dir.path().join("i.png");
    image::RgbImage::new(8, 8).save(&img).unwrap();
    let out = bin(&["predict", "--model", s(&junk), "--image", s(&img), "--out-mask", s(&dir.path().join("m.png"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
    std::fs::create_dir_all(dir.path().join("images")).unwrap();
    std::fs::create_dir_all(dir.path().join("masks")).unwrap();
    let conf = dir.path().join("ok.conf");
    std::fs::write(&conf, TINY).unwrap();
    let out = bin(&["train", "--config", s(&conf), "--data", s(dir.path()), "--out", "x"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn selftest_passes_and_synth_is_reproducible() {
    let out = bin(&["selftest", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&bin(&["synth", "--seed", "9", "--count", "2", "--size", "32", "--out", s(d)])), 0);
    }
    for sub in ["images", "masks", "fov"] {
        let name = format!("{sub}/synth_001.png");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn gradcheck_exits_zero_when_every_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("g.json");
    let out = bin(&["gradcheck", "--seed", "3", "--seeds", "1", "--json", s(&json)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let checks: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 2 * swin_res_net::gradcheck::LAYERS.len());
}
