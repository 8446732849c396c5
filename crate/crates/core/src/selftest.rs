//! Randomised invariant suites, runnable outside the test harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::Config;
use crate::data::{reflect_pad, unpad, Pad};
use crate::error::Result;
use crate::metrics::{auc, auc_trapezoid, confusion, scalar_metrics, ConfusionCounts};
use crate::model::{ModelConfig, SwinResNet};
use crate::nn::{zero_params, Forward, Init, Mode, ParamStore};
use crate::skip::{abs_diff_upsampled, ReducePass};
use crate::swin::{cyclic_shift, window_partition, window_reverse, BlockKind, PatchMerging, StageGeometry, SwinBlock, TokenMap};
use crate::tensor::{Precision, Tape, Tensor};
use crate::training::{bce_loss, cosine_lr, Adam};

/// Which acceptance area a check belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Area {
    Structure,
    LossOptimizer,
    Metrics,
    RoundTrip,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub area: Area,
    pub passed: bool,
    pub detail: String,
}

const TRIALS: usize = 12;

type Outcome = Result<std::result::Result<String, String>>;

fn ok(detail: impl Into<String>) -> Outcome {
    Ok(Ok(detail.into()))
}

fn fail(detail: impl Into<String>) -> Outcome {
    Ok(Err(detail.into()))
}

fn window_round_trip(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let m = 2 * rng.random_range(1..=3);
        let (n, gh, gw, c) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=4));
        let (h, w) = (gh * m, gw * m);
        let x = Tensor::randn(vec![n, h, w, c], 1.0, Precision::F64, rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let win = window_partition(&mut tape, xv, m)?;
        if tape.shape(win) != [n * gh * gw, m * m, c] {
            return fail(format!("partition shape {:?}", tape.shape(win)));
        }
        let back = window_reverse(&mut tape, win, m, n, h, w)?;
        if !tape.value(back).bit_eq(&x) {
            return fail(format!("reverse(partition(x)) != x for {n}x{h}x{w}x{c}, window {m}"));
        }
    }
    ok(format!("{TRIALS} random grids"))
}

fn shift_inverse(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let (h, w) = (rng.random_range(2..=9), rng.random_range(2..=9));
        let s = rng.random_range(1..h.min(w)) as isize;
        let x = Tensor::randn(vec![1, h, w, 2], 1.0, Precision::F64, rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = cyclic_shift(&mut tape, xv, s)?;
        let z = cyclic_shift(&mut tape, y, -s)?;
        if !tape.value(z).bit_eq(&x) {
            return fail(format!("shift {s} on {h}x{w} is not inverted"));
        }
    }
    ok(format!("{TRIALS} random shifts"))
}

fn patch_merge_fourfold(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let (h, w, c) = (2 * rng.random_range(1..=4), 2 * rng.random_range(1..=4), rng.random_range(1..=6));
        let mut store = ParamStore::new(Precision::F64);
        let merge = PatchMerging::new(&mut Init::new(&mut store, rng.random()), "merge", c);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let x = f.input(Tensor::randn(vec![1, h, w, c], 1.0, Precision::F64, rng));
        let out = merge.forward(&mut f, TokenMap { tokens: x, stage: 0 })?;
        let s = f.tape.shape(out.tokens);
        if s[1] * s[2] * 4 != h * w || s[3] != 2 * c {
            return fail(format!("{h}x{w}x{c} merged to {s:?}"));
        }
    }
    ok("tokens / 4, channels x 2")
}

fn default_model_structure(_: &mut ChaCha8Rng) -> Outcome {
    let model = SwinResNet::new(ModelConfig::default(), Precision::F32, 0)?;
    let size = model.config.input_size;
    let mut tape = Tape::new();
    let mut f = Forward::new_inference(&mut tape, &model.store, Mode::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = f.input(Tensor::uniform(vec![1, 3, size, size], 0.0, 1.0, Precision::F32, &mut rng));
    let acts = model.forward(&mut f, x)?;
    for k in 0..4 {
        let side = size >> (k + 2);
        let (sw, rs, fu, sk) = (
            f.tape.shape(acts.swin[k]).to_vec(),
            f.tape.shape(acts.res[k]).to_vec(),
            f.tape.shape(acts.fused[k]).to_vec(),
            f.tape.shape(acts.skips[k]).to_vec(),
        );
        if sw[1..3] != [side, side] || rs[2..] != [side, side] || fu != rs || sk != fu {
            return fail(format!("level {}: swin {sw:?} res {rs:?} fused {fu:?} skip {sk:?}", k + 1));
        }
    }
    if f.tape.shape(acts.probs) != [1, 1, size, size] {
        return fail(format!("output {:?}", f.tape.shape(acts.probs)));
    }
    let t = f.trace.clone();
    if t.res2_blocks != 21 || model.config.res.total_blocks() != 21 {
        return fail(format!("{} res2 blocks", t.res2_blocks));
    }
    if t.hor_blocks != 1 {
        return fail(format!("{} hor blocks", t.hor_blocks));
    }
    ok(format!(
        "levels at H/4..H/32; {} res2 blocks; {} hor block; {} swin blocks ({} shifted)",
        t.res2_blocks, t.hor_blocks, t.swin_blocks, t.shifted_blocks
    ))
}

fn random_block(rng: &mut ChaCha8Rng, store: &mut ParamStore, kind: BlockKind, name: &str) -> SwinBlock {
    let geo = StageGeometry {
        grid: 4,
        window: 2,
        shift: 1,
    };
    SwinBlock::new(&mut Init::new(store, rng.random()), name, 6, 2, geo, kind, 2.0, true)
}

fn swin_zero_branch_identity(rng: &mut ChaCha8Rng) -> Outcome {
    for kind in [BlockKind::Regular, BlockKind::Shifted] {
        let mut store = ParamStore::new(Precision::F64);
        let block = random_block(rng, &mut store, kind, "b");
        zero_params(&mut store, "b.attn.proj");
        zero_params(&mut store, "b.mlp.fc2");
        let z = Tensor::randn(vec![2, 4, 4, 6], 1.0, Precision::F64, rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let zv = f.input(z.clone());
        let y = block.forward(&mut f, zv)?;
        if !f.tape.value(y).bit_eq(&z) {
            return fail(format!("{kind:?} block with zero branches changed its input"));
        }
    }
    ok("regular and shifted")
}

fn swin_stepwise(rng: &mut ChaCha8Rng) -> Outcome {
    let mut store = ParamStore::new(Precision::F64);
    let regular = random_block(rng, &mut store, BlockKind::Regular, "r");
    let shifted = random_block(rng, &mut store, BlockKind::Shifted, "s");
    let z = Tensor::randn(vec![1, 4, 4, 6], 1.0, Precision::F64, rng);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let z0 = f.input(z);
    let fused = regular.forward(&mut f, z0)?;
    let fused = shifted.forward(&mut f, fused)?;

    let n = regular.norm1.forward(&mut f, z0)?;
    let a = regular.attention_branch(&mut f, n)?;
    let z_hat = f.tape.add(a, z0)?;
    let n = regular.norm2.forward(&mut f, z_hat)?;
    let m = regular.mlp.forward(&mut f, n)?;
    let z1 = f.tape.add(m, z_hat)?;
    let n = shifted.norm1.forward(&mut f, z1)?;
    let a = shifted.attention_branch(&mut f, n)?;
    let z1_hat = f.tape.add(a, z1)?;
    let n = shifted.norm2.forward(&mut f, z1_hat)?;
    let m = shifted.mlp.forward(&mut f, n)?;
    let z2 = f.tape.add(m, z1_hat)?;
    if !f.tape.value(z2).bit_eq(f.tape.value(fused)) {
        return fail("stepwise composition differs from the fused blocks");
    }
    ok("four residual lines, bit-exact")
}

fn identical_operands_vanish(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let (c, h) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let coarse = Tensor::randn(vec![1, c, h, h], 1.0, Precision::F64, rng);
        let mut tape = Tape::new();
        let cv = tape.constant(coarse);
        let fine = tape.upsample_bilinear(cv, 2)?;
        let d = abs_diff_upsampled(&mut tape, fine, cv)?;
        if tape.value(d).data().iter().any(|&v| v != 0.0) {
            return fail("abs(up(c) - up(c)) is not zero");
        }
    }
    let channels = [2, 3, 3, 4];
    let mut store = ParamStore::new(Precision::F64);
    let pass = ReducePass::new(&mut Init::new(&mut store, rng.random()), "p", channels);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let maps: Vec<_> = (0..4)
        .map(|k| f.input(Tensor::randn(vec![2, channels[k], 8 >> k, 8 >> k], 1.0, Precision::F64, rng)))
        .collect();
    let out = pass.forward(&mut f, &maps)?;
    if out.iter().any(|&o| f.tape.value(o).data().iter().any(|&v| v < 0.0)) {
        return fail("negative skip value");
    }
    ok("identical operands give 0; outputs non-negative")
}

fn bce_hand_values(_: &mut ChaCha8Rng) -> Outcome {
    let cases = [
        (0.5, 1.0, std::f64::consts::LN_2),
        (0.5, 0.0, std::f64::consts::LN_2),
        (0.9, 1.0, -(0.9f64).ln()),
        (0.2, 0.0, -(0.8f64).ln()),
    ];
    for (p, y, expect) in cases {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::full(vec![1, 1, 2, 2], p, Precision::F64));
        let l = bce_loss(&mut tape, pv, &Tensor::full(vec![1, 1, 2, 2], y, Precision::F64), None)?;
        let got = tape.value(l).data()[0];
        if (got - expect).abs() > 1e-6 {
            return fail(format!("bce({p}, {y}) = {got}, expected {expect}"));
        }
    }
    ok("ln 2 and hand-evaluated cases")
}

fn adam_first_step(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let mut store = ParamStore::new(Precision::F64);
        let theta = rng.random_range(-2.0..2.0);
        let scale = rng.random_range(-3.0..3.0);
        let id = store.add("w", Tensor::scalar(theta, Precision::F64));
        let mut adam = Adam::new(&store);
        let (lr, wd) = (1e-4, 1e-5);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let w = f.param(id);
        let y = f.tape.scale(w, scale)?;
        let g = f.backward(y)?;
        adam.update(&mut store, &g, lr, wd)?;
        let gi = scale + wd * theta;
        let expect = -lr * gi / (gi.abs() + adam.eps);
        let got = store.get(id).data()[0] - theta;
        if (got - expect).abs() > 1e-9 {
            return fail(format!("step {got}, closed form {expect}"));
        }
    }
    ok("|step| = lr·|g|/(|g|+eps)")
}

fn cosine_endpoints(_: &mut ChaCha8Rng) -> Outcome {
    let (start, end) = (cosine_lr(0, 40, 1e-4, 0.0)?, cosine_lr(40, 40, 1e-4, 0.0)?);
    if start != 1e-4 || end != 0.0 {
        return fail(format!("start {start}, end {end}"));
    }
    ok("1e-4 at epoch 0, 0 at epoch 40")
}

fn confusion_matches_loop(rng: &mut ChaCha8Rng) -> Outcome {
    for _ in 0..TRIALS {
        let n = rng.random_range(1..200);
        let bits = |rng: &mut ChaCha8Rng, p: f64| (0..n).map(|_| rng.random_bool(p) as u8 as f64).collect::<Vec<_>>();
        let (pred, gt, fov) = (bits(rng, 0.3), bits(rng, 0.2), bits(rng, 0.8));
        let mut r = ConfusionCounts::default();
        for i in 0..n {
            if fov[i] == 0.0 {
                continue;
            }
            match (pred[i] == 1.0, gt[i] == 1.0) {
                (true, true) => r.tp += 1,
                (true, false) => r.fp += 1,
                (false, false) => r.tn += 1,
                (false, true) => r.fn_ += 1,
            }
        }
        let c = confusion(&pred, &gt, Some(&fov))?;
        if c != r {
            return fail(format!("{c:?} vs loop {r:?}"));
        }
        let s = scalar_metrics(&c);
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let checks = [
            (s.sensitivity, tp / (tp + fn_)),
            (s.specificity, tn / (tn + fp)),
            (s.accuracy, (tp + tn) / (tp + tn + fp + fn_)),
            (s.f1, 2.0 * tp / (2.0 * tp + fp + fn_)),
            (s.iou, tp / (tp + fp + fn_)),
        ];
        for (got, want) in checks {
            if want.is_finite() && got != want {
                return fail(format!("scalar metric {got} vs {want}"));
            }
        }
    }
    ok("pixel-loop oracle, exact")
}

fn auc_oracles(rng: &mut ChaCha8Rng) -> Outcome {
    let fixture = auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0], None)?;
    if fixture != Some(0.75) {
        return fail(format!("fixture gave {fixture:?}"));
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..300);
        let levels = rng.random_range(2..40);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut gt: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        gt[0] = 1.0;
        gt[1] = 0.0;
        let (a, b) = (auc(&probs, &gt, None)?, auc_trapezoid(&probs, &gt, None)?);
        match (a, b) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            _ => return fail("undefined AUC on a two-class fixture"),
        }
    }
    if worst >= 1e-12 {
        return fail(format!("rank vs trapezoid differ by {worst:e}"));
    }
    ok(format!("fixture 0.75; 50 tied fixtures within {worst:.1e}"))
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> Outcome {
    let cfg = Config {
        model: ModelConfig::tiny(32),
        ..Config::default()
    };
    let mut model = SwinResNet::new(cfg.model.clone(), Precision::F32, rng.random())?;
    let x = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, Precision::F32, rng);
    let p = model.predict(&x, Mode::Train)?;
    model.store.apply_stat_updates(&p.updates);
    let state = TrainState {
        step: rng.random_range(0..1000),
        epoch: 3,
        best_epoch: 1,
    };
    let ck = Checkpoint::from_model(&model, &cfg, state);
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    if back.to_bytes() != bytes || back.config != ck.config || back.state != state {
        return fail("save -> load -> save is not byte-identical");
    }
    if ck.tensors.iter().zip(&back.tensors).any(|((n1, a), (n2, b))| n1 != n2 || !a.bit_eq(b)) {
        return fail("tensor mismatch after reload");
    }
    let rebuilt = back.to_model()?;
    let (a, b) = (model.predict(&x, Mode::Eval)?.probs, rebuilt.predict(&x, Mode::Eval)?.probs);
    if !a.bit_eq(&b) {
        return fail("reloaded model predicts differently");
    }
    ok(format!("{} tensors, {} bytes", ck.tensors.len(), bytes.len()))
}

fn drive_pad_predict_unpad(rng: &mut ChaCha8Rng) -> Outcome {
    let (h, w) = (584, 565);
    let pad = Pad::to_multiple(h, w, 32);
    if (pad.padded_height(), pad.padded_width()) != (608, 576) {
        return fail(format!("padded to {}x{}", pad.padded_height(), pad.padded_width()));
    }
    let image = Tensor::uniform(vec![3, h, w], 0.0, 1.0, Precision::F32, rng);
    let padded = reflect_pad(&image, &pad)?;
    if !unpad(&padded, &pad)?.bit_eq(&image) {
        return fail("unpad(pad(x)) != x");
    }
    let mut model = SwinResNet::new(ModelConfig::tiny(64), Precision::F32, rng.random())?;
    let warm = Tensor::uniform(vec![2, 3, 64, 64], 0.0, 1.0, Precision::F32, rng);
    let p = model.predict(&warm, Mode::Train)?;
    model.store.apply_stat_updates(&p.updates);
    let probs = model.predict_image(&padded)?;
    let out = unpad(&probs, &pad)?;
    if out.shape() != [1, h, w] {
        return fail(format!("prediction unpadded to {:?}", out.shape()));
    }
    ok(format!("{w}x{h} -> {}x{} -> {w}x{h}", pad.padded_width(), pad.padded_height()))
}

type CheckFn = fn(&mut ChaCha8Rng) -> Outcome;

pub const CHECKS: &[(&str, Area, CheckFn)] = &[
    ("window_partition_round_trip", Area::Structure, window_round_trip),
    ("cyclic_shift_inverse", Area::Structure, shift_inverse),
    ("patch_merge_fourfold", Area::Structure, patch_merge_fourfold),
    ("stage_resolutions_depth_hor_block", Area::Structure, default_model_structure),
    ("swin_block_zero_branch_identity", Area::Structure, swin_zero_branch_identity),
    ("swin_block_stepwise", Area::Structure, swin_stepwise),
    ("reduce_identical_operands_zero", Area::Structure, identical_operands_vanish),
    ("bce_hand_values", Area::LossOptimizer, bce_hand_values),
    ("adam_first_step", Area::LossOptimizer, adam_first_step),
    ("cosine_endpoints", Area::LossOptimizer, cosine_endpoints),
    ("confusion_pixel_loop", Area::Metrics, confusion_matches_loop),
    ("auc_rank_vs_trapezoid", Area::Metrics, auc_oracles),
    ("checkpoint_round_trip", Area::RoundTrip, checkpoint_round_trip),
    ("drive_pad_predict_unpad", Area::RoundTrip, drive_pad_predict_unpad),
];

/// Runs every check with a per-check generator derived from `seed`. An
/// error inside a check is reported as a failure of that check.
pub fn run_selftest(seed: u64, mut on_check: impl FnMut(&Check)) -> Vec<Check> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(name, area, run))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let (passed, detail) = match run(&mut rng) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            let c = Check {
                name,
                area,
                passed,
                detail,
            };
            on_check(&c);
            c
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for c in run_selftest(5, |_| {}) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
