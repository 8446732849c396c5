//! Finite-difference checks for every layer type, with respect to both the
//! layer input and every parameter tensor.
//!
//! Each case is built once with binary32-representable values. The 64-bit
//! check compares the 64-bit tape against 64-bit central differences. The
//! 32-bit check compares the 32-bit tape against central differences of the
//! same function evaluated in 64-bit.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::fusion::{FuBlock, GnConv, HorBlock};
use crate::nn::{BatchNorm2d, Conv2d, Forward, Init, LayerNorm, Mode, ParamStore};
use crate::res2::Res2Block;
use crate::skip::ReducePass;
use crate::swin::{shift_attention_mask, BlockKind, StageGeometry, SwinBlock, SwinConfig, SwinEncoder, WindowAttention};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Every case name, in run order.
pub const LAYERS: &[&str] = &[
    "conv2d",
    "batchnorm",
    "layernorm",
    "activations",
    "softmax_msa",
    "swin_block",
    "swin_encoder",
    "res2_block",
    "fu_block",
    "gnconv",
    "hor_block",
    "reduce_pass",
    "decode",
    "bce_loss",
];

const STEPS: [f64; 2] = [1e-5, 1e-6];
const FLOOR: f64 = 1e-3;
const COORDS_PER_PARAM: usize = 4;
const COORDS_PER_INPUT: usize = 12;

pub fn tolerance(layer: &str, precision: Precision) -> f64 {
    match (layer, precision) {
        ("swin_encoder", Precision::F64) => 1e-5,
        (_, Precision::F64) => 1e-6,
        (_, Precision::F32) => 1e-3,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCheck {
    pub layer: &'static str,
    pub precision: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coords: usize,
    /// Coordinates settled by a one-sided difference because the central
    /// stencil straddled a kink (ReLU, abs, max).
    pub one_sided: usize,
    /// `tensor[index]` attaining the maximum.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<LayerCheck>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

type Body = Box<dyn Fn(&mut Forward) -> Result<Var>>;

struct Case {
    store: ParamStore,
    mode: Mode,
    body: Body,
}

struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::new(Precision::F32),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init(&mut self) -> Init<'_> {
        let seed = rand::Rng::random(&mut self.rng);
        Init::new(&mut self.store, seed)
    }

    fn input(&mut self, name: &str, shape: Vec<usize>) -> crate::nn::ParamId {
        let t = Tensor::randn(shape, 1.0, Precision::F32, &mut self.rng);
        self.store.add(format!("input.{name}"), t)
    }

    fn probe(&mut self, shape: Vec<usize>) -> Tensor {
        Tensor::randn(shape, 1.0, Precision::F32, &mut self.rng)
    }

    /// Moves every parameter off its initial value so constant-initialised
    /// tensors (norm gains, biases) are exercised away from 0 and 1.
    fn finish(mut self, mode: Mode, body: Body) -> Case {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let v = self.store.get(id);
            let noise = Tensor::randn(v.shape().to_vec(), 0.2, Precision::F32, &mut self.rng);
            let moved: Vec<f64> = v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            let moved = Tensor::new(v.shape().to_vec(), moved, Precision::F32).expect("same shape");
            self.store.set(id, moved).expect("same shape");
        }
        Case {
            store: self.store,
            mode,
            body,
        }
    }
}

/// `Σ y ⊙ r` for a fixed random probe `r`.
fn project(f: &mut Forward, y: Var, probe: &Tensor) -> Result<Var> {
    let r = f.input(probe.clone());
    let p = f.tape.mul(y, r)?;
    f.tape.sum(p)
}

fn build(layer: &str, seed: u64) -> Result<Case> {
    let mut b = Builder::new(seed);
    let case = match layer {
        "conv2d" => {
            let dense = Conv2d::new(&mut b.init(), "dense", 3, 4, 3, 2, 1, true);
            let depthwise = Conv2d::new(&mut b.init(), "depthwise", 4, 4, 3, 1, 4, false);
            let x = b.input("x", vec![2, 3, 7, 7]);
            let r = b.probe(vec![2, 4, 4, 4]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let y = dense.forward(f, xv)?;
                    let y = depthwise.forward(f, y)?;
                    project(f, y, &r)
                }),
            )
        }
        "batchnorm" => {
            let bn = BatchNorm2d::new(&mut b.init(), "bn", 4);
            let x = b.input("x", vec![3, 4, 4, 4]);
            let r = b.probe(vec![3, 4, 4, 4]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let y = bn.forward(f, xv)?;
                    project(f, y, &r)
                }),
            )
        }
        "layernorm" => {
            let tokens = LayerNorm::new(&mut b.init(), "tokens", 6);
            let channels = LayerNorm::new(&mut b.init(), "channels", 6);
            let x = b.input("x", vec![2, 5, 6]);
            let m = b.input("m", vec![2, 6, 3, 3]);
            let (r1, r2) = (b.probe(vec![2, 5, 6]), b.probe(vec![2, 6, 3, 3]));
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let (xv, mv) = (f.param(x), f.param(m));
                    let y1 = tokens.forward(f, xv)?;
                    let y2 = channels.forward_channels(f, mv)?;
                    let a = project(f, y1, &r1)?;
                    let c = project(f, y2, &r2)?;
                    f.tape.add(a, c)
                }),
            )
        }
        "activations" => {
            let x = b.input("x", vec![2, 2, 4, 4]);
            let rs: Vec<Tensor> = vec![
                b.probe(vec![2, 2, 4, 4]),
                b.probe(vec![2, 2, 4, 4]),
                b.probe(vec![2, 2, 4, 4]),
                b.probe(vec![2, 2, 2, 2]),
                b.probe(vec![2, 2, 8, 8]),
            ];
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let ys = [
                        f.tape.relu(xv)?,
                        f.tape.gelu(xv)?,
                        f.tape.sigmoid(xv)?,
                        f.tape.max_pool2d(xv, 2, 2)?,
                        f.tape.upsample_bilinear(xv, 2)?,
                    ];
                    let mut total = project(f, ys[0], &rs[0])?;
                    for (y, r) in ys.iter().zip(&rs).skip(1) {
                        let p = project(f, *y, r)?;
                        total = f.tape.add(total, p)?;
                    }
                    Ok(total)
                }),
            )
        }
        "softmax_msa" => {
            let attn = WindowAttention::new(&mut b.init(), "attn", 8, 2, 2, true);
            let mask = shift_attention_mask(4, 4, 2, 1, Precision::F32)?;
            let x = b.input("x", vec![4, 4, 8]);
            let s = b.input("s", vec![3, 5]);
            let (r1, r2) = (b.probe(vec![4, 4, 8]), b.probe(vec![3, 5]));
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let (xv, sv) = (f.param(x), f.param(s));
                    let m = mask.with_precision(f.precision());
                    let y = attn.forward(f, xv, Some(&m))?;
                    let p = f.tape.softmax(sv, 1)?;
                    let a = project(f, y, &r1)?;
                    let c = project(f, p, &r2)?;
                    f.tape.add(a, c)
                }),
            )
        }
        "swin_block" => {
            let geo = StageGeometry {
                grid: 4,
                window: 2,
                shift: 1,
            };
            let regular = SwinBlock::new(&mut b.init(), "regular", 8, 2, geo, BlockKind::Regular, 2.0, true);
            let shifted = SwinBlock::new(&mut b.init(), "shifted", 8, 2, geo, BlockKind::Shifted, 2.0, true);
            let z = b.input("z", vec![1, 4, 4, 8]);
            let r = b.probe(vec![1, 4, 4, 8]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let zv = f.param(z);
                    let y = regular.forward(f, zv)?;
                    let y = shifted.forward(f, y)?;
                    project(f, y, &r)
                }),
            )
        }
        "swin_encoder" => {
            let cfg = SwinConfig {
                patch_size: 2,
                embed_dim: 4,
                window: 4,
                depths: [2, 1, 1, 1],
                heads: [1, 2, 2, 2],
                mlp_ratio: 2.0,
                rel_pos_bias: true,
            };
            let enc = SwinEncoder::new(&mut b.init(), "swin", &cfg, 16)?;
            let x = b.input("x", vec![1, 3, 16, 16]);
            let rs: Vec<Tensor> = (0..4).map(|s| b.probe(vec![1, 8 >> s, 8 >> s, 4 << s])).collect();
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let maps = enc.forward(f, xv)?;
                    let mut total = project(f, maps[0].tokens, &rs[0])?;
                    for (m, r) in maps.iter().zip(&rs).skip(1) {
                        let p = project(f, m.tokens, r)?;
                        total = f.tape.add(total, p)?;
                    }
                    Ok(total)
                }),
            )
        }
        "res2_block" => {
            let same = Res2Block::new(&mut b.init(), "same", 8, 8, 1, 4)?;
            let down = Res2Block::new(&mut b.init(), "down", 8, 16, 2, 4)?;
            let x = b.input("x", vec![2, 8, 6, 6]);
            let r = b.probe(vec![2, 16, 3, 3]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let y = same.forward(f, xv)?;
                    let y = down.forward(f, y)?;
                    project(f, y, &r)
                }),
            )
        }
        "fu_block" => {
            let fu = FuBlock::new(&mut b.init(), "fu", 4, 6, Some(3), 4);
            let s = b.input("s", vec![2, 4, 4, 4]);
            let res = b.input("r", vec![2, 6, 4, 4]);
            let prev = b.input("prev", vec![2, 3, 8, 8]);
            let r = b.probe(vec![2, 4, 4, 4]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let (sv, rv, pv) = (f.param(s), f.param(res), f.param(prev));
                    let y = fu.forward(f, sv, rv, Some(pv))?;
                    project(f, y, &r)
                }),
            )
        }
        "gnconv" => {
            let g = GnConv::new(&mut b.init(), "gnconv", 8, 3, 3)?;
            let x = b.input("x", vec![2, 8, 4, 4]);
            let r = b.probe(vec![2, 8, 4, 4]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let y = g.forward(f, xv)?;
                    project(f, y, &r)
                }),
            )
        }
        "hor_block" => {
            let h = HorBlock::new(&mut b.init(), "hor", 8, 3, 3)?;
            let x = b.input("x", vec![2, 8, 4, 4]);
            let r = b.probe(vec![2, 8, 4, 4]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let y = h.forward(f, xv)?;
                    project(f, y, &r)
                }),
            )
        }
        "reduce_pass" => {
            let channels = [3, 4, 4, 6];
            let pass = ReducePass::new(&mut b.init(), "pass", channels);
            let maps: Vec<_> = (0..4)
                .map(|k| b.input(&format!("m{}", k + 1), vec![2, channels[k], 8 >> k, 8 >> k]))
                .collect();
            let rs: Vec<Tensor> = (0..4).map(|k| b.probe(vec![2, channels[k], 8 >> k, 8 >> k])).collect();
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let mv: Vec<Var> = maps.iter().map(|&m| f.param(m)).collect();
                    let out = pass.forward(f, &mv)?;
                    let mut total = project(f, out[0], &rs[0])?;
                    for (y, r) in out.iter().zip(&rs).skip(1) {
                        let p = project(f, *y, r)?;
                        total = f.tape.add(total, p)?;
                    }
                    Ok(total)
                }),
            )
        }
        "decode" => {
            let channels = [3, 4, 4, 6];
            let dec = Decoder::new(&mut b.init(), "decoder", channels, 3);
            let maps: Vec<_> = (0..4)
                .map(|k| b.input(&format!("m{}", k + 1), vec![3, channels[k], 8 >> k, 8 >> k]))
                .collect();
            let r = b.probe(vec![3, 1, 32, 32]);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let mv: Vec<Var> = maps.iter().map(|&m| f.param(m)).collect();
                    let y = dec.forward(f, &mv)?;
                    project(f, y, &r)
                }),
            )
        }
        "bce_loss" => {
            let x = b.input("logits", vec![2, 1, 5, 5]);
            let bern = |rng: &mut ChaCha8Rng| {
                let u = Tensor::uniform(vec![2, 1, 5, 5], 0.0, 1.0, Precision::F32, rng);
                u.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
            };
            let target = bern(&mut b.rng);
            let weight = bern(&mut b.rng);
            b.finish(
                Mode::Train,
                Box::new(move |f| {
                    let xv = f.param(x);
                    let p = f.tape.sigmoid(xv)?;
                    let prec = f.precision();
                    let plain = f.tape.bce_loss(p, &target.with_precision(prec), None)?;
                    let masked = f.tape.bce_loss(p, &target.with_precision(prec), Some(&weight.with_precision(prec)))?;
                    f.tape.add(plain, masked)
                }),
            )
        }
        other => return Err(Error::invalid("gradcheck", format!("unknown layer {other:?}"))),
    };
    Ok(case)
}

fn evaluate(case: &Case, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let mut f = Forward::new_inference(&mut tape, store, case.mode);
    let out = (case.body)(&mut f)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::invalid("gradcheck", "case must produce a scalar"))
}

/// Runs one layer at one precision and seed.
pub fn check_layer(layer: &'static str, precision: Precision, seed: u64) -> Result<LayerCheck> {
    let mut case = build(layer, seed)?;
    case.store = case.store.to_precision(precision);
    let reference = case.store.to_precision(Precision::F64);

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &case.store, case.mode);
    let out = (case.body)(&mut f)?;
    let grads = f.backward(out)?;

    let scale = reference
        .ids()
        .filter_map(|id| grads.get(id))
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    let floor = (FLOOR * scale).max(1e-12);
    let base = evaluate(&case, &reference)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let tol = tolerance(layer, precision);
    let mut report = LayerCheck {
        layer,
        precision: precision.to_string(),
        seed,
        max_rel_error: 0.0,
        tolerance: tol,
        coords: 0,
        one_sided: 0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        passed: false,
    };
    let ids: Vec<_> = reference.ids().collect();
    for id in ids {
        let name = reference.name(id).to_string();
        let value = reference.get(id).clone();
        let k = if name.starts_with("input.") { COORDS_PER_INPUT } else { COORDS_PER_PARAM };
        let coords = sample(&mut rng, value.len(), k.min(value.len()));
        let analytic = grads.get(id).map(Tensor::to_vec).unwrap_or_else(|| vec![0.0; value.len()]);
        for i in coords {
            let xi = value.data()[i];
            let mut probe = reference.clone();
            let mut at = |delta: f64| -> Result<f64> {
                let mut buf = value.to_vec();
                buf[i] = xi + delta;
                probe.set(id, Tensor::new(value.shape().to_vec(), buf, Precision::F64)?)?;
                evaluate(&case, &probe)
            };
            let a = analytic[i];
            let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
            let (mut err, mut numeric) = (f64::INFINITY, 0.0);
            for step in STEPS {
                let h = step * xi.abs().max(1.0);
                let (p1, p2, m1, m2) = (at(h)?, at(2.0 * h)?, at(-h)?, at(-2.0 * h)?);
                let central = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                let right = (4.0 * p1 - 3.0 * base - p2) / (2.0 * h);
                let left = (3.0 * base - 4.0 * m1 + m2) / (2.0 * h);
                if rel(central) < err {
                    (err, numeric) = (rel(central), central);
                }
                if err <= tol {
                    break;
                }
                let side = if rel(left) < rel(right) { left } else { right };
                if rel(side) < err {
                    (err, numeric) = (rel(side), side);
                }
                if err <= tol {
                    report.one_sided += 1;
                    break;
                }
            }
            report.coords += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = format!("{name}[{i}]");
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Every layer at both precisions for each seed.
pub fn run_suite(seeds: &[u64], mut on_check: impl FnMut(&LayerCheck)) -> Result<SuiteReport> {
    let t0 = Instant::now();
    let mut checks = Vec::new();
    for &seed in seeds {
        for &layer in LAYERS {
            for precision in [Precision::F64, Precision::F32] {
                let c = check_layer(layer, precision, seed)?;
                on_check(&c);
                checks.push(c);
            }
        }
    }
    Ok(SuiteReport {
        checks,
        elapsed: t0.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_builds_and_passes_one_seed() {
        for &layer in LAYERS {
            for p in [Precision::F64, Precision::F32] {
                let c = check_layer(layer, p, 11).unwrap();
                assert!(c.passed, "{c:?}");
                assert!(c.coords > 0);
            }
        }
    }

    #[test]
    fn unknown_layer_is_rejected() {
        assert!(check_layer("warp", Precision::F64, 0).is_err());
    }
}
