//! The optimisation side of the model, from the loss up to the epoch loop.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{crop, reflect_pad, Pad, Sample};
use crate::error::{Error, Result};
use crate::model::{SwinResNet, GROUPS};
use crate::nn::{Forward, Mode, ParamGrads, ParamStore};
use crate::tensor::{Precision, Tape, Tensor, Var};

/// Mean binary cross-entropy of `pred` against binary `target`, optionally
/// restricted to pixels where `weight` is non-zero.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: &Tensor, weight: Option<&Tensor>) -> Result<Var> {
    tape.bce_loss(pred, target, weight)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }

    /// One bias-corrected Adam step with `weight_decay · θ` added to each
    /// gradient. Parameters without a gradient are treated as having zero
    /// gradient. Any non-finite gradient aborts before anything is changed.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64, weight_decay: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Training(format!("gradient shape mismatch for {}", store.name(id))));
                }
                if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in {} at element {bad}; step {} aborted",
                        store.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let p = store.precision();
        for (k, &id) in ids.iter().enumerate() {
            let theta = store.get(id);
            let g = grads.get(id).map(Tensor::data);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let mut next = Vec::with_capacity(theta.len());
            for (i, &x) in theta.data().iter().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]) + weight_decay * x;
                m[i] = p.round(self.beta1 * m[i] + (1.0 - self.beta1) * gi);
                v[i] = p.round(self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi);
                let (mh, vh) = (m[i] / c1, v[i] / c2);
                next.push(x - lr * mh / (vh.sqrt() + self.eps));
            }
            let shape = theta.shape().to_vec();
            store.set(id, Tensor::new(shape, next, p)?)?;
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at epoch 0 to `eta_min` at `total`.
pub fn cosine_lr(epoch: usize, total: usize, base_lr: f64, eta_min: f64) -> Result<f64> {
    if total == 0 || epoch > total {
        return Err(Error::invalid("cosine_lr", format!("epoch {epoch} outside 0..={total}")));
    }
    Ok(eta_min + (base_lr - eta_min) * (1.0 + (PI * epoch as f64 / total as f64).cos()) / 2.0)
}

/// The geometric transform applied to one training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    /// Degrees in `[0, 360)`.
    pub angle: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        hflip: false,
        vflip: false,
        angle: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle: rng.random_range(0.0..360.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Nearest,
}

/// Mirrors a continuous coordinate into `[-0.5, n - 0.5]`.
fn reflect_coord(x: f64, n: usize) -> f64 {
    let period = 2.0 * n as f64;
    let y = (x + 0.5).rem_euclid(period);
    let y = if y > n as f64 { period - y } else { y };
    (y - 0.5).clamp(0.0, n as f64 - 1.0)
}

/// Applies `draw` to a `[C, H, W]` tensor: flips, then rotation about the
/// centre with reflection at the borders.
pub fn apply_augment(t: &Tensor, draw: &AugmentDraw, resample: Resample) -> Result<Tensor> {
    let s = t.shape();
    let [c, h, w] = <[usize; 3]>::try_from(s).map_err(|_| Error::shape("augment", format!("expected [C, H, W], got {s:?}")))?;
    let src = t.data();
    let mut flipped = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if draw.vflip { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if draw.hflip { w - 1 - x } else { x };
                flipped[(ch * h + y) * w + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    if draw.angle == 0.0 {
        return Tensor::new(vec![c, h, w], flipped, t.precision());
    }
    let (sin, cos) = draw.angle.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = reflect_coord(cos * dx + sin * dy + cx, w);
            let sy = reflect_coord(-sin * dx + cos * dy + cy, h);
            for ch in 0..c {
                let plane = &flipped[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + y) * w + x] = match resample {
                    Resample::Nearest => plane[sy.round() as usize * w + sx.round() as usize],
                    Resample::Bilinear => {
                        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                        let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                        top * (1.0 - fy) + bot * fy
                    }
                };
            }
        }
    }
    Tensor::new(vec![c, h, w], out, t.precision())
}

/// Draws one transform and applies it to image and mask alike.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, mask: &Tensor, rng: &mut R) -> Result<(Tensor, Tensor)> {
    if image.shape()[1..] != mask.shape()[1..] {
        return Err(Error::shape("augment", format!("image {:?} vs mask {:?}", image.shape(), mask.shape())));
    }
    let d = AugmentDraw::sample(rng);
    Ok((
        apply_augment(image, &d, Resample::Bilinear)?,
        apply_augment(mask, &d, Resample::Nearest)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    pub eta_min: f64,
    /// Restrict the loss to field-of-view pixels when masks are available.
    pub fov_loss: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            epochs: 40,
            batch_size: 4,
            seed: 42,
            augment: true,
            eta_min: 0.0,
            fov_loss: false,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eta_min >= 0.0) || self.eta_min > self.lr {
            return Err(Error::Config("need lr > 0, wd >= 0 and 0 <= eta_min <= lr".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub step_losses: Vec<f64>,
    pub val_loss: Option<f64>,
    /// Gradient L2 norm per module group at the epoch's last step.
    pub grad_norms: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    /// Epoch whose parameters `best` holds, chosen by validation loss (or
    /// training loss without a validation set).
    pub best_epoch: usize,
    pub best: ParamStore,
}

fn per_sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Random `size×size` crop of an augmented sample; smaller samples are
/// reflection-padded first.
fn training_view(s: &Sample, cfg: &TrainConfig, size: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let (mut img, mut mask, mut fov) = (s.image.clone(), s.mask.clone(), s.fov.clone());
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < size || w < size {
        let pad = Pad::to_size(h, w, size, size);
        img = reflect_pad(&img, &pad)?;
        mask = reflect_pad(&mask, &pad)?;
        fov = fov.map(|f| reflect_pad(&f, &pad)).transpose()?;
    }
    if cfg.augment {
        let d = AugmentDraw::sample(rng);
        img = apply_augment(&img, &d, Resample::Bilinear)?;
        mask = apply_augment(&mask, &d, Resample::Nearest)?;
        fov = fov.map(|f| apply_augment(&f, &d, Resample::Nearest)).transpose()?;
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let top = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let left = if w > size { rng.random_range(0..=w - size) } else { 0 };
    Ok((
        crop(&img, top, left, size, size)?,
        crop(&mask, top, left, size, size)?,
        fov.map(|f| crop(&f, top, left, size, size)).transpose()?,
    ))
}

/// Stacks `[C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack(items: &[Tensor], precision: Precision) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data, precision)
}

pub struct StepResult {
    pub loss: f64,
    pub grads: ParamGrads,
}

/// Loss and gradients for one batch; batch-norm running statistics in
/// `model` are updated.
pub fn train_step(model: &mut SwinResNet, images: &Tensor, masks: &Tensor, weight: Option<&Tensor>) -> Result<StepResult> {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store, Mode::Train);
    let x = f.input(images.clone());
    let acts = model.forward(&mut f, x)?;
    let loss = bce_loss(f.tape, acts.probs, &masks.with_precision(model.precision()), weight)?;
    let value = f.tape.value(loss).data()[0];
    let grads = f.backward(loss)?;
    let (updates, _) = f.into_updates();
    model.store.apply_stat_updates(&updates);
    Ok(StepResult { loss: value, grads })
}

/// Mean eval-mode loss over whole samples, evaluated by tiles.
pub fn evaluation_loss(model: &SwinResNet, samples: &[Sample], fov: bool) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0.0);
    for s in samples {
        let probs = model.predict_image(&s.image)?;
        let mut tape = Tape::new();
        let p = tape.constant(probs);
        let w = if fov { s.fov.as_ref() } else { None };
        let n = w.map_or(s.mask.len() as f64, |w| w.data().iter().sum());
        let l = tape.bce_loss(p, &s.mask.with_precision(model.precision()), w.map(|w| w.with_precision(model.precision())).as_ref())?;
        total += tape.value(l).data()[0] * n;
        count += n;
    }
    Ok(total / count.max(1.0))
}

/// Trains `model` in place. `on_epoch` sees every finished epoch.
pub fn fit(
    model: &mut SwinResNet,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let size = model.config.input_size;
    let prec = model.precision();
    let mut adam = Adam::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch_index = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr, cfg.eta_min)?;
        let mut shuffle_rng = per_sample_rng(cfg.seed, epoch, usize::MAX >> 32);
        order.shuffle(&mut shuffle_rng);
        let mut step_losses = Vec::new();
        let mut grad_norms = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (mut imgs, mut masks, mut fovs) = (Vec::new(), Vec::new(), Vec::new());
            for &i in chunk {
                let mut rng = per_sample_rng(cfg.seed, epoch, i);
                let (im, m, fv) = training_view(&train[i], cfg, size, &mut rng)?;
                imgs.push(im);
                masks.push(m);
                fovs.push(fv.unwrap_or_else(|| Tensor::ones(vec![1, size, size], prec)));
            }
            let images = stack(&imgs, prec)?;
            let targets = stack(&masks, prec)?;
            let weight = if cfg.fov_loss { Some(stack(&fovs, prec)?) } else { None };
            let step = train_step(model, &images, &targets, weight.as_ref())
                .map_err(|e| Error::Training(format!("batch {batch_index} (epoch {epoch}): {e}")))?;
            if !step.loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at batch {batch_index}")));
            }
            adam.update(&mut model.store, &step.grads, lr, cfg.weight_decay)
                .map_err(|e| Error::Training(format!("batch {batch_index}: {e}")))?;
            grad_norms = GROUPS
                .iter()
                .map(|g| (g.trim_end_matches('.').to_string(), step.grads.norm_with_prefix(&model.store, g)))
                .collect();
            step_losses.push(step.loss);
            batch_index += 1;
        }
        let train_loss = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        let val_loss = val.filter(|v| !v.is_empty()).map(|v| evaluation_loss(model, v, cfg.fov_loss)).transpose()?;
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score < *b) {
            best = Some((score, epoch, model.store.clone()));
        }
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss,
            step_losses,
            val_loss,
            grad_norms,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        steps: adam.step,
        best_epoch,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 40, 1e-4, 0.0).unwrap(), 1e-4);
        assert_eq!(cosine_lr(40, 40, 1e-4, 0.0).unwrap(), 0.0);
        assert!((cosine_lr(20, 40, 1e-4, 0.0).unwrap() - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(41, 40, 1e-4, 0.0).is_err());
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut store = ParamStore::new(Precision::F64);
        let id = store.add("w", Tensor::scalar(0.5, Precision::F64));
        let mut adam = Adam::new(&store);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let w = f.param(id);
        let g = f.backward(w).unwrap();
        adam.update(&mut store, &g, 1e-4, 0.0).unwrap();
        let delta = store.get(id).data()[0] - 0.5;
        assert!((delta + 1e-4 / (1.0 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn flips_are_involutions_and_preserve_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(vec![2, 5, 7], 1.0, Precision::F64, &mut rng);
        let d = AugmentDraw {
            hflip: true,
            vflip: true,
            angle: 0.0,
        };
        let once = apply_augment(&t, &d, Resample::Bilinear).unwrap();
        let twice = apply_augment(&once, &d, Resample::Bilinear).unwrap();
        assert!(twice.bit_eq(&t));
        let mut a = once.to_vec();
        let mut b = t.to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert!(apply_augment(&t, &AugmentDraw::IDENTITY, Resample::Nearest).unwrap().bit_eq(&t));
    }

    #[test]
    fn rotation_keeps_masks_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Tensor::uniform(vec![1, 16, 16], 0.0, 1.0, Precision::F64, &mut rng).map(|v| (v > 0.7) as u8 as f64);
        let d = AugmentDraw {
            hflip: false,
            vflip: false,
            angle: 33.0,
        };
        let r = apply_augment(&m, &d, Resample::Nearest).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let half = AugmentDraw { angle: 180.0, ..d };
        let flipped = AugmentDraw {
            hflip: true,
            vflip: true,
            angle: 0.0,
        };
        let a = apply_augment(&m, &half, Resample::Nearest).unwrap();
        let b = apply_augment(&m, &flipped, Resample::Nearest).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn tiny_fit_is_deterministic() {
        let samples = crate::synth::synth_samples(1, 2, 32).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = SwinResNet::new(ModelConfig::tiny(32), Precision::F32, 5).unwrap();
            fit(&mut m, &samples, None, &cfg, |_| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.steps, 2);
        let bits = |o: &TrainOutcome| o.history.iter().flat_map(|r| r.step_losses.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
