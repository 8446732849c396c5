use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

fn included(fov: Option<&[f64]>, i: usize) -> bool {
    fov.is_none_or(|f| f[i] != 0.0)
}

fn check_lengths(op: &str, a: usize, b: usize, fov: Option<&[f64]>) -> Result<()> {
    if a != b || fov.is_some_and(|f| f.len() != a) {
        return Err(Error::Metrics(format!("{op}: input lengths differ")));
    }
    Ok(())
}

/// Pixel counts of a binary prediction against binary ground truth, over the
/// pixels where `fov` is non-zero (all pixels without one).
pub fn confusion(pred: &[f64], gt: &[f64], fov: Option<&[f64]>) -> Result<ConfusionCounts> {
    check_lengths("confusion", pred.len(), gt.len(), fov)?;
    if !is_binary(pred) || !is_binary(gt) {
        return Err(Error::Metrics("confusion: inputs must be 0/1".into()));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !included(fov, i) {
            continue;
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub iou: f64,
    /// Metrics whose ratio was 0/0 and is reported as 1.0.
    pub degenerate: Vec<&'static str>,
}

pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    let mut degenerate = Vec::new();
    let mut ratio = |name: &'static str, num: u64, den: u64| {
        if den == 0 {
            degenerate.push(name);
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    ScalarMetrics {
        sensitivity: ratio("sensitivity", c.tp, c.tp + c.fn_),
        specificity: ratio("specificity", c.tn, c.tn + c.fp),
        accuracy: ratio("accuracy", c.tp + c.tn, c.total()),
        f1: ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio("iou", c.tp, c.tp + c.fp + c.fn_),
        degenerate,
    }
}

fn scored(probs: &[f64], gt: &[f64], fov: Option<&[f64]>) -> Result<Vec<(f64, bool)>> {
    check_lengths("auc", probs.len(), gt.len(), fov)?;
    if !is_binary(gt) {
        return Err(Error::Metrics("auc: ground truth must be 0/1".into()));
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Metrics("auc: non-finite score".into()));
    }
    Ok(probs
        .iter()
        .zip(gt)
        .enumerate()
        .filter(|&(i, _)| included(fov, i))
        .map(|(_, (&p, &g))| (p, g == 1.0))
        .collect())
}

/// ROC AUC from the Mann-Whitney rank statistic with tied scores sharing
/// their average rank. `None` when either class is absent.
pub fn auc(probs: &[f64], gt: &[f64], fov: Option<&[f64]>) -> Result<Option<f64>> {
    let mut s = scored(probs, gt, fov)?;
    let pos = s.iter().filter(|x| x.1).count();
    let neg = s.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j < s.len() && s[j].0 == s[i].0 {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * s[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n)))
}

/// ROC AUC by trapezoidal integration over every distinct threshold.
pub fn auc_trapezoid(probs: &[f64], gt: &[f64], fov: Option<&[f64]>) -> Result<Option<f64>> {
    let mut s = scored(probs, gt, fov)?;
    let pos = s.iter().filter(|x| x.1).count() as f64;
    let neg = s.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Ok(None);
    }
    s.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < s.len() {
        let (tpr0, fpr0) = (tp / pos, fp / neg);
        let mut j = i;
        while j < s.len() && s[j].0 == s[i].0 {
            if s[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        area += (fp / neg - fpr0) * (tp / pos + tpr0) / 2.0;
        i = j;
    }
    Ok(Some(area))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageReport {
    pub name: String,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// `null` when the image has a single ground-truth class.
    pub auc: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    pub counts: ConfusionCounts,
}

/// Per-image rows with their means, plus metrics from counts pooled over
/// every image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub f1: f64,
    pub iou: f64,
    pub threshold: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageReport>,
    pub degenerate_flags: Vec<String>,
    pub pooled: PooledReport,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One image to score: probabilities, binary ground truth, optional FOV.
pub struct EvalItem<'a> {
    pub name: &'a str,
    pub probs: &'a [f64],
    pub gt: &'a [f64],
    pub fov: Option<&'a [f64]>,
}

pub fn evaluate(items: &[EvalItem], threshold: f64) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Metrics("nothing to evaluate".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Metrics(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut per_image = Vec::with_capacity(items.len());
    let mut flags = Vec::new();
    let mut pooled = ConfusionCounts::default();
    let (mut all_p, mut all_g, mut all_f) = (Vec::new(), Vec::new(), Vec::new());
    for it in items {
        let bin: Vec<f64> = it.probs.iter().map(|&p| if p > threshold { 1.0 } else { 0.0 }).collect();
        let c = confusion(&bin, it.gt, it.fov)?;
        let m = scalar_metrics(&c);
        let a = auc(it.probs, it.gt, it.fov)?;
        flags.extend(m.degenerate.iter().map(|d| format!("{}: {d} is 0/0, reported as 1", it.name)));
        if a.is_none() {
            flags.push(format!("{}: auc undefined (single-class ground truth)", it.name));
        }
        pooled = pooled + c;
        all_p.extend_from_slice(it.probs);
        all_g.extend_from_slice(it.gt);
        all_f.extend(it.fov.map_or_else(|| vec![1.0; it.gt.len()], <[f64]>::to_vec));
        per_image.push(ImageReport {
            name: it.name.to_string(),
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            accuracy: m.accuracy,
            auc: a,
            f1: m.f1,
            iou: m.iou,
            counts: c,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageReport) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let aucs: Vec<f64> = per_image.iter().filter_map(|r| r.auc).collect();
    let pm = scalar_metrics(&pooled);
    flags.extend(pm.degenerate.iter().map(|d| format!("pooled: {d} is 0/0, reported as 1")));
    let pooled_auc = auc(&all_p, &all_g, Some(&all_f))?;
    Ok(EvalReport {
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
        accuracy: mean(|r| r.accuracy),
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        f1: mean(|r| r.f1),
        iou: mean(|r| r.iou),
        threshold,
        n_images: per_image.len(),
        degenerate_flags: flags,
        pooled: PooledReport {
            sensitivity: pm.sensitivity,
            specificity: pm.specificity,
            accuracy: pm.accuracy,
            auc: pooled_auc,
            f1: pm.f1,
            iou: pm.iou,
            counts: pooled,
        },
        per_image,
    })
}
