//! Synthetic fundus-like images: branching vessel trees drawn as
//! anti-aliased polylines of decreasing width over a textured disc.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{scan_dataset, DatasetManifest, Pad, Sample};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Accepted range for the vessel share of disc pixels.
pub const VESSEL_FRACTION: (f64, f64) = (0.02, 0.20);

/// One generated sample as 8-bit planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthImage {
    pub size: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// 0 or 255.
    pub mask: Vec<u8>,
    /// 0 or 255.
    pub fov: Vec<u8>,
}

impl SynthImage {
    /// Vessel pixels over disc pixels.
    pub fn vessel_fraction(&self) -> f64 {
        let disc = self.fov.iter().filter(|&&v| v > 0).count();
        let vessel = self.mask.iter().zip(&self.fov).filter(|(&m, &f)| m > 0 && f > 0).count();
        vessel as f64 / disc.max(1) as f64
    }

    /// Tensors exactly as [`crate::data::load_sample`] would produce them
    /// after writing and re-reading the PNGs.
    pub fn to_sample(&self, name: String) -> Result<Sample> {
        let (s, n) = (self.size, self.size * self.size);
        let mut img = vec![0.0; 3 * n];
        for i in 0..n {
            for c in 0..3 {
                img[c * n + i] = self.rgb[3 * i + c] as f64 / 255.0;
            }
        }
        let bin = |v: &[u8]| v.iter().map(|&p| if p > 127 { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        Ok(Sample {
            name,
            image: Tensor::new(vec![3, s, s], img, Precision::F32)?,
            mask: Tensor::new(vec![1, s, s], bin(&self.mask), Precision::F32)?,
            fov: Some(Tensor::new(vec![1, s, s], bin(&self.fov), Precision::F32)?),
            pad: Pad::to_multiple(s, s, 1),
        })
    }
}

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    half_width: f64,
}

fn grow(rng: &mut ChaCha8Rng, segs: &mut Vec<Segment>, start: (f64, f64), angle: f64, width: f64, size: f64, depth: usize) {
    let (c, r) = (size / 2.0, 0.46 * size);
    let step = (size / 24.0).max(2.0);
    let (mut p, mut theta) = (start, angle);
    let max_steps = (1.6 * size / step) as usize;
    for i in 0..max_steps {
        theta += rng.random_range(-0.35..0.35);
        let q = (p.0 + step * theta.cos(), p.1 + step * theta.sin());
        if ((q.0 - c).powi(2) + (q.1 - c).powi(2)).sqrt() > r {
            break;
        }
        segs.push(Segment {
            a: p,
            b: q,
            half_width: width / 2.0,
        });
        p = q;
        if depth < 4 && i >= 2 && rng.random_bool(0.18) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let child = (width * rng.random_range(0.55..0.75)).max(1.0);
            let turn = side * rng.random_range(0.4..1.0);
            grow(rng, segs, p, theta + turn, child, size, depth + 1);
        }
    }
}

fn segment_distance(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - s.a.0 - t * dx).powi(2) + (p.1 - s.a.1 - t * dy).powi(2)).sqrt()
}

fn draw(rng: &mut ChaCha8Rng, size: usize) -> SynthImage {
    let sf = size as f64;
    let (c, r) = (sf / 2.0, 0.46 * sf);

    let mut segs = Vec::new();
    let od_angle = rng.random_range(0.0..2.0 * PI);
    let od = (c + 0.45 * r * od_angle.cos(), c + 0.45 * r * od_angle.sin());
    let trunks = match size {
        0..=32 => 1,
        33..=127 => rng.random_range(2..=3),
        _ => rng.random_range(3..=5),
    };
    for k in 0..trunks {
        let a = od_angle + PI + (k as f64 - (trunks - 1) as f64 / 2.0) * 0.9 + rng.random_range(-0.2..0.2);
        let w = rng.random_range(3.0..5.0);
        grow(rng, &mut segs, od, a, w, sf, 0);
    }

    // signed distance to the nearest vessel wall (negative inside)
    let mut wall = vec![f64::INFINITY; size * size];
    for s in &segs {
        let pad = s.half_width + 1.0;
        let x0 = (s.a.0.min(s.b.0) - pad).floor().max(0.0) as usize;
        let x1 = ((s.a.0.max(s.b.0) + pad).ceil() as usize).min(size - 1);
        let y0 = (s.a.1.min(s.b.1) - pad).floor().max(0.0) as usize;
        let y1 = ((s.a.1.max(s.b.1) + pad).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), s) - s.half_width;
                let slot = &mut wall[y * size + x];
                *slot = slot.min(d);
            }
        }
    }

    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * 2.0 * PI / sf,
                rng.random_range(0.5..3.0) * 2.0 * PI / sf,
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let base = [rng.random_range(0.70..0.85), rng.random_range(0.30..0.42), rng.random_range(0.10..0.18)];

    let mut rgb = vec![0u8; 3 * size * size];
    let mut mask = vec![0u8; size * size];
    let mut fov = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let rho = ((px - c).powi(2) + (py - c).powi(2)).sqrt() / r;
            let inside = rho <= 1.0;
            let mut col = [0.03, 0.02, 0.01];
            if inside {
                fov[i] = 255;
                let tex: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin()).sum();
                let vignette = 1.0 - 0.35 * rho * rho;
                let odist = ((px - od.0).powi(2) + (py - od.1).powi(2)).sqrt() / (0.12 * sf);
                let glow = 0.25 * (-odist * odist).exp();
                let noise = rng.random_range(-0.02..0.02);
                for ch in 0..3 {
                    col[ch] = (base[ch] * vignette + tex + glow + noise).clamp(0.0, 1.0);
                }
                let cover = (0.5 - wall[i]).clamp(0.0, 1.0);
                let dark = [0.45, 0.6, 0.5];
                for ch in 0..3 {
                    col[ch] *= 1.0 - dark[ch] * cover;
                }
                if wall[i] <= 0.0 {
                    mask[i] = 255;
                }
            }
            for ch in 0..3 {
                rgb[3 * i + ch] = (col[ch] * 255.0).round() as u8;
            }
        }
    }
    SynthImage { size, rgb, mask, fov }
}

/// `count` samples, a pure function of `(seed, count, size)`. Draws whose
/// vessel fraction falls outside [`VESSEL_FRACTION`] are discarded.
pub fn synth_images(seed: u64, count: usize, size: usize) -> Result<Vec<SynthImage>> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid("synth", format!("size {size} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * (count + 1) {
            return Err(Error::Dataset(format!("synth: could not meet the vessel fraction range at size {size}")));
        }
        let img = draw(&mut rng, size);
        let f = img.vessel_fraction();
        if (VESSEL_FRACTION.0..=VESSEL_FRACTION.1).contains(&f) {
            out.push(img);
        }
    }
    Ok(out)
}

/// In-memory samples named `synth_000`, `synth_001`, ...
pub fn synth_samples(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    synth_images(seed, count, size)?
        .iter()
        .enumerate()
        .map(|(i, s)| s.to_sample(format!("synth_{i:03}")))
        .collect()
}

fn save<P, C>(img: image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the samples as PNGs in the dataset layout under `out` and returns
/// the scanned manifest.
pub fn synth_generate(seed: u64, count: usize, size: usize, out: &Path) -> Result<DatasetManifest> {
    let imgs = synth_images(seed, count, size)?;
    for d in ["images", "masks", "fov"] {
        std::fs::create_dir_all(out.join(d))?;
    }
    let s = size as u32;
    for (i, img) in imgs.into_iter().enumerate() {
        let name = format!("synth_{i:03}.png");
        let bad = || Error::invalid("synth", "buffer size");
        save(RgbImage::from_raw(s, s, img.rgb).ok_or_else(bad)?, &out.join("images").join(&name))?;
        save(GrayImage::from_raw(s, s, img.mask).ok_or_else(bad)?, &out.join("masks").join(&name))?;
        save(GrayImage::from_raw(s, s, img.fov).ok_or_else(bad)?, &out.join("fov").join(&name))?;
    }
    scan_dataset(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_within_fraction_bounds() {
        let a = synth_images(7, 3, 64).unwrap();
        let b = synth_images(7, 3, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        for img in &a {
            let f = img.vessel_fraction();
            assert!((0.02..=0.20).contains(&f), "{f}");
        }
        assert_ne!(synth_images(8, 1, 64).unwrap()[0], a[0]);
        assert!(synth_images(1, 1, 50).is_err());
    }
}
