//! Reading images into tensors, pairing them into datasets, reflection padding.
//!
//! A dataset root holds `images/` and `masks/` (optionally `fov/` too), with
//! samples paired by file stem. PNG and binary PPM/PGM are accepted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

/// Padding added on each side to reach aligned dimensions, plus the source
/// dimensions needed to undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pad {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
    pub height: usize,
    pub width: usize,
}

impl Pad {
    /// Smallest symmetric-as-possible padding making both sides multiples of
    /// `multiple`; the odd pixel goes to the bottom / right.
    pub fn to_multiple(height: usize, width: usize, multiple: usize) -> Pad {
        Pad::to_size(height, width, height.div_ceil(multiple) * multiple, width.div_ceil(multiple) * multiple)
    }

    /// Padding up to `(th, tw)`; sides already at least that large get none.
    pub fn to_size(height: usize, width: usize, th: usize, tw: usize) -> Pad {
        let (dh, dw) = (th.saturating_sub(height), tw.saturating_sub(width));
        Pad {
            top: dh / 2,
            bottom: dh - dh / 2,
            left: dw / 2,
            right: dw - dw / 2,
            height,
            width,
        }
    }

    pub fn padded_height(&self) -> usize {
        self.height + self.top + self.bottom
    }

    pub fn padded_width(&self) -> usize {
        self.width + self.left + self.right
    }

    pub fn is_empty(&self) -> bool {
        self.top + self.bottom + self.left + self.right == 0
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

fn chw(t: &Tensor) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(t.shape()).map_err(|_| Error::shape("image", format!("expected [C, H, W], got {:?}", t.shape())))
}

/// Reflection-pads a `[C, H, W]` tensor.
pub fn reflect_pad(t: &Tensor, pad: &Pad) -> Result<Tensor> {
    let [c, h, w] = chw(t)?;
    if (h, w) != (pad.height, pad.width) {
        return Err(Error::shape("reflect_pad", format!("pad built for {}x{}, image is {h}x{w}", pad.height, pad.width)));
    }
    let (ph, pw) = (pad.padded_height(), pad.padded_width());
    let rows: Vec<usize> = (0..ph).map(|i| reflect_index(i as isize - pad.top as isize, h)).collect();
    let cols: Vec<usize> = (0..pw).map(|j| reflect_index(j as isize - pad.left as isize, w)).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        for &r in &rows {
            let base = (ch * h + r) * w;
            out.extend(cols.iter().map(|&q| src[base + q]));
        }
    }
    Tensor::new(vec![c, ph, pw], out, t.precision())
}

/// `[C, H, W]` window starting at `(top, left)`.
pub fn crop(t: &Tensor, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
    let [c, h, w] = chw(t)?;
    if top + height > h || left + width > w {
        return Err(Error::shape("crop", format!("{height}x{width} at ({top}, {left}) exceeds {h}x{w}")));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        for r in top..top + height {
            let base = (ch * h + r) * w;
            out.extend_from_slice(&src[base + left..base + left + width]);
        }
    }
    Tensor::new(vec![c, height, width], out, t.precision())
}

/// Removes the padding recorded in `pad`.
pub fn unpad(t: &Tensor, pad: &Pad) -> Result<Tensor> {
    crop(t, pad.top, pad.left, pad.height, pad.width)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplePaths {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fov: Option<PathBuf>,
}

/// A loaded, padded sample. The image is `[3, H, W]` in `[0, 1]`; mask and
/// field of view are `[1, H, W]` in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub fov: Option<Tensor>,
    pub pad: Pad,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    ImageReader::open(path)?.with_guessed_format()?.decode().map_err(err)
}

/// Decodes an RGB image (grayscale is replicated) into `[3, H, W]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data, Precision::F32)
}

/// Decodes a label image into `[1, H, W]`: 1 where the gray value is above 127.
pub fn read_binary(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] > 127 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h, w], data, Precision::F32)
}

/// Writes a `[1, H, W]` binary mask as an 8-bit PNG with values {0, 255}.
pub fn write_mask_png(path: &Path, mask: &Tensor) -> Result<()> {
    let [_, h, w] = chw(mask)?;
    let px: Vec<u8> = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, px).ok_or_else(|| Error::invalid("write_mask_png", "buffer size"))?;
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub const PROB_MAGIC: &str = "SRNP v1";

/// Writes a `[1, H, W]` probability map: the text line `SRNP v1 H W`, then
/// `H·W` little-endian f32 values in row-major order.
pub fn write_prob_map(path: &Path, probs: &Tensor) -> Result<()> {
    let [_, h, w] = chw(probs)?;
    let mut out = format!("{PROB_MAGIC} {h} {w}\n").into_bytes();
    for v in probs.to_f32_vec() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_prob_map(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let bad = |why: &str| Error::Dataset(format!("{}: {why}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not UTF-8"))?;
    let dims = header.strip_prefix(PROB_MAGIC).ok_or_else(|| bad("not an SRNP v1 file"))?;
    let dims: Vec<usize> = dims.split_whitespace().map(|d| d.parse().map_err(|_| bad("bad dimensions"))).collect::<Result<_>>()?;
    let [h, w] = dims[..] else {
        return Err(bad("expected two dimensions"));
    };
    let body = &bytes[nl + 1..];
    if body.len() != 4 * h * w {
        return Err(bad("payload size does not match the header"));
    }
    let vals: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::from_f32(vec![1, h, w], &vals)
}

/// Loads one sample and reflection-pads it to multiples of `multiple`.
pub fn load_sample(paths: &SamplePaths, multiple: usize) -> Result<Sample> {
    let image = read_rgb(&paths.image)?;
    let mask = read_binary(&paths.mask)?;
    let dims = |t: &Tensor| (t.shape()[1], t.shape()[2]);
    if dims(&image) != dims(&mask) {
        return Err(Error::Dataset(format!(
            "{} is {:?} but {} is {:?}",
            paths.image.display(),
            dims(&image),
            paths.mask.display(),
            dims(&mask)
        )));
    }
    let fov = match &paths.fov {
        Some(p) => {
            let f = read_binary(p)?;
            if dims(&f) != dims(&image) {
                return Err(Error::Dataset(format!(
                    "{} is {:?} but {} is {:?}",
                    paths.image.display(),
                    dims(&image),
                    p.display(),
                    dims(&f)
                )));
            }
            Some(f)
        }
        None => None,
    };
    let (h, w) = dims(&image);
    let pad = Pad::to_multiple(h, w, multiple);
    Ok(Sample {
        name: paths.stem.clone(),
        image: reflect_pad(&image, &pad)?,
        mask: reflect_pad(&mask, &pad)?,
        fov: fov.map(|f| reflect_pad(&f, &pad)).transpose()?,
        pad,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<SamplePaths>,
    /// Stems present in `images/` or `masks/` but not both.
    pub orphans: Vec<String>,
}

impl DatasetManifest {
    pub fn warnings(&self) -> Vec<String> {
        self.orphans
            .iter()
            .map(|s| format!("{}: no matching image/mask pair for \"{s}\"", self.root.display()))
            .collect()
    }

    pub fn load(&self, multiple: usize) -> Result<Vec<Sample>> {
        self.samples.iter().map(|p| load_sample(p, multiple)).collect()
    }
}

fn list_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs `images/<stem>.*` with `masks/<stem>.*` (and `fov/<stem>.*` when that
/// directory exists), sorted by stem.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let (img_dir, mask_dir, fov_dir) = (root.join("images"), root.join("masks"), root.join("fov"));
    for d in [&img_dir, &mask_dir] {
        if !d.is_dir() {
            return Err(Error::Dataset(format!("missing directory {}", d.display())));
        }
    }
    let images = list_stems(&img_dir)?;
    let masks = list_stems(&mask_dir)?;
    let fovs = if fov_dir.is_dir() { list_stems(&fov_dir)? } else { BTreeMap::new() };
    let samples: Vec<SamplePaths> = images
        .iter()
        .filter_map(|(stem, img)| {
            masks.get(stem).map(|m| SamplePaths {
                stem: stem.clone(),
                image: img.clone(),
                mask: m.clone(),
                fov: fovs.get(stem).cloned(),
            })
        })
        .collect();
    let mut orphans: Vec<String> = images
        .keys()
        .filter(|s| !masks.contains_key(*s))
        .chain(masks.keys().filter(|s| !images.contains_key(*s)))
        .cloned()
        .collect();
    orphans.sort();
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no image/mask pairs under {}", root.display())));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        samples,
        orphans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drive_sized_padding() {
        let p = Pad::to_multiple(584, 565, 32);
        assert_eq!((p.padded_height(), p.padded_width()), (608, 576));
        assert_eq!((p.top, p.bottom, p.left, p.right), (12, 12, 5, 6));
        assert!(Pad::to_multiple(64, 64, 32).is_empty());
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn pad_then_unpad_is_identity() {
        let t = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Precision::F64).unwrap();
        let pad = Pad::to_multiple(2, 3, 4);
        let p = reflect_pad(&t, &pad).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[4.0, 5.0, 6.0, 5.0]);
        assert!(unpad(&p, &pad).unwrap().bit_eq(&t));
    }
}
