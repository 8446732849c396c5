//! Convolutional path of the encoder: a CBR stem with max-pooling followed by
//! four stages of Res2Net blocks.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Cbr, Conv2d, Forward, Init};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Res2Config {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub depths: [usize; 4],
    pub scale: usize,
}

impl Default for Res2Config {
    fn default() -> Self {
        Res2Config {
            stem_channels: 24,
            stage_channels: [24, 48, 96, 192],
            depths: [4, 6, 9, 2],
            scale: 4,
        }
    }
}

impl Res2Config {
    pub fn validate(&self) -> Result<()> {
        if self.scale < 2 {
            return Err(Error::Config(format!("res2 scale {} must be >= 2", self.scale)));
        }
        if self.stem_channels == 0 {
            return Err(Error::Config("stem channels must be >= 1".into()));
        }
        for (s, (&c, &d)) in self.stage_channels.iter().zip(&self.depths).enumerate() {
            if c == 0 || c % self.scale != 0 {
                return Err(Error::Config(format!(
                    "res stage {} channels {c} not divisible by scale {}",
                    s + 1,
                    self.scale
                )));
            }
            if d == 0 {
                return Err(Error::Config(format!("res stage {} depth must be >= 1", s + 1)));
            }
        }
        Ok(())
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }
}

/// Bottleneck-free Res2Net block. The entry 1×1 conv produces `scale`
/// groups; the first passes through, each later one is convolved after
/// adding its left neighbour's output. In a stride-2 block the groups are
/// convolved independently and the pass-through group is average-pooled.
#[derive(Debug, Clone)]
pub struct Res2Block {
    pub conv_in: Cbr,
    pub convs: Vec<Cbr>,
    pub conv_out: Conv2d,
    pub bn_out: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
    pub stride: usize,
    pub scale: usize,
    pub width: usize,
}

impl Res2Block {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize, scale: usize) -> Result<Self> {
        if !cout.is_multiple_of(scale) {
            return Err(Error::Config(format!("res2 width {cout} not divisible by {scale} groups")));
        }
        let w = cout / scale;
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv2d::new(init, &format!("{name}.shortcut.conv"), cin, cout, 1, stride, 1, false),
                BatchNorm2d::new(init, &format!("{name}.shortcut.bn"), cout),
            )
        });
        Ok(Res2Block {
            conv_in: Cbr::new(init, &format!("{name}.conv_in"), cin, cout, 1, 1),
            convs: (1..scale)
                .map(|i| Cbr::new(init, &format!("{name}.group{i}"), w, w, 3, stride))
                .collect(),
            conv_out: Conv2d::new(init, &format!("{name}.conv_out"), cout, cout, 1, 1, 1, false),
            bn_out: BatchNorm2d::new(init, &format!("{name}.bn_out"), cout),
            shortcut,
            stride,
            scale,
            width: cout,
        })
    }

    /// Group outputs `y1..y_scale` before concatenation.
    pub fn branches(&self, f: &mut Forward, x: Var) -> Result<Vec<Var>> {
        let y = self.conv_in.forward(f, x)?;
        let parts = vec![self.width / self.scale; self.scale];
        let groups = f.tape.split(y, &parts, 1)?;
        let mut outs = Vec::with_capacity(self.scale);
        outs.push(if self.stride == 1 {
            groups[0]
        } else {
            avg_pool3(f, groups[0], self.stride)?
        });
        for (i, conv) in self.convs.iter().enumerate() {
            let inp = if self.stride == 1 {
                f.tape.add(groups[i + 1], outs[i])?
            } else {
                groups[i + 1]
            };
            outs.push(conv.forward(f, inp)?);
        }
        Ok(outs)
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        f.trace.res2_blocks += 1;
        let outs = self.branches(f, x)?;
        let cat = f.tape.concat(&outs, 1)?;
        let z = self.conv_out.forward(f, cat)?;
        let z = self.bn_out.forward(f, z)?;
        let res = match &self.shortcut {
            Some((conv, bn)) => {
                let r = conv.forward(f, x)?;
                bn.forward(f, r)?
            }
            None => x,
        };
        let sum = f.tape.add(z, res)?;
        f.tape.relu(sum)
    }
}

/// 3×3 average pooling with zero padding 1, as a fixed depthwise conv.
fn avg_pool3(f: &mut Forward, x: Var, stride: usize) -> Result<Var> {
    let c = f.tape.shape(x)[1];
    let w = f.input(Tensor::full(vec![c, 1, 3, 3], 1.0 / 9.0, f.precision()));
    f.tape.conv2d_grouped(x, w, None, stride, 1, c)
}

#[derive(Debug, Clone)]
pub struct ResEncoder {
    pub config: Res2Config,
    pub stem: Cbr,
    pub stages: Vec<Vec<Res2Block>>,
}

impl ResEncoder {
    pub fn new(init: &mut Init, name: &str, config: &Res2Config) -> Result<Self> {
        config.validate()?;
        let stem = Cbr::new(init, &format!("{name}.stem"), 3, config.stem_channels, 3, 2);
        let mut cin = config.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let cout = config.stage_channels[s];
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for b in 0..config.depths[s] {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(Res2Block::new(
                    init,
                    &format!("{name}.stage{}.block{b}", s + 1),
                    cin,
                    cout,
                    stride,
                    config.scale,
                )?);
                cin = cout;
            }
            stages.push(blocks);
        }
        Ok(ResEncoder {
            config: config.clone(),
            stem,
            stages,
        })
    }

    /// Stage outputs at `H/4 .. H/32`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<Vec<Var>> {
        let shape = f.tape.shape(image).to_vec();
        if shape.len() != 4 || !shape[2].is_multiple_of(32) || !shape[3].is_multiple_of(32) {
            return Err(Error::shape("res_encoder", format!("expected [N, 3, H, W] with H, W multiples of 32, got {shape:?}")));
        }
        let x = self.stem.forward(f, image)?;
        let mut x = f.tape.max_pool2d(x, 2, 2)?;
        let mut out = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                x = blk.forward(f, x)?;
            }
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_params, Mode, ParamStore};
    use crate::tensor::{Precision, Tape};

    #[test]
    fn zero_convs_reduce_to_relu_of_input() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 1);
        let blk = Res2Block::new(&mut init, "b", 8, 8, 1, 4).unwrap();
        let x = Tensor::randn(vec![2, 8, 6, 6], 1.0, Precision::F64, &mut init.rng);
        for suffix in ["conv_in.conv", "group", "conv_out"] {
            zero_params(&mut store, &format!("b.{suffix}"));
        }
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x.clone());
        let y = blk.forward(&mut f, xi).unwrap();
        let want = x.map(|v| v.max(0.0));
        assert_eq!(f.tape.value(y).max_abs_diff(&want).unwrap(), 0.0);
    }

    #[test]
    fn stride_block_halves_resolution() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 2);
        let blk = Res2Block::new(&mut init, "b", 8, 16, 2, 4).unwrap();
        assert!(Res2Block::new(&mut init, "c", 8, 10, 1, 4).is_err());
        let x = Tensor::randn(vec![1, 8, 8, 8], 1.0, Precision::F64, &mut init.rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x);
        let br = blk.branches(&mut f, xi).unwrap();
        assert_eq!(br.len(), 4);
        assert!(br.iter().all(|&b| f.tape.shape(b) == [1, 4, 4, 4]));
        let y = blk.forward(&mut f, xi).unwrap();
        assert_eq!(f.tape.shape(y), &[1, 16, 4, 4]);
    }

    #[test]
    fn config_rejects_indivisible_channels() {
        let mut c = Res2Config::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.total_blocks(), 21);
        c.stage_channels[2] = 30;
        assert!(c.validate().is_err());
    }
}
