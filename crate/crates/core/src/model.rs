//! The full segmentation network: two encoders, per-stage fusion, skip
//! refinement and the decoder.

use crate::data::{crop, reflect_pad, unpad, Pad};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::fusion::FusionModule;
use crate::nn::{Forward, Init, Mode, ParamStore, StatUpdate, Trace};
use crate::res2::{Res2Config, ResEncoder};
use crate::skip::SkipReduction;
use crate::swin::{StageGeometry, SwinConfig, SwinEncoder};
use crate::tensor::{Precision, Tape, Tensor, Var};
use crate::training::stack;

/// Parameter-name prefixes of the five module groups.
pub const GROUPS: [&str; 5] = ["swin.", "res.", "fusion.", "skip.", "decoder."];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Side of the square inputs the network is built for (training crop and
    /// inference tile).
    pub input_size: usize,
    pub swin: SwinConfig,
    pub res: Res2Config,
    pub gnconv_order: usize,
    pub gnconv_kernel: usize,
    pub reduce_passes: usize,
    pub head_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            swin: SwinConfig::default(),
            res: Res2Config::default(),
            gnconv_order: 3,
            gnconv_kernel: 7,
            reduce_passes: 2,
            head_channels: 16,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests: `C = 8`, one block per stage.
    pub fn tiny(input_size: usize) -> Self {
        ModelConfig {
            input_size,
            swin: SwinConfig {
                embed_dim: 8,
                depths: [1, 1, 1, 1],
                heads: [1, 2, 2, 4],
                mlp_ratio: 2.0,
                ..SwinConfig::default()
            },
            res: Res2Config {
                stem_channels: 8,
                stage_channels: [8, 16, 16, 32],
                depths: [1, 1, 1, 1],
                scale: 4,
            },
            gnconv_order: 2,
            gnconv_kernel: 3,
            reduce_passes: 1,
            head_channels: 4,
        }
    }

    pub fn validate(&self) -> Result<[StageGeometry; 4]> {
        let geo = self.swin.validate(self.input_size)?;
        self.res.validate()?;
        if !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!("input size {} must be a multiple of 32", self.input_size)));
        }
        if self.swin.patch_size != 4 {
            return Err(Error::Config(format!(
                "patch size {} would misalign the two encoders; only 4 is supported in the full model",
                self.swin.patch_size
            )));
        }
        let div = 1usize << self.gnconv_order.saturating_sub(1);
        if self.gnconv_order == 0 || !self.res.stage_channels[3].is_multiple_of(div) {
            return Err(Error::Config(format!(
                "gnconv order {} needs stage-4 channels divisible by {div}",
                self.gnconv_order
            )));
        }
        if self.gnconv_kernel.is_multiple_of(2) {
            return Err(Error::Config("gnconv_kernel must be odd".into()));
        }
        if self.reduce_passes == 0 || self.head_channels == 0 {
            return Err(Error::Config("reduce_passes and head_channels must be >= 1".into()));
        }
        Ok(geo)
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub swin: SwinEncoder,
    pub res: ResEncoder,
    pub fusion: FusionModule,
    pub skip: SkipReduction,
    pub decoder: Decoder,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub swin: Vec<Var>,
    pub res: Vec<Var>,
    pub fused: Vec<Var>,
    pub skips: Vec<Var>,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct SwinResNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub net: Network,
}

/// Result of a detached forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Tensor,
    pub updates: Vec<StatUpdate>,
    pub trace: Trace,
}

impl SwinResNet {
    pub fn new(config: ModelConfig, precision: Precision, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(precision);
        let mut init = Init::new(&mut store, seed);
        let swin = SwinEncoder::new(&mut init, "swin", &config.swin, config.input_size)?;
        let res = ResEncoder::new(&mut init, "res", &config.res)?;
        let swin_ch = [0, 1, 2, 3].map(|s| config.swin.stage_dim(s));
        let ch = config.res.stage_channels;
        let fusion = FusionModule::new(&mut init, "fusion", swin_ch, ch, ch, config.gnconv_order, config.gnconv_kernel)?;
        let skip = SkipReduction::new(&mut init, "skip", ch, config.reduce_passes)?;
        let decoder = Decoder::new(&mut init, "decoder", ch, config.head_channels);
        Ok(SwinResNet {
            config,
            store,
            net: Network {
                swin,
                res,
                fusion,
                skip,
                decoder,
            },
        })
    }

    pub fn precision(&self) -> Precision {
        self.store.precision()
    }

    /// Records the whole network on `f`'s tape for an `[N, 3, S, S]` image
    /// batch, `S` = `config.input_size`.
    pub fn forward(&self, f: &mut Forward, image: Var) -> Result<Activations> {
        let s = f.tape.shape(image).to_vec();
        let size = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::shape("forward", format!("expected [N, 3, {size}, {size}], got {s:?}")));
        }
        let tokens = self.net.swin.forward(f, image)?;
        let res = self.net.res.forward(f, image)?;
        let fused = self.net.fusion.forward(f, &tokens, &res)?;
        let skips = self.net.skip.forward(f, &fused)?;
        let probs = self.net.decoder.forward(f, &skips)?;
        Ok(Activations {
            swin: tokens.iter().map(|t| t.tokens).collect(),
            res,
            fused,
            skips,
            probs,
        })
    }

    /// Forward pass without gradients.
    pub fn predict(&self, images: &Tensor, mode: Mode) -> Result<Prediction> {
        let mut tape = Tape::new();
        let mut f = Forward::new_inference(&mut tape, &self.store, mode);
        let x = f.input(images.clone());
        let acts = self.forward(&mut f, x)?;
        let probs = f.tape.value(acts.probs).clone();
        let (updates, trace) = f.into_updates();
        Ok(Prediction { probs, updates, trace })
    }

    /// Eval-mode probability map `[1, H, W]` for a `[3, H, W]` image of any
    /// size, assembled from `input_size` tiles (overlaps are averaged).
    pub fn predict_image(&self, image: &Tensor) -> Result<Tensor> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("predict_image", format!("expected [3, H, W], got {s:?}")));
        }
        let size = self.config.input_size;
        let (h, w) = (s[1], s[2]);
        if h < size || w < size {
            let pad = Pad::to_size(h, w, size, size);
            let probs = self.predict_image(&reflect_pad(image, &pad)?)?;
            return unpad(&probs, &pad);
        }
        let image = image.with_precision(self.precision());
        let mut tiles = Vec::new();
        for &y in &tile_origins(h, size) {
            for &x in &tile_origins(w, size) {
                tiles.push((y, x));
            }
        }
        let mut sum = vec![0.0; h * w];
        let mut hits = vec![0u32; h * w];
        for group in tiles.chunks(4) {
            let crops = group
                .iter()
                .map(|&(y, x)| crop(&image, y, x, size, size))
                .collect::<Result<Vec<_>>>()?;
            let batch = stack(&crops, self.precision())?;
            let probs = self.predict(&batch, Mode::Eval)?.probs;
            for (t, &(y, x)) in group.iter().enumerate() {
                let tile = &probs.data()[t * size * size..(t + 1) * size * size];
                for r in 0..size {
                    for c in 0..size {
                        let i = (y + r) * w + x + c;
                        sum[i] += tile[r * size + c];
                        hits[i] += 1;
                    }
                }
            }
        }
        let data = sum.iter().zip(&hits).map(|(s, &n)| s / n as f64).collect();
        Tensor::new(vec![1, h, w], data, self.precision())
    }
}

/// Tile starts covering `0..len` with tiles of `size`, the last flush with the end.
pub fn tile_origins(len: usize, size: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|k| k * size).take_while(|&p| p + size < len).collect();
    out.push(len - size);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_end_to_end_shapes() {
        let model = SwinResNet::new(ModelConfig::tiny(32), Precision::F64, 0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let x = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, Precision::F64, &mut rng);
        let p = model.predict(&x, Mode::Train).unwrap();
        assert_eq!(p.probs.shape(), &[2, 1, 32, 32]);
        assert_eq!(p.trace.hor_blocks, 1);
        assert_eq!(p.trace.fu_blocks, 4);
        assert_eq!(p.trace.swin_blocks, 4);
        assert!(model.predict(&Tensor::zeros(vec![1, 3, 64, 64], Precision::F64), Mode::Train).is_err());
    }

    #[test]
    fn tiles_cover_every_pixel() {
        assert_eq!(tile_origins(64, 64), vec![0]);
        assert_eq!(tile_origins(608, 64), vec![0, 64, 128, 192, 256, 320, 384, 448, 512, 544]);
        assert_eq!(tile_origins(128, 64), vec![0, 64]);
    }

    #[test]
    fn default_config_counts() {
        let model = SwinResNet::new(ModelConfig::default(), Precision::F32, 42).unwrap();
        assert_eq!(model.net.swin.stages.iter().map(|s| s.blocks.len()).sum::<usize>(), 12);
        assert_eq!(model.net.res.stages.iter().map(|s| s.len()).sum::<usize>(), 21);
        for g in GROUPS {
            assert!(model.store.params().iter().any(|p| p.name.starts_with(g)), "{g}");
        }
    }
}
