//! Deep-to-shallow decoder with skip concatenation and a two-step ×2
//! segmentation head.

use crate::error::{Error, Result};
use crate::nn::{Cbr, Conv2d, Forward, Init};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone)]
pub struct Decoder {
    pub d4: Cbr,
    /// Fusion CBRs from level 3 down to level 1, in execution order.
    pub levels: Vec<Cbr>,
    pub head_up1: Cbr,
    pub head_up2: Cbr,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(init: &mut Init, name: &str, channels: [usize; 4], head_channels: usize) -> Self {
        let levels = (0..3)
            .rev()
            .map(|k| Cbr::new(init, &format!("{name}.d{}", k + 1), channels[k + 1] + channels[k], channels[k], 3, 1))
            .collect();
        Decoder {
            d4: Cbr::new(init, &format!("{name}.d4"), channels[3], channels[3], 3, 1),
            levels,
            head_up1: Cbr::new(init, &format!("{name}.head_up1"), channels[0], head_channels, 3, 1),
            head_up2: Cbr::new(init, &format!("{name}.head_up2"), head_channels, head_channels, 3, 1),
            head: Conv2d::new(init, &format!("{name}.head"), head_channels, 1, 1, 1, 1, true),
        }
    }

    /// Pre-sigmoid logits `[N, 1, 4h, 4w]` for skips whose finest level is `h×w`.
    pub fn logits(&self, f: &mut Forward, skips: &[Var]) -> Result<Var> {
        if skips.len() != 4 {
            return Err(Error::invalid("decode", "expected four skip maps"));
        }
        let mut d = self.d4.forward(f, skips[3])?;
        for (cbr, &g) in self.levels.iter().zip(skips[..3].iter().rev()) {
            let up = f.tape.upsample_bilinear(d, 2)?;
            let cat = f.tape.concat(&[up, g], 1)?;
            d = cbr.forward(f, cat)?;
        }
        let d = f.tape.upsample_bilinear(d, 2)?;
        let d = self.head_up1.forward(f, d)?;
        let d = f.tape.upsample_bilinear(d, 2)?;
        let d = self.head_up2.forward(f, d)?;
        self.head.forward(f, d)
    }

    pub fn forward(&self, f: &mut Forward, skips: &[Var]) -> Result<Var> {
        let z = self.logits(f, skips)?;
        f.tape.sigmoid(z)
    }
}

/// 1 where `p > threshold`, else 0.
pub fn binarize(probs: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("binarize", format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(probs.map(|p| if p > threshold { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_params, Mode, ParamStore};
    use crate::tensor::{Precision, Tape};

    fn skips(f: &mut Forward, ch: [usize; 4], side: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Var> {
        (0..4)
            .map(|k| f.input(Tensor::randn(vec![1, ch[k], side >> k, side >> k], 1.0, Precision::F64, rng)))
            .collect()
    }

    #[test]
    fn output_resolution_and_zero_head() {
        let ch = [4, 8, 8, 8];
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 4);
        let dec = Decoder::new(&mut init, "dec", ch, 4);
        let mut rng = init.rng.clone();
        {
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &store, Mode::Train);
            let s = skips(&mut f, ch, 8, &mut rng);
            let p = dec.forward(&mut f, &s).unwrap();
            assert_eq!(f.tape.shape(p), &[1, 1, 32, 32]);
            assert!(f.tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        zero_params(&mut store, "dec.head.");
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let s = skips(&mut f, ch, 8, &mut rng);
        let p = dec.forward(&mut f, &s).unwrap();
        assert!(f.tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn binarize_is_strict() {
        let p = Tensor::new(vec![3], vec![0.5, 0.9, 0.1], Precision::F64).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[0.0, 1.0, 0.0]);
        assert!(binarize(&p, 1.0).is_err());
        assert!(binarize(&p, 0.0).is_err());
    }
}
