//! Skip refinement by iterated absolute differences between each level and
//! the upsampled next-coarser level.

use crate::error::{Error, Result};
use crate::nn::{Cbr, Forward, Init};
use crate::tensor::{Tape, Var};

/// `|fine − up2(coarse)|`, the core of one refinement step.
pub fn abs_diff_upsampled(tape: &mut Tape, fine: Var, coarse: Var) -> Result<Var> {
    let (fs, cs) = (tape.shape(fine).to_vec(), tape.shape(coarse).to_vec());
    if fs.len() != 4 || cs.len() != 4 || fs[1] != cs[1] || fs[2] != 2 * cs[2] || fs[3] != 2 * cs[3] {
        return Err(Error::shape(
            "reduce_pass",
            format!("coarse map {cs:?} is not half the resolution of {fs:?}"),
        ));
    }
    let up = tape.upsample_bilinear(coarse, 2)?;
    let d = tape.sub(fine, up)?;
    tape.abs(d)
}

#[derive(Debug, Clone)]
pub struct ReducePass {
    /// Channel-preserving CBR applied to each level.
    pub fine: Vec<Cbr>,
    /// CBR projecting level `k + 1` to the channels of level `k`.
    pub coarse: Vec<Cbr>,
}

impl ReducePass {
    pub fn new(init: &mut Init, name: &str, channels: [usize; 4]) -> Self {
        ReducePass {
            fine: (0..4)
                .map(|k| Cbr::new(init, &format!("{name}.fine{}", k + 1), channels[k], channels[k], 3, 1))
                .collect(),
            coarse: (0..3)
                .map(|k| Cbr::new(init, &format!("{name}.coarse{}", k + 2), channels[k + 1], channels[k], 3, 1))
                .collect(),
        }
    }

    pub fn forward(&self, f: &mut Forward, maps: &[Var]) -> Result<Vec<Var>> {
        if maps.len() != 4 {
            return Err(Error::invalid("reduce_pass", "expected four maps"));
        }
        f.trace.reduce_passes += 1;
        let mut out = Vec::with_capacity(4);
        for k in 0..3 {
            let fine = self.fine[k].forward(f, maps[k])?;
            let coarse = self.coarse[k].forward(f, maps[k + 1])?;
            out.push(abs_diff_upsampled(f.tape, fine, coarse)?);
        }
        out.push(self.fine[3].forward(f, maps[3])?);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SkipReduction {
    pub passes: Vec<ReducePass>,
}

impl SkipReduction {
    pub fn new(init: &mut Init, name: &str, channels: [usize; 4], passes: usize) -> Result<Self> {
        if passes == 0 {
            return Err(Error::Config("reduce_passes must be >= 1".into()));
        }
        Ok(SkipReduction {
            passes: (0..passes)
                .map(|p| ReducePass::new(init, &format!("{name}.pass{}", p + 1), channels))
                .collect(),
        })
    }

    pub fn forward(&self, f: &mut Forward, pyramid: &[Var]) -> Result<Vec<Var>> {
        let mut maps = pyramid.to_vec();
        for pass in &self.passes {
            maps = pass.forward(f, &maps)?;
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, ParamStore};
    use crate::tensor::{Precision, Tensor};

    #[test]
    fn hand_evaluated_toy() {
        let mut tape = Tape::new();
        let fine = tape.constant(Tensor::full(vec![1, 1, 2, 2], 3.0, Precision::F64));
        let coarse = tape.constant(Tensor::full(vec![1, 1, 1, 1], 5.0, Precision::F64));
        let m = abs_diff_upsampled(&mut tape, fine, coarse).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 2.0));
        assert!(abs_diff_upsampled(&mut tape, coarse, fine).is_err());
    }

    #[test]
    fn identical_operands_give_zero() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(vec![1, 2, 2, 2], 1.5, Precision::F64));
        let fine = tape.upsample_bilinear(c, 2).unwrap();
        let m = abs_diff_upsampled(&mut tape, fine, c).unwrap();
        assert!(tape.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn passes_preserve_shapes_and_sign() {
        let mut store = ParamStore::new(Precision::F64);
        let mut init = Init::new(&mut store, 9);
        let ch = [4, 8, 8, 16];
        let red = SkipReduction::new(&mut init, "skip", ch, 2).unwrap();
        assert!(SkipReduction::new(&mut init, "x", ch, 0).is_err());
        let inputs: Vec<Tensor> = (0..4)
            .map(|k| Tensor::randn(vec![2, ch[k], 16 >> k, 16 >> k], 1.0, Precision::F64, &mut init.rng))
            .collect();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| f.input(t.clone())).collect();
        let out = red.forward(&mut f, &vars).unwrap();
        assert_eq!(f.trace.reduce_passes, 2);
        for (o, i) in out.iter().zip(&inputs) {
            assert_eq!(f.tape.shape(*o), i.shape());
            assert!(f.tape.value(*o).data().iter().all(|&v| v >= 0.0));
        }
        let once = red.passes[0].forward(&mut f, &vars).unwrap();
        let twice = red.passes[1].forward(&mut f, &once).unwrap();
        for (a, b) in twice.iter().zip(&out) {
            assert!(f.tape.value(*a).bit_eq(f.tape.value(*b)));
        }
    }
}
