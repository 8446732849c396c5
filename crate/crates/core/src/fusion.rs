//! Per-stage fusion of the transformer and convolutional encoders, with a
//! recursive gated convolution block on the deepest stage.

use crate::error::{Error, Result};
use crate::nn::{Cbr, Conv2d, Forward, Init, LayerNorm};
use crate::swin::{Mlp, TokenMap};
use crate::tensor::{Tape, Var};

/// `[N, h, w, D]` token grid as an `[N, D, h, w]` feature map.
pub fn tokens_to_map(tape: &mut Tape, t: TokenMap) -> Result<Var> {
    tape.permute(t.tokens, &[0, 3, 1, 2])
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens(tape: &mut Tape, x: Var, stage: usize) -> Result<TokenMap> {
    Ok(TokenMap {
        tokens: tape.permute(x, &[0, 2, 3, 1])?,
        stage,
    })
}

#[derive(Debug, Clone)]
pub struct FuBlock {
    pub swin: Cbr,
    pub res: Cbr,
    pub prev: Option<Cbr>,
    pub out: Cbr,
}

impl FuBlock {
    /// `prev_channels` is `Some` for every block but the first.
    pub fn new(
        init: &mut Init,
        name: &str,
        swin_channels: usize,
        res_channels: usize,
        prev_channels: Option<usize>,
        out_channels: usize,
    ) -> Self {
        let inputs = if prev_channels.is_some() { 3 } else { 2 };
        FuBlock {
            swin: Cbr::new(init, &format!("{name}.swin"), swin_channels, out_channels, 3, 1),
            res: Cbr::new(init, &format!("{name}.res"), res_channels, out_channels, 3, 1),
            prev: prev_channels.map(|c| Cbr::new(init, &format!("{name}.prev"), c, out_channels, 3, 2)),
            out: Cbr::new(init, &format!("{name}.out"), inputs * out_channels, out_channels, 3, 1),
        }
    }

    pub fn forward(&self, f: &mut Forward, s: Var, r: Var, prev: Option<Var>) -> Result<Var> {
        f.trace.fu_blocks += 1;
        let (ss, rs) = (f.tape.shape(s).to_vec(), f.tape.shape(r).to_vec());
        if ss[0] != rs[0] || ss[2..] != rs[2..] {
            return Err(Error::shape("fu_block", format!("encoder maps misaligned: {ss:?} vs {rs:?}")));
        }
        let mut parts = vec![self.swin.forward(f, s)?, self.res.forward(f, r)?];
        match (&self.prev, prev) {
            (Some(cbr), Some(p)) => {
                let p = cbr.forward(f, p)?;
                if f.tape.shape(p)[2..] != ss[2..] {
                    return Err(Error::shape(
                        "fu_block",
                        format!("previous map {:?} does not align with {ss:?}", f.tape.shape(p)),
                    ));
                }
                parts.push(p);
            }
            (None, None) => {}
            _ => return Err(Error::invalid("fu_block", "previous fused map given to the wrong block")),
        }
        let cat = f.tape.concat(&parts, 1)?;
        self.out.forward(f, cat)
    }
}

/// Recursive gated convolution of order `n`.
#[derive(Debug, Clone)]
pub struct GnConv {
    pub order: usize,
    pub dims: Vec<usize>,
    pub proj_in: Conv2d,
    pub dwconv: Conv2d,
    pub pws: Vec<Conv2d>,
    pub proj_out: Conv2d,
}

impl GnConv {
    pub fn new(init: &mut Init, name: &str, dim: usize, order: usize, kernel: usize) -> Result<Self> {
        if order == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("gnconv order {order} / kernel {kernel}: need order >= 1, odd kernel")));
        }
        let div = 1usize << (order - 1);
        if !dim.is_multiple_of(div) {
            return Err(Error::Config(format!("gnconv width {dim} not divisible by 2^(order-1) = {div}")));
        }
        let dims: Vec<usize> = (0..order).map(|i| dim >> (order - 1 - i)).collect();
        let total: usize = dims.iter().sum();
        Ok(GnConv {
            order,
            proj_in: Conv2d::new(init, &format!("{name}.proj_in"), dim, 2 * dim, 1, 1, 1, true),
            dwconv: Conv2d::new(init, &format!("{name}.dwconv"), total, total, kernel, 1, total, true),
            pws: (0..order - 1)
                .map(|i| Conv2d::new(init, &format!("{name}.pw{i}"), dims[i], dims[i + 1], 1, 1, 1, true))
                .collect(),
            proj_out: Conv2d::new(init, &format!("{name}.proj_out"), dim, dim, 1, 1, 1, true),
            dims,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let total: usize = self.dims.iter().sum();
        let fused = self.proj_in.forward(f, x)?;
        let pq = f.tape.split(fused, &[self.dims[0], total], 1)?;
        let dw = self.dwconv.forward(f, pq[1])?;
        let q = f.tape.split(dw, &self.dims, 1)?;
        let mut p = f.tape.mul(pq[0], q[0])?;
        for (i, pw) in self.pws.iter().enumerate() {
            let g = pw.forward(f, p)?;
            p = f.tape.mul(g, q[i + 1])?;
        }
        self.proj_out.forward(f, p)
    }
}

#[derive(Debug, Clone)]
pub struct HorBlock {
    pub norm1: LayerNorm,
    pub gnconv: GnConv,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl HorBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, order: usize, kernel: usize) -> Result<Self> {
        Ok(HorBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            gnconv: GnConv::new(init, &format!("{name}.gnconv"), dim, order, kernel)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(init, &format!("{name}.mlp"), dim, 4 * dim),
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        f.trace.hor_blocks += 1;
        let n = self.norm1.forward_channels(f, x)?;
        let g = self.gnconv.forward(f, n)?;
        let x = f.tape.add(x, g)?;
        let t = f.tape.permute(x, &[0, 2, 3, 1])?;
        let n = self.norm2.forward(f, t)?;
        let m = self.mlp.forward(f, n)?;
        let m = f.tape.permute(m, &[0, 3, 1, 2])?;
        f.tape.add(x, m)
    }
}

#[derive(Debug, Clone)]
pub struct FusionModule {
    pub blocks: Vec<FuBlock>,
    pub hor: HorBlock,
}

impl FusionModule {
    pub fn new(
        init: &mut Init,
        name: &str,
        swin_channels: [usize; 4],
        res_channels: [usize; 4],
        out_channels: [usize; 4],
        gnconv_order: usize,
        gnconv_kernel: usize,
    ) -> Result<Self> {
        let blocks = (0..4)
            .map(|k| {
                FuBlock::new(
                    init,
                    &format!("{name}.fu{}", k + 1),
                    swin_channels[k],
                    res_channels[k],
                    (k > 0).then(|| out_channels[k - 1]),
                    out_channels[k],
                )
            })
            .collect();
        let hor = HorBlock::new(init, &format!("{name}.hor"), out_channels[3], gnconv_order, gnconv_kernel)?;
        Ok(FusionModule { blocks, hor })
    }

    pub fn forward(&self, f: &mut Forward, swin: &[TokenMap], res: &[Var]) -> Result<Vec<Var>> {
        if swin.len() != 4 || res.len() != 4 {
            return Err(Error::invalid("fuse_encoders", "expected four maps from each encoder"));
        }
        let mut out: Vec<Var> = Vec::with_capacity(4);
        for (k, blk) in self.blocks.iter().enumerate() {
            let s = tokens_to_map(f.tape, swin[k])?;
            let fk = blk.forward(f, s, res[k], out.last().copied())?;
            out.push(fk);
        }
        out[3] = self.hor.forward(f, out[3])?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{zero_params, Mode, ParamStore};
    use crate::tensor::{Precision, Tensor};

    fn setup() -> ParamStore {
        ParamStore::new(Precision::F64)
    }

    #[test]
    fn fu_block_shape_trace() {
        let mut store = setup();
        let mut init = Init::new(&mut store, 0);
        let b1 = FuBlock::new(&mut init, "a", 24, 24, None, 24);
        let b2 = FuBlock::new(&mut init, "b", 48, 48, Some(24), 48);
        let s1 = Tensor::randn(vec![1, 24, 16, 16], 1.0, Precision::F64, &mut init.rng);
        let s2 = Tensor::randn(vec![1, 48, 8, 8], 1.0, Precision::F64, &mut init.rng);
        assert_eq!(store.get(b1.out.conv.weight).shape()[1], 48);
        assert_eq!(store.get(b2.out.conv.weight).shape()[1], 144);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let (a, b) = (f.input(s1.clone()), f.input(s1));
        let f1 = b1.forward(&mut f, a, b, None).unwrap();
        assert_eq!(f.tape.shape(f1), &[1, 24, 16, 16]);
        let (c, d) = (f.input(s2.clone()), f.input(s2));
        let f2 = b2.forward(&mut f, c, d, Some(f1)).unwrap();
        assert_eq!(f.tape.shape(f2), &[1, 48, 8, 8]);
        assert!(b2.forward(&mut f, c, d, None).is_err());
        assert!(b1.forward(&mut f, a, c, None).is_err());
    }

    #[test]
    fn gnconv_zero_input_gives_zero_output() {
        let mut store = setup();
        let mut init = Init::new(&mut store, 1);
        let g = GnConv::new(&mut init, "g", 8, 3, 7).unwrap();
        assert_eq!(g.dims, vec![2, 4, 8]);
        zero_params(&mut store, "g.proj_in.bias");
        zero_params(&mut store, "g.proj_out.bias");
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let x = f.input(Tensor::zeros(vec![1, 8, 5, 5], Precision::F64));
        let y = g.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y), &[1, 8, 5, 5]);
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gnconv_order_one_is_a_single_gate() {
        let mut store = setup();
        let mut init = Init::new(&mut store, 2);
        let g = GnConv::new(&mut init, "g", 4, 1, 3).unwrap();
        let x = Tensor::randn(vec![2, 4, 5, 5], 1.0, Precision::F64, &mut init.rng);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x);
        let got = g.forward(&mut f, xi).unwrap();
        let fused = g.proj_in.forward(&mut f, xi).unwrap();
        let p0 = f.tape.slice(fused, 1, 0, 4).unwrap();
        let q0 = f.tape.slice(fused, 1, 4, 4).unwrap();
        let dq = g.dwconv.forward(&mut f, q0).unwrap();
        let gate = f.tape.mul(dq, p0).unwrap();
        let want = g.proj_out.forward(&mut f, gate).unwrap();
        assert_eq!(f.tape.value(got).max_abs_diff(f.tape.value(want)).unwrap(), 0.0);
    }

    #[test]
    fn hor_block_with_zero_output_projections_is_identity() {
        let mut store = setup();
        let mut init = Init::new(&mut store, 3);
        let h = HorBlock::new(&mut init, "h", 8, 3, 7).unwrap();
        let x = Tensor::randn(vec![1, 8, 4, 4], 1.0, Precision::F64, &mut init.rng);
        zero_params(&mut store, "h.gnconv.proj_out");
        zero_params(&mut store, "h.mlp.fc2");
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &store, Mode::Train);
        let xi = f.input(x.clone());
        let y = h.forward(&mut f, xi).unwrap();
        assert!(f.tape.value(y).bit_eq(&x));
        assert_eq!(f.trace.hor_blocks, 1);
    }

    #[test]
    fn token_map_permute_round_trips() {
        let mut tape = Tape::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let t = Tensor::randn(vec![2, 4, 6, 5], 1.0, Precision::F64, &mut rng);
        let v = tape.constant(t.clone());
        let m = tokens_to_map(&mut tape, TokenMap { tokens: v, stage: 1 }).unwrap();
        assert_eq!(tape.shape(m), &[2, 5, 4, 6]);
        let back = map_to_tokens(&mut tape, m, 1).unwrap();
        assert!(tape.value(back.tokens).bit_eq(&t));
    }
}
