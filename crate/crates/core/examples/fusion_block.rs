//! Interactive fusion of the two encoder pyramids, ending in the recursive
//! gated convolution block at the deepest stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::fusion::{FusionModule, GnConv};
use swin_res_net::nn::{Forward, Init, Mode, ParamStore};
use swin_res_net::swin::TokenMap;
use swin_res_net::tensor::{Precision, Tape, Tensor};

fn main() -> swin_res_net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let swin_ch = [24, 48, 96, 192];
    let res_ch = [24, 48, 96, 192];
    let mut store = ParamStore::new(Precision::F32);
    let (fusion, gn) = {
        let mut init = Init::new(&mut store, 8);
        let fusion = FusionModule::new(&mut init, "fusion", swin_ch, res_ch, res_ch, 3, 7)?;
        let gn = GnConv::new(&mut init, "demo.gnconv", 32, 3, 7)?;
        (fusion, gn)
    };

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let mut tokens = Vec::new();
    let mut maps = Vec::new();
    for s in 0..4 {
        let side = 16 >> s;
        let t = f.input(Tensor::randn(vec![1, side, side, swin_ch[s]], 1.0, Precision::F32, &mut rng));
        tokens.push(TokenMap { tokens: t, stage: s + 1 });
        maps.push(f.input(Tensor::randn(vec![1, res_ch[s], side, side], 1.0, Precision::F32, &mut rng)));
    }
    let fused = fusion.forward(&mut f, &tokens, &maps)?;
    for (k, &m) in fused.iter().enumerate() {
        println!("F{}: {:?}", k + 1, f.tape.shape(m));
    }
    println!("{} fusion blocks, {} gated-convolution blocks", f.trace.fu_blocks, f.trace.hor_blocks);

    println!("order-3 gated convolution channel split: {:?}", gn.dims);
    let x = f.input(Tensor::randn(vec![1, 32, 8, 8], 1.0, Precision::F32, &mut rng));
    let y = gn.forward(&mut f, x)?;
    println!("gnconv {:?} -> {:?}", f.tape.shape(x), f.tape.shape(y));
    Ok(())
}
