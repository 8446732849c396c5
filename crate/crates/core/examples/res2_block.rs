//! Multi-scale residual blocks: the hierarchical group outputs of one block
//! and the four-stage residual encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::nn::{Forward, Init, Mode, ParamStore};
use swin_res_net::res2::{Res2Block, Res2Config, ResEncoder};
use swin_res_net::tensor::{Precision, Tape, Tensor};

fn main() -> swin_res_net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new(Precision::F32);
    let (same, down, encoder) = {
        let mut init = Init::new(&mut store, 3);
        let same = Res2Block::new(&mut init, "same", 24, 24, 1, 4)?;
        let down = Res2Block::new(&mut init, "down", 24, 48, 2, 4)?;
        let encoder = ResEncoder::new(&mut init, "res", &Res2Config::default())?;
        (same, down, encoder)
    };

    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let x = f.input(Tensor::randn(vec![2, 24, 16, 16], 1.0, Precision::F32, &mut rng));
    for (label, block) in [("stride 1", &same), ("stride 2", &down)] {
        let groups = block.branches(&mut f, x)?;
        let shapes: Vec<_> = groups.iter().map(|&g| f.tape.shape(g).to_vec()).collect();
        let y = block.forward(&mut f, x)?;
        println!("{label}: groups {shapes:?} -> output {:?}", f.tape.shape(y));
    }

    let image = f.input(Tensor::uniform(vec![1, 3, 64, 64], 0.0, 1.0, Precision::F32, &mut rng));
    let before = f.trace.res2_blocks;
    let stages = encoder.forward(&mut f, image)?;
    for (s, &r) in stages.iter().enumerate() {
        println!("stage {}: {:?}", s + 1, f.tape.shape(r));
    }
    println!(
        "encoder ran {} blocks (depths {:?})",
        f.trace.res2_blocks - before,
        Res2Config::default().depths
    );
    Ok(())
}
