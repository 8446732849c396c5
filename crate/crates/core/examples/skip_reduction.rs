//! Skip refinement: each level keeps what its upsampled coarser neighbour
//! does not already explain.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::nn::{Forward, Init, Mode, ParamStore};
use swin_res_net::skip::{abs_diff_upsampled, SkipReduction};
use swin_res_net::tensor::{Precision, Tape, Tensor};

fn main() -> swin_res_net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);

    let mut tape = Tape::new();
    let coarse = tape.constant(Tensor::randn(vec![1, 2, 4, 4], 1.0, Precision::F64, &mut rng));
    let explained = tape.upsample_bilinear(coarse, 2)?;
    let d = abs_diff_upsampled(&mut tape, explained, coarse)?;
    let residue = tape.value(d).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("fine level fully explained by the coarse one: max residue {residue}");

    let noise = tape.constant(Tensor::randn(vec![1, 2, 8, 8], 0.1, Precision::F64, &mut rng));
    let detail = tape.add(explained, noise)?;
    let d = abs_diff_upsampled(&mut tape, detail, coarse)?;
    let mean = tape.value(d).data().iter().sum::<f64>() / tape.value(d).len() as f64;
    println!("with added detail of std 0.1: mean residue {mean:.4}");

    let channels = [24, 48, 96, 192];
    let mut store = ParamStore::new(Precision::F32);
    let skip = SkipReduction::new(&mut Init::new(&mut store, 2), "skip", channels, 2)?;
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Train);
    let pyramid: Vec<_> = (0..4)
        .map(|k| f.input(Tensor::randn(vec![1, channels[k], 16 >> k, 16 >> k], 1.0, Precision::F32, &mut rng)))
        .collect();
    let out = skip.forward(&mut f, &pyramid)?;
    for (k, &o) in out.iter().enumerate() {
        let v = f.tape.value(o);
        let min = v.data().iter().cloned().fold(f64::INFINITY, f64::min);
        println!("level {}: {:?}, min {min:.3}", k + 1, v.shape());
    }
    println!("{} passes, {} parameters", f.trace.reduce_passes, store.num_scalars());
    Ok(())
}
