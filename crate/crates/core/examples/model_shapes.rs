//! Walks one 64x64 image through the default network, reporting every
//! intermediate shape along with parameter and block counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::model::GROUPS;
use swin_res_net::nn::{Forward, Mode};
use swin_res_net::tensor::{Precision, Tape, Tensor};
use swin_res_net::{ModelConfig, SwinResNet};

fn main() -> swin_res_net::Result<()> {
    let model = SwinResNet::new(ModelConfig::default(), Precision::F32, 42)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::uniform(vec![1, 3, 64, 64], 0.0, 1.0, Precision::F32, &mut rng);

    let mut tape = Tape::new();
    let mut f = Forward::new_inference(&mut tape, &model.store, Mode::Train);
    let x = f.input(image);
    let acts = model.forward(&mut f, x)?;
    let rows = [
        ("swin tokens", &acts.swin),
        ("res2 maps", &acts.res),
        ("fused", &acts.fused),
        ("skips", &acts.skips),
    ];
    for (label, vars) in rows {
        let shapes: Vec<_> = vars.iter().map(|&v| f.tape.shape(v).to_vec()).collect();
        println!("{label:<12} {shapes:?}");
    }
    println!("{:<12} {:?}", "probability", f.tape.shape(acts.probs));

    println!("\nparameters: {}", model.store.num_scalars());
    for g in GROUPS {
        let n: usize = model.store.params().iter().filter(|p| p.name.starts_with(g)).map(|p| p.value.len()).sum();
        println!("  {:<8} {n:>9}", g.trim_end_matches('.'));
    }
    let t = &f.trace;
    println!(
        "\nblocks: {} attention ({} shifted), {} patch merges, {} res2, {} fusion, {} gated conv, {} reduce passes",
        t.swin_blocks, t.shifted_blocks, t.patch_merges, t.res2_blocks, t.fu_blocks, t.hor_blocks, t.reduce_passes
    );
    Ok(())
}
