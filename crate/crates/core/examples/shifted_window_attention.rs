//! The cyclic shift with its region mask, then a regular/shifted pair of
//! attention blocks on an 8x8 token grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::nn::{Forward, Init, Mode, ParamStore};
use swin_res_net::swin::{cyclic_shift, shift_attention_mask, window_partition, BlockKind, StageGeometry, SwinBlock};
use swin_res_net::tensor::{Precision, Tape, Tensor};

const GRID: usize = 8;
const WINDOW: usize = 4;
const SHIFT: usize = WINDOW / 2;
const DIM: usize = 12;

fn main() -> swin_res_net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Token (i, j) carries the value 10 i + j so movements are easy to read.
    let ids: Vec<f64> = (0..GRID * GRID).map(|k| (10 * (k / GRID) + k % GRID) as f64).collect();
    let mut tape = Tape::new();
    let grid = tape.constant(Tensor::new(vec![1, GRID, GRID, 1], ids, Precision::F64)?);
    let rolled = cyclic_shift(&mut tape, grid, SHIFT as isize)?;
    let windows = window_partition(&mut tape, rolled, WINDOW)?;
    println!("windows after a shift of {SHIFT}: {:?}", tape.shape(windows));
    let w = tape.value(windows).data();
    for (k, chunk) in w.chunks(WINDOW * WINDOW).enumerate() {
        let first: Vec<String> = chunk.iter().take(WINDOW).map(|v| format!("{v:02}")).collect();
        println!("  window {k} first row: {}", first.join(" "));
    }

    let mask = shift_attention_mask(GRID, GRID, WINDOW, SHIFT, Precision::F64)?;
    let t = WINDOW * WINDOW;
    println!("mask {:?}; allowed pairs per window:", mask.shape());
    for (k, m) in mask.data().chunks(t * t).enumerate() {
        let allowed = m.iter().filter(|&&v| v == 0.0).count();
        println!("  window {k}: {allowed} of {}", t * t);
    }

    let mut store = ParamStore::new(Precision::F64);
    let geometry = StageGeometry {
        grid: GRID,
        window: WINDOW,
        shift: SHIFT,
    };
    let (regular, shifted) = {
        let mut init = Init::new(&mut store, 5);
        (
            SwinBlock::new(&mut init, "w", DIM, 3, geometry, BlockKind::Regular, 4.0, true),
            SwinBlock::new(&mut init, "sw", DIM, 3, geometry, BlockKind::Shifted, 4.0, true),
        )
    };
    let z = Tensor::randn(vec![2, GRID, GRID, DIM], 1.0, Precision::F64, &mut rng);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &store, Mode::Eval);
    let z0 = f.input(z);
    let z1 = regular.forward(&mut f, z0)?;
    let z2 = shifted.forward(&mut f, z1)?;
    println!(
        "block pair: {:?} -> {:?}, {} parameters, {} blocks ({} shifted)",
        f.tape.shape(z0),
        f.tape.shape(z2),
        store.num_scalars(),
        f.trace.swin_blocks,
        f.trace.shifted_blocks
    );

    let n = regular.norm1.forward(&mut f, z0)?;
    let win = window_partition(f.tape, n, WINDOW)?;
    let (_, probs) = regular.attn.forward_with_probs(&mut f, win, None)?;
    let p = f.tape.value(probs);
    let row: f64 = p.data()[..t].iter().sum();
    println!("attention probabilities {:?}, first row sums to {row:.15}", p.shape());
    Ok(())
}
