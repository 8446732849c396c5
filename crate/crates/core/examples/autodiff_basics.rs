//! Reverse-mode differentiation on the tape, checked against the closed form
//! of `d/dW sum(sigmoid(W x)) = (s (1 - s)) x^T`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::tensor::{Precision, Tape, Tensor};

fn main() -> swin_res_net::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w0 = Tensor::randn(vec![3, 4], 0.5, Precision::F64, &mut rng);
    let x0 = Tensor::randn(vec![4, 1], 1.0, Precision::F64, &mut rng);

    let mut tape = Tape::new();
    let w = tape.param(w0.clone());
    let x = tape.constant(x0.clone());
    let z = tape.matmul(w, x)?;
    let s = tape.sigmoid(z)?;
    let loss = tape.sum(s)?;
    println!("loss = {:.6}", tape.value(loss).data()[0]);

    let s_val = tape.value(s).clone();
    let grads = tape.backward(loss)?;
    let gw = grads.get(w).expect("w is a parameter");

    let mut worst: f64 = 0.0;
    for i in 0..3 {
        let si = s_val.data()[i];
        for j in 0..4 {
            let by_hand = si * (1.0 - si) * x0.data()[j];
            worst = worst.max((gw.data()[i * 4 + j] - by_hand).abs());
        }
    }
    println!("dL/dW shape {:?}, max deviation from the closed form {worst:.1e}", gw.shape());

    let mut f32_tape = Tape::new();
    let a = f32_tape.constant(Tensor::scalar(1.0 / 3.0, Precision::F32));
    println!("1/3 stored at f32: {:.12}", f32_tape.value(a).data()[0]);
    Ok(())
}
