//! Segments an image of arbitrary size with a checkpoint: reflection-pad to a
//! multiple of 32, tiled inference, crop back, threshold.
//!
//! ```text
//! cargo run --release --example predict -- model.ckpt image.png mask.png [probs.srnp]
//! ```
//!
//! Without arguments a small network is fitted for a few epochs on synthetic
//! images and then segments a 100x75 synthetic crop.

use std::path::Path;

use swin_res_net::checkpoint::load_model;
use swin_res_net::data::{read_prob_map, read_rgb, reflect_pad, unpad, write_mask_png, write_prob_map, Pad};
use swin_res_net::decoder::binarize;
use swin_res_net::synth::synth_samples;
use swin_res_net::tensor::{Precision, Tensor};
use swin_res_net::training::{fit, TrainConfig};
use swin_res_net::{ModelConfig, SwinResNet};

fn main() -> swin_res_net::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (model, image, threshold) = match args.as_slice() {
        [model, image, ..] => {
            let (m, ckpt) = load_model(Path::new(model))?;
            (m, read_rgb(Path::new(image))?, ckpt.config.train.threshold)
        }
        _ => {
            let mut model = SwinResNet::new(ModelConfig::tiny(32), Precision::F32, 1)?;
            let cfg = TrainConfig {
                lr: 3e-3,
                epochs: 15,
                ..TrainConfig::default()
            };
            fit(&mut model, &synth_samples(1, 4, 64)?, None, &cfg, |_| {})?;
            let sample = synth_samples(3, 1, 128)?.remove(0);
            let (h, w) = (75, 100);
            let mut data = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        data.push(sample.image.data()[c * 128 * 128 + y * 128 + x]);
                    }
                }
            }
            let image = Tensor::new(vec![3, h, w], data, Precision::F32)?;
            (model, image, 0.5)
        }
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let pad = Pad::to_multiple(h, w, 32);
    println!("{h}x{w} padded to {}x{}", pad.padded_height(), pad.padded_width());

    let probs = unpad(&model.predict_image(&reflect_pad(&image, &pad)?)?, &pad)?;
    let mask = binarize(&probs, threshold)?;
    let vessel = mask.data().iter().sum::<f64>() / mask.len() as f64;
    println!("probability map {:?}, {:.1}% above {threshold}", probs.shape(), 100.0 * vessel);

    let dir = std::env::temp_dir();
    let mask_path = args.get(2).map_or_else(|| dir.join("predict_mask.png"), Into::into);
    let prob_path = args.get(3).map_or_else(|| dir.join("predict_probs.srnp"), Into::into);
    write_mask_png(&mask_path, &mask)?;
    write_prob_map(&prob_path, &probs)?;
    let back = read_prob_map(&prob_path)?;
    println!(
        "wrote {} and {} (reads back {})",
        mask_path.display(),
        prob_path.display(),
        if back.bit_eq(&probs.with_precision(Precision::F32)) { "bit-exact" } else { "differently" }
    );
    Ok(())
}
