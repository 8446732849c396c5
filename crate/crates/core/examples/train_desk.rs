//! Overfits the default network on eight synthetic images and reports the
//! training loss and IoU, then saves the checkpoint.
//!
//! ```text
//! cargo run --release --example train_desk -- [checkpoint-path]
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use swin_res_net::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use swin_res_net::config::Config;
use swin_res_net::decoder::binarize;
use swin_res_net::metrics::{confusion, scalar_metrics, ConfusionCounts};
use swin_res_net::synth::synth_samples;
use swin_res_net::training::fit;
use swin_res_net::SwinResNet;

fn main() -> swin_res_net::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "desk.ckpt".into()));
    let config = Config::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.conf"))?;
    let samples = synth_samples(42, 8, 64)?;
    let mut model = SwinResNet::new(config.model.clone(), config.precision, config.train.seed)?;
    println!("{} parameters, {} epochs of batch {}", model.store.num_scalars(), config.train.epochs, config.train.batch_size);

    let t0 = Instant::now();
    let outcome = fit(&mut model, &samples, None, &config.train, |r| {
        if r.epoch % 20 == 0 || r.epoch + 1 == config.train.epochs {
            println!("epoch {:>3}  lr {:.2e}  loss {:.4}  {:.0?}", r.epoch, r.lr, r.train_loss, t0.elapsed());
        }
    })?;

    let mut counts = ConfusionCounts::default();
    for s in &samples {
        let mask = binarize(&model.predict_image(&s.image)?, config.train.threshold)?;
        counts = counts + confusion(mask.data(), s.mask.data(), None)?;
    }
    let m = scalar_metrics(&counts);
    println!("{} steps: training IoU {:.4}, F1 {:.4}", outcome.steps, m.iou, m.f1);

    let state = TrainState {
        step: outcome.steps,
        epoch: config.train.epochs,
        best_epoch: config.train.epochs - 1,
    };
    save_checkpoint(&out, &Checkpoint::from_model(&model, &config, state))?;
    println!("saved {}", out.display());
    Ok(())
}
