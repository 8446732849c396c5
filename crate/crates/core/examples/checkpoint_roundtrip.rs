use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use swin_res_net::checkpoint::{Checkpoint, TrainState, MAGIC};
use swin_res_net::config::Config;
use swin_res_net::nn::Mode;
use swin_res_net::tensor::{Precision, Tensor};
use swin_res_net::{Error, ModelConfig, SwinResNet};

fn main() -> swin_res_net::Result<()> {
    let config = Config {
        model: ModelConfig::tiny(32),
        ..Config::default()
    };
    let mut model = SwinResNet::new(config.model.clone(), Precision::F32, 9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = Tensor::uniform(vec![2, 3, 32, 32], 0.0, 1.0, Precision::F32, &mut rng);
    let p = model.predict(&batch, Mode::Train)?;
    model.store.apply_stat_updates(&p.updates);

    let state = TrainState {
        step: 120,
        epoch: 30,
        best_epoch: 27,
    };
    let bytes = Checkpoint::from_model(&model, &config, state).to_bytes();
    println!("{} bytes, magic {:?}", bytes.len(), std::str::from_utf8(MAGIC).unwrap());

    let restored = Checkpoint::from_bytes(&bytes)?;
    println!("state {:?}, {} tensors", restored.state, restored.tensors.len());
    let rebuilt = restored.to_model()?;
    let a = model.predict(&batch, Mode::Eval)?.probs;
    let b = rebuilt.predict(&batch, Mode::Eval)?.probs;
    println!("eval predictions identical: {}", a.bit_eq(&b));
    println!("re-encoded bytes identical: {}", restored.to_bytes() == bytes);

    let mut wrong = bytes.clone();
    wrong[4] = 2;
    for (label, data) in [("future version", &wrong[..]), ("cut short", &bytes[..bytes.len() / 2])] {
        match Checkpoint::from_bytes(data) {
            Err(e @ (Error::UnsupportedVersion(_) | Error::Truncated(_))) => println!("{label}: {e}"),
            other => println!("{label}: unexpected {:?}", other.map(|c| c.state)),
        }
    }
    Ok(())
}
