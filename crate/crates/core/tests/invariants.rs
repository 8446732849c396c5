use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swin_res_net::checkpoint::{Checkpoint, TrainState};
use swin_res_net::config::Config;
use swin_res_net::data::{read_prob_map, reflect_pad, unpad, write_prob_map, Pad};
use swin_res_net::metrics::{auc, auc_trapezoid, confusion};
use swin_res_net::swin::{cyclic_shift, window_partition, window_reverse};
use swin_res_net::synth::synth_images;
use swin_res_net::tensor::{Precision, Tape, Tensor};
use swin_res_net::{ModelConfig, SwinResNet};

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, Precision::F64, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partition_then_reverse_is_identity(
        m in 1usize..5, gh in 1usize..4, gw in 1usize..4, n in 1usize..3, c in 1usize..4, seed: u64,
    ) {
        let (h, w) = (gh * m, gw * m);
        let x = tensor(vec![n, h, w, c], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let win = window_partition(&mut tape, v, m).unwrap();
        prop_assert_eq!(tape.shape(win), &[n * gh * gw, m * m, c][..]);
        let back = window_reverse(&mut tape, win, m, n, h, w).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn cyclic_shift_is_inverted_by_its_negation(
        h in 2usize..9, w in 2usize..9, s in -4isize..5, seed: u64,
    ) {
        let x = tensor(vec![1, h, w, 2], seed);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let there = cyclic_shift(&mut tape, v, s).unwrap();
        let back = cyclic_shift(&mut tape, there, -s).unwrap();
        prop_assert!(tape.value(back).bit_eq(&x));
    }

    #[test]
    fn reflect_pad_is_undone_by_unpad(h in 3usize..70, w in 3usize..70, multiple in 1usize..40, seed: u64) {
        let x = tensor(vec![2, h, w], seed);
        let pad = Pad::to_multiple(h, w, multiple);
        let p = reflect_pad(&x, &pad).unwrap();
        prop_assert_eq!(p.shape()[1] % multiple, 0);
        prop_assert_eq!(p.shape()[2] % multiple, 0);
        prop_assert!(p.shape()[1] - h < multiple && p.shape()[2] - w < multiple);
        prop_assert!(unpad(&p, &pad).unwrap().bit_eq(&x));
    }

    #[test]
    fn rank_auc_matches_trapezoid(n in 2usize..200, levels in 1u32..12, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs: Vec<f64> = (0..n).map(|_| (rng.random_range(0..=levels) as f64) / levels as f64).collect();
        let gt: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let a = auc(&probs, &gt, None).unwrap();
        let b = auc_trapezoid(&probs, &gt, None).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b),
            (None, None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn confusion_counts_cover_the_field_of_view(n in 1usize..300, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = || (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let (pred, gt, fov) = (bits(), bits(), bits());
        let c = confusion(&pred, &gt, Some(&fov)).unwrap();
        prop_assert_eq!(c.total() as f64, fov.iter().sum::<f64>());
        let all = confusion(&pred, &gt, None).unwrap();
        prop_assert_eq!(all.total() as usize, n);
    }

    #[test]
    fn probability_map_file_round_trips(h in 1usize..20, w in 1usize..20, seed: u64) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.srnp");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probs = Tensor::uniform(vec![1, h, w], 0.0, 1.0, Precision::F32, &mut rng);
        write_prob_map(&path, &probs).unwrap();
        prop_assert!(read_prob_map(&path).unwrap().bit_eq(&probs));
    }

    #[test]
    fn config_text_round_trips(lr in 1e-6f64..1.0, epochs in 1usize..500, batch in 1usize..64, seed: u64, augment: bool) {
        let mut c = Config::default();
        c.train.lr = lr;
        c.train.epochs = epochs;
        c.train.batch_size = batch;
        c.train.seed = seed;
        c.train.augment = augment;
        prop_assert_eq!(Config::parse_str(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact_for_random_models(seed: u64, step in 0u64..10_000) {
        let config = Config {
            model: ModelConfig::tiny(32),
            ..Config::default()
        };
        let model = SwinResNet::new(config.model.clone(), Precision::F32, seed).unwrap();
        let state = TrainState { step, epoch: 3, best_epoch: 1 };
        let bytes = Checkpoint::from_model(&model, &config, state).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.state, state);
        prop_assert_eq!(&back.config, &config);
        let rebuilt = back.to_model().unwrap();
        for (a, b) in model.store.params().iter().zip(rebuilt.store.params()) {
            prop_assert!(a.value.bit_eq(&b.value), "{}", a.name);
        }
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn synthetic_images_are_a_pure_function_of_their_arguments(seed: u64, count in 1usize..4) {
        let a = synth_images(seed, count, 32).unwrap();
        prop_assert_eq!(&a, &synth_images(seed, count, 32).unwrap());
        let longer = synth_images(seed, count + 1, 32).unwrap();
        prop_assert_eq!(&a[..], &longer[..count]);
    }
}
