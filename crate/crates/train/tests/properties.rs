mod common;

use common::*;
use mondeq_train::adam::{adam_step, AdamConfig, AdamState};
use mondeq_train::config::{Preset, TrainConfig};
use mondeq_train::data::{load_mnist_idx, Dataset, Normalization};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn idx_round_trips_any_pixels(
        n in 1usize..5,
        side in 1usize..7,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng(seed);
        let px: Vec<u8> = (0..n * side * side).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..10)).collect();
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i.gz"), dir.path().join("l"));
        write_gz(&img, &idx_images(n as u32, side as u32, side as u32, &px));
        write(&lab, &idx_labels(&labels));
        let d = load_mnist_idx(&img, &lab).unwrap();
        prop_assert_eq!(&d.labels, &labels);
        for (v, p) in d.images.iter().zip(&px) {
            prop_assert_eq!(*v, *p as f64 / 255.0);
        }
    }

    #[test]
    fn normalization_standardizes_each_channel(
        channels in 1usize..4,
        values in prop::collection::vec(0u8..=255, 3 * 4 * 6),
    ) {
        let n = values.len() / (channels * 4);
        let images: Vec<f64> = values[..n * channels * 4].iter().map(|&v| v as f64 / 255.0).collect();
        let mut d = Dataset::new(images, vec![0; n], channels, 2).unwrap();
        Normalization::fit(&d).apply(&mut d);
        let after = Normalization::fit(&d);
        for c in 0..channels {
            prop_assert!(after.mean[c].abs() <= 1e-6);
            // constant channels stay constant (std reported as 1)
            prop_assert!((after.std[c] - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn adam_is_deterministic_and_bounded(grads in prop::collection::vec(-1e3f64..1e3, 1..20), lr in 1e-4f64..1.0) {
        let run = || {
            let mut p = vec![0.0; grads.len()];
            let mut s = AdamState::new(grads.len());
            for _ in 0..3 {
                adam_step(&mut p, &grads, &mut s, lr, &AdamConfig::default()).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        // each bias-corrected step moves a parameter by at most about lr
        for (p, g) in a.iter().zip(&grads) {
            prop_assert!(p.abs() <= 3.0 * lr * (1.0 + 1e-6));
            if *g != 0.0 {
                prop_assert!(p.signum() == -g.signum());
            }
        }
    }

    #[test]
    fn config_text_round_trips(
        epochs in 0usize..100,
        batch in 1usize..512,
        lr in 1e-5f64..1.0,
        seed in any::<u64>(),
        preset in 0usize..5,
    ) {
        let mut cfg = TrainConfig::for_preset(Preset::ALL[preset]);
        cfg.epochs = epochs;
        cfg.batch_size = batch;
        cfg.lr = lr;
        cfg.seed = seed;
        let mut back = TrainConfig::for_preset(Preset::FcMnist);
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
