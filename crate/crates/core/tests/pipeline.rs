use tokenfuse::fusion::{projector_forward, FusionConfig, ModuleParams, ProjectorKind};
use tokenfuse::pipeline::synth::cosine;
use tokenfuse::pipeline::{fmap, gen_features, toy_train, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn default_size_features_are_standardized() {
    let config = FusionConfig::paper();
    let stack = gen_features(0, &config).unwrap();
    assert_eq!(stack.num_blocks(), 8);
    assert_eq!(stack.block_indices(), &[3, 6, 9, 12, 15, 18, 21, 24]);
    for map in stack.maps() {
        assert_eq!(map.shape(), &[24, 24, 1024]);
        let n = map.len() as f64;
        let mean = map.mean();
        let var = map.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.8..=1.2).contains(&var.sqrt()), "std {}", var.sqrt());
    }
}

#[test]
fn neighbours_are_more_alike_than_random_pairs() {
    let config = FusionConfig::paper();
    let stack = gen_features(1, &config).unwrap();
    let (h, w, c) = stack.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for map in stack.maps() {
        let at = |y: usize, x: usize| &map.data()[(y * w + x) * c..(y * w + x + 1) * c];
        let (mut adjacent, mut random) = (0.0, 0.0);
        let n = 2000;
        for _ in 0..n {
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w - 1));
            adjacent += cosine(at(y, x), at(y, x + 1));
            let (y2, x2) = (rng.random_range(0..h), rng.random_range(0..w));
            random += cosine(at(y, x), at(y2, x2));
        }
        let (adjacent, random) = (adjacent / n as f64, random / n as f64);
        assert!(adjacent > random + 0.1, "adjacent {adjacent:.3} vs random {random:.3}");
    }
}

#[test]
fn feature_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.fmap");
    let stack = gen_features(5, &FusionConfig::tiny()).unwrap();
    let bytes = fmap::encode(&stack).unwrap();
    fmap::write_path(&path, &bytes).unwrap();
    let back = fmap::read_path(&path).unwrap();
    assert_eq!(back, stack);
    assert_eq!(fmap::encode(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn file_and_synthetic_inputs_agree() {
    let config = FusionConfig::tiny();
    let stack = gen_features(2, &config).unwrap();
    let (_, loaded) = fmap::decode(&fmap::encode(&stack).unwrap()).unwrap();
    let params = ModuleParams::init(&config, ProjectorKind::Stf);
    let a = projector_forward(&stack, &params, &config).unwrap();
    let b = projector_forward(&loaded, &params, &config).unwrap();
    assert_eq!(a, b);
}

#[test]
fn toy_training_is_reproducible() {
    let mut cfg = TrainConfig::toy(3);
    cfg.steps = 20;
    let a = toy_train(&cfg).unwrap();
    let b = toy_train(&cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert!(a.last() < a.initial());
}
