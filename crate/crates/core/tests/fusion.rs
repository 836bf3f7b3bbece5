use tokenfuse::fusion::{
    avgpool_projector, layer_shapes, mbtf_forward, projector_forward, stf_forward,
    tokenconcat_projector, Activation, FeatureStack, FusionConfig, LayerId, ModuleParams,
    ProjectorKind, Provenance,
};
use tokenfuse::ops::{conv2d, space_to_depth};
use tokenfuse::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn erf_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn random_map(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

fn random_stack(config: &FusionConfig, seed: u64) -> FeatureStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [config.grid_h, config.grid_w, config.encoder_width];
    let maps = (0..config.num_blocks).map(|_| random_map(&mut rng, shape)).collect();
    let indices = config.block_indices().unwrap().into_iter().map(|i| i as u32).collect();
    FeatureStack::new(indices, maps).unwrap()
}

fn small(h: usize, c1: usize, k: usize, e: usize) -> FusionConfig {
    FusionConfig {
        encoder_depth: 2,
        num_blocks: 2,
        grid_h: h,
        grid_w: h,
        encoder_width: c1,
        kernel: k,
        tokens_per_window: e,
        llm_width: 3,
        mbtf_hidden: 3,
        stf_hidden: 5,
        seed: 0,
        activation: Activation::Gelu,
    }
}

fn set_layer(params: &mut ModuleParams, id: LayerId, weight: &[f32], bias: &[f32]) {
    let layer = params.get_mut(id).unwrap();
    layer.weight.data_mut().copy_from_slice(weight);
    layer.bias.data_mut().copy_from_slice(bias);
}

fn identity(n: usize) -> Vec<f32> {
    (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
}

#[test]
fn mbtf_matches_hand_computation() {
    let mut config = small(2, 1, 1, 1);
    config.mbtf_hidden = 2;
    let mut params = ModuleParams::init(&config, ProjectorKind::Stf);
    // conv1 weight is [cin][cout] = [[0.5, -1.0], [2.0, 0.25]]
    set_layer(&mut params, LayerId::MbtfConv1, &[0.5, -1.0, 2.0, 0.25], &[0.1, -0.2]);
    set_layer(&mut params, LayerId::MbtfConv2, &[1.5, -0.75], &[0.3]);
    let a = [1.0f32, -2.0, 0.5, 3.0];
    let b = [-1.0f32, 0.25, 2.0, -0.5];
    let stack = FeatureStack::new(
        vec![1, 2],
        vec![
            Tensor::new(vec![2, 2, 1], a.to_vec()).unwrap(),
            Tensor::new(vec![2, 2, 1], b.to_vec()).unwrap(),
        ],
    )
    .unwrap();
    let out = mbtf_forward(&stack, &params, &config).unwrap();
    assert_eq!(out.shape(), &[2, 2, 1]);
    for p in 0..4 {
        let (x, y) = (a[p] as f64, b[p] as f64);
        let h0 = erf_gelu(0.5 * x + 2.0 * y + 0.1);
        let h1 = erf_gelu(-1.0 * x + 0.25 * y - 0.2);
        let want = erf_gelu(1.5 * h0 - 0.75 * h1 + 0.3);
        assert!((out.data()[p] as f64 - want).abs() < 1e-6, "position {p}");
    }
}

#[test]
fn zero_weights_give_zero_output() {
    let config = FusionConfig::tiny();
    let mut params = ModuleParams::init(&config, ProjectorKind::Stf);
    for (_, layer) in params.iter_mut() {
        layer.weight.data_mut().fill(0.0);
        layer.bias.data_mut().fill(0.0);
    }
    let stack = random_stack(&config, 1);
    let fused = mbtf_forward(&stack, &params, &config).unwrap();
    assert!(fused.data().iter().all(|&v| v == 0.0));
    let tokens = projector_forward(&stack, &params, &config).unwrap();
    assert!(tokens.data().iter().all(|&v| v == 0.0));
}

fn dense(x: &[f64], layer: &tokenfuse::autograd::ConvLayer, act: bool) -> Vec<f64> {
    let cout = layer.bias.len();
    let w = layer.weight.data();
    (0..cout)
        .map(|o| {
            let mut s = layer.bias.data()[o] as f64;
            for (i, &xi) in x.iter().enumerate() {
                s += xi * w[i * cout + o] as f64;
            }
            if act {
                erf_gelu(s)
            } else {
                s
            }
        })
        .collect()
}

/// Straight-line STF: gather each k x k window, run it through the three
/// layers as dense maps, and split the result into E tokens.
fn stf_oracle(x: &Tensor, params: &ModuleParams, config: &FusionConfig) -> Vec<Vec<f64>> {
    let (h, w, c) = (config.grid_h, config.grid_w, config.encoder_width);
    let k = config.kernel;
    let mut tokens = Vec::new();
    for wy in 0..h / k {
        for wx in 0..w / k {
            let mut patch = Vec::new();
            for i in 0..k {
                for j in 0..k {
                    for ch in 0..c {
                        patch.push(x.data()[((wy * k + i) * w + wx * k + j) * c + ch] as f64);
                    }
                }
            }
            let a = dense(&patch, params.get(LayerId::StfConv1).unwrap(), true);
            let b = dense(&a, params.get(LayerId::StfConv2).unwrap(), true);
            let out = dense(&b, params.get(LayerId::StfConv3).unwrap(), true);
            for chunk in out.chunks(config.llm_width) {
                tokens.push(chunk.to_vec());
            }
        }
    }
    tokens
}

#[test]
fn stf_matches_window_enumeration() {
    for e in [1, 2, 4] {
        let config = small(4, 2, 2, e);
        let params = ModuleParams::init(&config, ProjectorKind::Stf);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_map(&mut rng, [4, 4, 2]);
        let got = stf_forward(&x, &params, &config).unwrap();
        let want = stf_oracle(&x, &params, &config);
        assert_eq!(got.len(), 4 * e);
        assert_eq!(got.len(), want.len());
        assert_eq!(got.provenance(), Provenance::Stf);
        for (t, w) in want.iter().enumerate() {
            for (g, w) in got.token(t).iter().zip(w) {
                assert!((*g as f64 - w).abs() < 1e-5, "E={e} token {t}");
            }
        }
    }
}

#[test]
fn identity_path_without_activation_returns_input() {
    let mut config = small(3, 4, 1, 1).with_activation(Activation::Identity);
    config.llm_width = 4;
    config.stf_hidden = 4;
    let mut params = ModuleParams::init(&config, ProjectorKind::Stf);
    for id in [LayerId::StfConv1, LayerId::StfConv2, LayerId::StfConv3] {
        set_layer(&mut params, id, &identity(4), &[0.0; 4]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_map(&mut rng, [3, 3, 4]);
    let tokens = stf_forward(&x, &params, &config).unwrap();
    assert_eq!(tokens.len(), 9);
    assert_eq!(tokens.data(), x.data());
}

#[test]
fn stf_tokens_depend_only_on_their_window() {
    let config = small(4, 2, 2, 2);
    let params = ModuleParams::init(&config, ProjectorKind::Stf);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_map(&mut rng, [4, 4, 2]);
    let base = stf_forward(&x, &params, &config).unwrap();
    let mut y = x.clone();
    // row 1, column 3 sits in window (0, 1), which owns tokens 2 and 3
    y.data_mut()[(4 + 3) * 2] += 0.5;
    let moved = stf_forward(&y, &params, &config).unwrap();
    for t in 0..base.len() {
        let same = base.token(t) == moved.token(t);
        assert_eq!(same, !(t == 2 || t == 3), "token {t}");
    }
}

#[test]
fn forward_is_deterministic_per_seed() {
    let config = FusionConfig::tiny();
    let stack = random_stack(&config, 3);
    let run = |seed| {
        let c = config.clone().with_seed(seed);
        let params = ModuleParams::init(&c, ProjectorKind::Stf);
        projector_forward(&stack, &params, &c).unwrap().into_tensor().to_le_bytes()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn token_count_law_holds_for_every_valid_fusion() {
    for k in [1, 2, 3, 4, 6, 8] {
        for e in 1..=k * k {
            let mut config = small(24, 1, k, e);
            config.llm_width = 2;
            config.stf_hidden = 2;
            let params = ModuleParams::init(&config, ProjectorKind::Stf);
            let x = Tensor::full(vec![24, 24, 1], 0.5);
            let tokens = stf_forward(&x, &params, &config).unwrap();
            assert_eq!(tokens.len(), (24 / k) * (24 / k) * e, "k={k} E={e}");
            assert_eq!(tokens.width(), 2);
            assert_eq!(config.token_count(), tokens.len());
        }
    }
    let config = small(24, 1, 2, 1);
    assert_eq!(config.token_count(), 144);
    assert_eq!(config.token_count() * 4, config.baseline_token_count());
}

#[test]
fn degenerate_config_is_a_per_position_mlp() {
    let mut config = FusionConfig::tiny().with_fusion(1, 1);
    config.encoder_depth = 1;
    config.num_blocks = 1;
    config.grid_h = 24;
    config.grid_w = 24;
    let params = ModuleParams::init(&config, ProjectorKind::Stf);
    let tokens = projector_forward(&random_stack(&config, 2), &params, &config).unwrap();
    assert_eq!(tokens.len(), 576);
    assert_eq!(tokens.width(), config.llm_width);
}

#[test]
fn wrong_map_count_is_rejected() {
    let config = FusionConfig::tiny();
    let params = ModuleParams::init(&config, ProjectorKind::Stf);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = FeatureStack::new(vec![4], vec![random_map(&mut rng, [4, 4, 4])]).unwrap();
    assert!(projector_forward(&one, &params, &config).is_err());
    let narrow = FeatureStack::new(
        vec![2, 4],
        vec![random_map(&mut rng, [4, 4, 3]), random_map(&mut rng, [4, 4, 3])],
    )
    .unwrap();
    assert!(mbtf_forward(&narrow, &params, &config).is_err());
}

#[test]
fn constant_map_gives_identical_baseline_tokens() {
    let config = FusionConfig::tiny();
    let maps = vec![Tensor::full(vec![4, 4, 4], 0.3), Tensor::full(vec![4, 4, 4], -0.7)];
    let stack = FeatureStack::new(vec![2, 4], maps).unwrap();
    for kind in [ProjectorKind::AvgPool, ProjectorKind::TokenConcat] {
        let params = ModuleParams::init(&config, kind);
        let tokens = match kind {
            ProjectorKind::AvgPool => avgpool_projector(&stack, &params, &config),
            _ => tokenconcat_projector(&stack, &params, &config),
        }
        .unwrap();
        assert_eq!(tokens.len(), 4);
        for t in 1..tokens.len() {
            assert_eq!(tokens.token(t), tokens.token(0), "{kind}");
        }
    }
}

#[test]
fn avgpool_tokens_are_four_value_means() {
    let mut config = FusionConfig::tiny().with_activation(Activation::Identity);
    config.llm_width = 4;
    let mut params = ModuleParams::init(&config, ProjectorKind::AvgPool);
    set_layer(&mut params, LayerId::AvgPoolFc1, &identity(4), &[0.0; 4]);
    set_layer(&mut params, LayerId::AvgPoolFc2, &identity(4), &[0.0; 4]);
    let stack = random_stack(&config, 8);
    let last = stack.last();
    let tokens = avgpool_projector(&stack, &params, &config).unwrap();
    assert_eq!(tokens.provenance(), Provenance::AvgPool);
    for py in 0..2 {
        for px in 0..2 {
            for c in 0..4 {
                let at = |y: usize, x: usize| last.data()[(y * 4 + x) * 4 + c] as f64;
                let (y, x) = (2 * py, 2 * px);
                let mean = (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0;
                let got = tokens.token(py * 2 + px)[c] as f64;
                assert!((got - mean).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn tokenconcat_order_matches_one_hot_conv() {
    let mut config = FusionConfig::tiny().with_activation(Activation::Identity);
    config.llm_width = 16;
    let mut params = ModuleParams::init(&config, ProjectorKind::TokenConcat);
    set_layer(&mut params, LayerId::ConcatFc1, &identity(16), &[0.0; 16]);
    set_layer(&mut params, LayerId::ConcatFc2, &identity(16), &[0.0; 16]);
    let stack = random_stack(&config, 6);
    let tokens = tokenconcat_projector(&stack, &params, &config).unwrap();

    let c = 4;
    let weight = Tensor::from_fn(vec![2, 2, c, 4 * c], |n| {
        let (o, rest) = (n % (4 * c), n / (4 * c));
        let (ci, ij) = (rest % c, rest / c);
        if o == ij * c + ci { 1.0 } else { 0.0 }
    });
    let oracle = conv2d(stack.last(), &weight, &Tensor::zeros(vec![4 * c]), 2).unwrap();
    assert_eq!(tokens.data(), oracle.data());

    let packed = space_to_depth(stack.last(), 2).unwrap();
    let mut a = packed.data().to_vec();
    let mut b = stack.last().data().to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    assert_eq!(a, b);
}

#[test]
fn parameter_count_matches_closed_form() {
    let config = FusionConfig::paper();
    let want: u64 = [
        (1, 8 * 1024, 4096),
        (1, 4096, 1024),
        (2, 1024, 4096),
        (1, 4096, 16384),
        (1, 16384, 4096),
    ]
    .iter()
    .map(|&(k, cin, cout)| (k * k * cin + 1) * cout)
    .sum();
    let shapes = layer_shapes(&config, ProjectorKind::Stf);
    assert_eq!(shapes.iter().map(|s| s.param_count()).sum::<u64>(), want);
    assert_eq!(want, 188_773_376);

    let tiny = FusionConfig::tiny();
    let params = ModuleParams::init(&tiny, ProjectorKind::Stf);
    let closed: u64 = layer_shapes(&tiny, ProjectorKind::Stf).iter().map(|s| s.param_count()).sum();
    assert_eq!(params.param_count(), closed);
}

#[test]
fn paper_layer_shapes() {
    let config = FusionConfig::paper();
    let shapes = layer_shapes(&config, ProjectorKind::Stf);
    let got: Vec<_> = shapes
        .iter()
        .map(|s| (s.weight_shape(), s.out_h, s.out_w))
        .collect();
    assert_eq!(
        got,
        vec![
            (vec![1, 1, 8192, 4096], 24, 24),
            (vec![1, 1, 4096, 1024], 24, 24),
            (vec![2, 2, 1024, 4096], 12, 12),
            (vec![1, 1, 4096, 16384], 12, 12),
            (vec![1, 1, 16384, 4096], 12, 12),
        ]
    );
    for kind in [ProjectorKind::AvgPool, ProjectorKind::TokenConcat] {
        let last = layer_shapes(&config, kind).pop().unwrap();
        assert_eq!((last.out_h * last.out_w, last.out_channels), (144, 4096));
    }
}

/// Full-size forward pass, about 90 GFLOP. Run with `--release -- --ignored`.
#[test]
#[ignore]
fn paper_config_end_to_end() {
    let config = FusionConfig::paper();
    let params = ModuleParams::init(&config, ProjectorKind::Stf);
    let stack = random_stack(&config, 0);
    let tokens = projector_forward(&stack, &params, &config).unwrap();
    assert_eq!((tokens.len(), tokens.width()), (144, 4096));
    assert!(tokens.tensor().is_finite());
}
