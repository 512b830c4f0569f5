use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicewise::data::{generate_dataset, GeneratorParams};
use slicewise::network::{
    build_network, network_forward, AttentionKind, EmbeddingMode, Network, UNetConfig,
};
use slicewise::train::{run_training, train_loop, RunConfig, TrainConfig, CHECKPOINT_DIR};
use slicewise::Tensor;

fn input(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn small_config(seed: u64) -> UNetConfig {
    UNetConfig {
        base_channels: 4,
        seed,
        ..UNetConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_starts_as_identity(
        seed in any::<u64>(),
        placement in prop::sample::select(vec!["010", "101", "111"]),
        kind in prop::sample::select(vec![AttentionKind::Rsa, AttentionKind::NonLocal]),
        embedding in prop::sample::select(vec![EmbeddingMode::Off, EmbeddingMode::QueryKeyValue]),
    ) {
        let x = input(seed, &[1, 3, 8, 8, 8]);
        let plain = network_forward(&build_network::<f32>(&small_config(seed)).unwrap(), &x).unwrap();
        let config = UNetConfig { embedding, ..small_config(seed) }.with_blocks(kind, placement).unwrap();
        let with_blocks = network_forward(&build_network::<f32>(&config).unwrap(), &x).unwrap();
        prop_assert!(with_blocks.max_abs_diff(&plain) <= 1e-6);
    }
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let config = UNetConfig {
        embedding: EmbeddingMode::QueryKey,
        ..small_config(4)
    }
    .with_blocks(AttentionKind::Rsa, "111")
    .unwrap();
    let mut net = build_network::<f32>(&config).unwrap();
    for p in net.params_mut() {
        if p.name.contains("alpha") {
            p.value = Tensor::scalar(0.5);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    net.save_checkpoint(dir.path()).unwrap();
    let loaded = Network::<f32>::load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config(), net.config());
    let x = input(9, &[2, 3, 8, 8, 8]);
    assert_eq!(
        network_forward(&loaded, &x).unwrap(),
        network_forward(&net, &x).unwrap()
    );
}

#[test]
fn losses_stay_finite_and_fall() {
    let params = GeneratorParams {
        seed: 1,
        n: 4,
        lesion_rate: 2e-3,
        channels: 3,
    };
    let samples = generate_dataset(&params, [32, 32, 16]).unwrap();
    let config = TrainConfig {
        iterations: 40,
        batch_size: 2,
        crop_size: [16, 16, 8],
        ..TrainConfig::default()
    };
    let mut net = build_network::<f32>(
        &small_config(0)
            .with_blocks(AttentionKind::Rsa, "010")
            .unwrap(),
    )
    .unwrap();
    let mut seen = 0;
    let history = train_loop(&mut net, &samples, &config, |_, loss| {
        assert!(loss.is_finite());
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 40);
    assert!(history.losses.iter().all(|l| l.is_finite()));
    assert!(history.window_mean(30..40) < history.window_mean(0..10));
}

#[test]
fn run_directory_has_all_artifacts() {
    let params = GeneratorParams {
        seed: 2,
        n: 3,
        lesion_rate: 2e-3,
        channels: 3,
    };
    let samples = generate_dataset(&params, [16, 16, 8]).unwrap();
    let mut config = RunConfig {
        network: small_config(0)
            .with_blocks(AttentionKind::Rsa, "010")
            .unwrap(),
        n_train: 2,
        ..RunConfig::default()
    };
    config.train.iterations = 2;
    config.train.batch_size = 1;
    config.train.crop_size = [8, 8, 8];
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_training(&samples, &config, dir.path(), |_, _| {}).unwrap();
    assert_eq!(outcome.history.losses.len(), 2);
    assert_eq!(outcome.train_report.per_sample.len(), 2);
    assert_eq!(outcome.test_report.per_sample.len(), 1);
    for file in [
        "config.json",
        "history.csv",
        "metrics_train.json",
        "metrics_test.json",
    ] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
    assert!(Network::<f32>::load_checkpoint(&dir.path().join(CHECKPOINT_DIR)).is_ok());
}
