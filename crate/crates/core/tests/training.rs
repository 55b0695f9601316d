use mvsc_core::config::{ModelConfig, TrainConfig};
use mvsc_core::model::parameters;
use mvsc_core::scene::generate_scene;
use mvsc_core::train::train_toy;

fn setup(steps: usize) -> (Vec<mvsc_core::scene::SceneSample>, ModelConfig, TrainConfig) {
    let cfg = ModelConfig {
        channels: 8,
        seed: 5,
        ..ModelConfig::toy()
    };
    let scene = generate_scene(5, cfg.volume, cfg.num_classes, 3).unwrap();
    let train = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    (vec![scene], cfg, train)
}

#[test]
fn memorization_loss_keeps_falling() {
    let (data, cfg, train) = setup(200);
    let (_, log) = train_toy(&data, &cfg, &train).unwrap();
    let losses: Vec<f64> = log.steps.iter().map(|s| s.loss).collect();
    let smooth: Vec<f64> = losses
        .windows(10)
        .map(|w| w.iter().sum::<f64>() / 10.0)
        .collect();
    for (i, pair) in smooth.windows(2).enumerate().skip(50) {
        assert!(
            pair[1] <= pair[0] * 1.02,
            "smoothed loss rose at step {}: {} -> {}",
            i + 10,
            pair[0],
            pair[1]
        );
    }
    assert!(log.final_loss < losses[0] * 0.5);
}

#[test]
fn same_seed_same_run() {
    let (data, cfg, train) = setup(15);
    let (ma, la) = train_toy(&data, &cfg, &train).unwrap();
    let (mb, lb) = train_toy(&data, &cfg, &train).unwrap();
    assert_eq!(la, lb);
    assert_eq!(parameters(&ma), parameters(&mb));
}
