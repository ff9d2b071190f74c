use dynaquant::data::{sample_batch, synthetic_dataset, Image, SyntheticSpec};
use dynaquant::model::ModelConfig;
use dynaquant::params::ParamRole;
use dynaquant::quant::GradientMode;
use dynaquant::train::{bits_loss, total_loss, TrainConfig, Trainer};
use dynaquant::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        channels: 8,
        latent_channels: 8,
        ..ModelConfig::default()
    }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        crop_size: 32,
        steps,
        ..TrainConfig::default()
    }
}

fn images(count: usize) -> Vec<Image> {
    synthetic_dataset(&SyntheticSpec {
        count,
        size: 32,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

#[test]
fn bits_loss_stays_within_candidate_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let bits = [4, 6, 8];
    for _ in 0..500 {
        let (b, l) = (rng.random_range(1..4), rng.random_range(1..6));
        let mut data = Vec::new();
        for _ in 0..b * l {
            let row: Vec<f64> = (0..3).map(|_| rng.random::<f64>() + 1e-12).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        let p = Tensor::new(&[b, l, 3], data).unwrap();
        let v = bits_loss(&p, &bits).unwrap();
        assert!((4.0 - 1e-12..=8.0 + 1e-12).contains(&v));
    }
}

#[test]
fn total_loss_worked_examples() {
    assert!((total_loss(1.0, 0.5, 8.0, 0.01, 0.001).unwrap() - 1.013).abs() < 1e-12);
    assert_eq!(total_loss(0.7, 2.0, 4.0, 0.1, 0.0).unwrap(), total_loss(0.7, 2.0, 10.0, 0.1, 0.0).unwrap());
    assert!((total_loss(0.7, 0.0, 6.0, 0.1, 0.5).unwrap() - 3.7).abs() < 1e-12);
    assert!(matches!(
        total_loss(f64::NAN, 0.0, 6.0, 0.1, 0.5),
        Err(dynaquant::Error::Numeric(_))
    ));
}

#[test]
fn every_learnable_group_receives_gradient() {
    let imgs = images(4);
    let mut t = Trainer::new(small_model(), small_train(1), &imgs).unwrap();
    let batch = t.sample(&imgs).unwrap();
    let grads = t.gradients(&batch).unwrap();
    let mut seen = std::collections::BTreeMap::<String, bool>::new();
    for (p, g) in t.model.store.iter().zip(&grads) {
        let key = match p.info.role {
            ParamRole::Entropy => p.info.name.clone(),
            role => format!("{role:?}"),
        };
        let nonzero = g.as_ref().is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
        *seen.entry(key).or_default() |= nonzero;
    }
    for group in ["Weight", "Bias", "QuantScale", "QuantZeroPoint", "Selector"] {
        assert_eq!(seen.get(group), Some(&true), "{group} got no gradient: {seen:?}");
    }
    let entropy: Vec<_> = seen.iter().filter(|(k, _)| !k.chars().next().unwrap().is_uppercase()).collect();
    assert_eq!(entropy.len(), 2, "{seen:?}");
    assert!(entropy.iter().all(|(_, &v)| v), "{seen:?}");
}

#[test]
fn same_seed_gives_identical_traces() {
    let imgs = images(4);
    let run = || {
        let mut t = Trainer::new(small_model(), small_train(15), &imgs).unwrap();
        t.fit(&imgs, 15, |_| {}).unwrap();
        t.trace
    };
    assert_eq!(run(), run());
}

#[test]
fn fixed_mode_trains_without_bits_term() {
    let imgs = images(4);
    let model = ModelConfig {
        dynamic: false,
        ..small_model()
    };
    let cfg = TrainConfig {
        gamma: 10.0,
        ..small_train(3)
    };
    let mut t = Trainer::new(model, cfg, &imgs).unwrap();
    t.fit(&imgs, 3, |_| {}).unwrap();
    for m in &t.trace {
        assert!(m.bits_loss.is_none());
        assert_eq!(m.avg_bits, 8.0);
        assert!((m.loss - (m.rate + 0.0067 * m.distortion)).abs() < 1e-3 * m.loss.abs());
    }
}

#[test]
fn overfits_a_single_crop() {
    let img = synthetic_dataset(&SyntheticSpec {
        count: 1,
        size: 64,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        crop_size: 64,
        ..small_train(500)
    };
    let mut t = Trainer::new(small_model(), cfg, &img).unwrap();
    let batch = sample_batch(&img, 1, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let first = t.train_step(&batch).unwrap().loss;
    let mut last = first;
    for _ in 1..500 {
        last = t.train_step(&batch).unwrap().loss;
    }
    assert!(last < first, "loss went from {first} to {last}");
}

#[test]
fn beta_ramp_interpolates_linearly() {
    let cfg = TrainConfig {
        mode: GradientMode::Dgm { beta: 2.0 },
        beta_ramp: Some(dynaquant::train::BetaRamp { to: 10.0, steps: 100 }),
        ..TrainConfig::default()
    };
    assert_eq!(cfg.mode_at(0), GradientMode::Dgm { beta: 2.0 });
    assert_eq!(cfg.mode_at(50), GradientMode::Dgm { beta: 6.0 });
    assert_eq!(cfg.mode_at(100), GradientMode::Dgm { beta: 10.0 });
    assert_eq!(cfg.mode_at(1000), GradientMode::Dgm { beta: 10.0 });
}
