mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use odg_core::engine::experiment::toy_train_config;
use odg_core::engine::{train_step, Sgd, TripletBatch};
use odg_core::{Architecture, Model, ModelConfig, NoiseSpec, OpenOptions, Tensor};

use common::images;

fn max_posterior_diff(a: &[odg_core::PosteriorVector], b: &[odg_core::PosteriorVector]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(p, q)| p.probs().iter().zip(q.probs()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Sets the synthesis net to copy `(mu1, sd1)` to its output.
fn make_echo(model: &mut Model) {
    let c = model.ssnet.channels();
    let set = |model: &mut Model, id, rows: usize, cols: usize| {
        let mut w = vec![0.0; rows * cols];
        for i in 0..2 * c {
            w[i * cols + i] = 1.0;
        }
        *model.params.get_mut(id) = Tensor::new(vec![rows, cols], w).unwrap();
    };
    let (fc1, fc2) = (model.ssnet.fc1.weight, model.ssnet.fc2.weight);
    set(model, fc1, 3 * c, 4 * c);
    set(model, fc2, 2 * c, 3 * c);
    for b in [model.ssnet.fc1.bias, model.ssnet.fc2.bias] {
        model.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

#[test]
fn echo_synthesis_leaves_features_unchanged() {
    let mut model = Model::new(ModelConfig::toy(4, 16, 3)).unwrap();
    make_echo(&mut model);
    // Seam features are post-ReLU, so the echoed statistics pass the output
    // ReLU untouched. A vanishing epsilon stands in for zero and keeps dead
    // channels at 0 / tiny = 0.
    model.config.epsilon = 1e-300;
    let x = images(5, 16, 1);
    let clean = model.forward_clean(&x).unwrap();
    let styled = model.forward_styled(&x, &x, None, NoiseSpec::new(0.0, 0.0).unwrap(), 0).unwrap();
    assert!(max_posterior_diff(&clean, &styled) < 1e-12);
}

#[test]
fn unit_alpha_open_sample_is_the_first_constituent() {
    let model = Model::new(ModelConfig::toy(4, 16, 5)).unwrap();
    let (x1, x3) = (images(4, 16, 2), images(4, 16, 3));
    let clean = model.forward_clean(&x1).unwrap();
    let opts = OpenOptions {
        alpha_override: Some(1.0),
        ..OpenOptions::default()
    };
    let (open, alpha) = model.forward_open(&x1, &x3, None, opts).unwrap();
    assert!(alpha.data().iter().all(|&a| a == 1.0));
    assert!(max_posterior_diff(&clean, &open) < 1e-12);
}

#[test]
fn one_step_updates_every_module() {
    let mut model = Model::new(ModelConfig::toy(3, 16, 7)).unwrap();
    let before = model.params.clone();
    let batch = TripletBatch {
        x1: images(6, 16, 10),
        x2: images(6, 16, 11),
        x3: images(6, 16, 12),
        y1: vec![0, 1, 2, 0, 1, 2],
        y3: vec![1, 2, 0, 2, 0, 1],
    };
    let cfg = toy_train_config();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses = train_step(&mut model, &mut opt, &batch, &cfg, &mut rng, 0).unwrap();
    assert!(losses.ce > 0.0 && losses.sm >= 0.0);
    for prefix in ["encoder.", "head.", "ssnet.", "fanet."] {
        let moved = before
            .entries()
            .iter()
            .zip(model.params.entries())
            .filter(|(a, _)| a.trainable && a.name.starts_with(prefix))
            .any(|(a, b)| a.value != b.value);
        assert!(moved, "no trainable {prefix}* parameter changed");
    }
}

#[test]
fn toy_and_reference_backbones_are_interchangeable() {
    for arch in [Architecture::Toy, Architecture::Resnet18] {
        let mut cfg = ModelConfig::toy(3, 32, 1);
        cfg.arch = arch;
        let model = Model::new(cfg).unwrap();
        let (x1, x3) = (images(2, 32, 4), images(2, 32, 5));
        let clean = model.forward_clean(&x1).unwrap();
        let styled = model.forward_styled(&x1, &x1, None, NoiseSpec::default(), 1).unwrap();
        let (open, alpha) = model.forward_open(&x1, &x3, None, OpenOptions::default()).unwrap();
        for p in clean.iter().chain(&styled).chain(&open) {
            assert_eq!(p.len(), 4, "{arch:?}");
        }
        assert_eq!(alpha.shape(), &[2, model.encoder.embed_dim()]);
        assert_eq!(model.embeddings(&x1).unwrap().shape(), &[2, model.encoder.embed_dim()]);
    }
}

#[test]
fn mismatched_pairs_are_rejected() {
    let model = Model::new(ModelConfig::toy(3, 16, 1)).unwrap();
    let x = images(2, 16, 1);
    let same: &[usize] = &[0, 1];
    let other: &[usize] = &[1, 1];
    assert!(model.forward_styled(&x, &x, Some((same, other)), NoiseSpec::default(), 0).is_err());
    assert!(model.forward_open(&x, &x, Some((same, other)), OpenOptions::default()).is_err());
    assert!(model.forward_clean(&images(2, 8, 1)).is_err());
}
