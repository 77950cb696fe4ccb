//! Benchmark fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odg_core::data::build_triplets;
use odg_core::engine::experiment::{toy_train_config, SyntheticTrack};
use odg_core::engine::TripletBatch;
use odg_core::engine::TrainConfig;
use odg_core::{FeatureMap, Model, ModelConfig, Tensor};

pub fn random_feature_map(shape: [usize; 4], seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    FeatureMap::from_vec(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).expect("valid shape")
}

pub fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![n, 3, size, size],
        (0..n * 3 * size * size).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .expect("valid shape")
}

/// Toy model, toy training config and one triplet batch of `batch` rows from
/// the synthetic source domain.
pub fn train_fixture(batch: usize) -> (Model, TrainConfig, TripletBatch) {
    let track = SyntheticTrack {
        n_per_class: 20,
        ..SyntheticTrack::default()
    };
    let data = track.prepare().expect("synthetic track");
    let model = Model::new(ModelConfig::toy(data.num_known, track.spec.image_size, 0)).expect("toy model");
    let triplets = build_triplets(&data.source.labels(), 0, 5, 0).expect("triplets");
    let batch = TripletBatch::gather(&data.source, &triplets[..batch]).expect("batch");
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..toy_train_config()
    };
    (model, cfg, batch)
}
