#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odg_core::data::{Dataset, Sample};
use odg_core::Tensor;

pub fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * 3 * size * size;
    Tensor::new(vec![n, 3, size, size], (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// `classes` blobs centred at distinct constant images, `per_class` samples
/// each with small pixel noise.
pub fn blobs(classes: usize, per_class: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for label in 0..classes {
        let centre = -1.0 + 2.0 * label as f64 / (classes.max(2) - 1) as f64;
        for _ in 0..per_class {
            let data = (0..3 * size * size).map(|_| centre + rng.gen_range(-0.1..0.1)).collect();
            samples.push(Sample {
                id: samples.len() as u64,
                image: Tensor::new(vec![3, size, size], data).unwrap(),
                label,
                domain: 0,
            });
        }
    }
    Dataset::new(samples).unwrap()
}
