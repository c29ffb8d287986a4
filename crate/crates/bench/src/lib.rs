//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svdamage::catalog::{ImageCatalog, Phase, StreetViewImage};
use svdamage::eval::ConfusionMatrix;
use svdamage::Tensor;

/// `n` pre and `n` post images scattered over roughly 1 km.
pub fn random_catalog(n: usize, seed: u64) -> ImageCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let time = chrono::DateTime::from_timestamp(1_728_000_000, 0).expect("valid timestamp");
    let images = (0..2 * n).map(|i| StreetViewImage {
        image_id: format!("img-{i:06}"),
        phase: if i < n { Phase::Pre } else { Phase::Post },
        latitude: 27.9 + rng.random_range(0.0..0.01),
        longitude: -82.5 + rng.random_range(0.0..0.01),
        captured_at: time,
        uri: format!("{i}.png"),
    });
    ImageCatalog::from_images(images).0
}

/// Normalized-looking `[batch, size, size, 3]` input.
pub fn random_batch(batch: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[batch, size, size, 3], |_| rng.random_range(-2.0..2.0))
}

pub fn random_confusion(classes: usize, samples: usize, seed: u64) -> ConfusionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ConfusionMatrix::new(classes);
    for _ in 0..samples {
        m.record(rng.random_range(0..classes), rng.random_range(0..classes))
            .expect("class in range");
    }
    m
}
