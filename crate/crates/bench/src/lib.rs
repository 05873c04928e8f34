//! Shared fixtures for the benchmark suite.
//!
//! Benchmarks should all measure the same representative inputs, so the
//! generators live here rather than in the bench files: a latent-sized
//! pair of guidance directions, and a two-class analytic scenario with a
//! personalized variant for end-to-end sampling.

use prguide_core::{GaussianMixtureModel, GridShape, LatentGrid, MixtureComponent, NoisePredictor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A deterministic (text, consistency) direction pair of the given size.
pub fn guidance_pair(channels: usize, width: usize, height: usize) -> (LatentGrid, LatentGrid) {
    let shape = GridShape::new(channels, width, height).expect("valid benchmark shape");
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let text = LatentGrid::standard_normal(shape, &mut rng);
    let consistency = LatentGrid::standard_normal(shape, &mut rng).scale(1.6);
    (text, consistency)
}

/// A mixture with `k` components on the given shape, labels alternating
/// between two classes.
pub fn mixture(channels: usize, width: usize, height: usize, k: usize) -> GaussianMixtureModel {
    let shape = GridShape::new(channels, width, height).expect("valid benchmark shape");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let weight = 1.0 / k as f64;
    GaussianMixtureModel::new(
        (0..k)
            .map(|i| MixtureComponent {
                weight,
                mean: LatentGrid::standard_normal(shape, &mut rng).scale(1.4),
                variance: 0.4 + 0.1 * i as f64,
                label: (i % 2) as u32,
                subject: None,
            })
            .collect(),
    )
    .expect("valid benchmark mixture")
}

/// A base model and its personalized variant, sized like the toy scenario.
pub fn personalized_pair() -> (GaussianMixtureModel, GaussianMixtureModel) {
    let base = mixture(2, 4, 4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let subject_mean = LatentGrid::standard_normal(base.shape(), &mut rng);
    let personalized = base
        .make_personalized(subject_mean, 0.2, 0.3, 0, 0)
        .expect("valid personalization");
    (base, personalized)
}
