//! Input generators shared by the benchmarks.

use convgp::{Extent, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` images with entries uniform in `[-1, 1)`.
pub fn random_images(n: usize, channels: usize, dims: &[usize], seed: u64) -> Vec<Image> {
    let extent = Extent::new(dims.to_vec()).expect("valid extent");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..channels * extent.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            Image::new(channels, extent.clone(), data).expect("matching length")
        })
        .collect()
}
