//! Shared fixtures for the criterion benchmarks.

use srde_core::{Rng, Tensor};

/// Uniform `[-1, 1)` tensor of shape `(1, c, h, w)`.
pub fn random_volume(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..c * h * w).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    Tensor::new(1, c, h, w, data).expect("finite random data")
}
