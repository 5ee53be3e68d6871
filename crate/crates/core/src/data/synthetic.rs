//! Seeded in-memory fixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

use super::Dataset;

/// Zero tensor of shape `(1, 1, h, w)` with a single 1 at the 1-based
/// position `(row, col)`.
pub fn one_pixel<T: Scalar>(h: usize, w: usize, row: usize, col: usize) -> Tensor4<T> {
    let mut t = Tensor4::zeros([1, 1, h, w]);
    t.set(0, 0, row - 1, col - 1, T::one());
    t
}

/// Uniform entries in `[0, 1)`.
pub fn nonnegative<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor4<T> {
    Tensor4::random_uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Standard normal entries.
pub fn gaussian<T: Scalar>(shape: [usize; 4], seed: u64) -> Tensor4<T> {
    Tensor4::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// A learnable classification set. Each class has a smooth template in
/// `[0, 1]` per channel, a sum of three low-frequency waves, so that crops and
/// flips keep it recognizable; samples add uniform noise of the given
/// amplitude and are clamped to `[0, 1]`. Labels cycle through the classes.
pub fn class_images(n: usize, classes: usize, shape: [usize; 3], noise: f32, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = shape;
    let len = c * h * w;
    let tau = std::f32::consts::TAU;
    let templates: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let waves: Vec<[f32; 4]> = (0..3 * c)
                .map(|_| {
                    [
                        rng.random_range(-2.0..2.0) * tau / h as f32,
                        rng.random_range(-2.0..2.0) * tau / w as f32,
                        rng.random::<f32>() * tau,
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            let mut t = Vec::with_capacity(len);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v: f32 = waves[3 * ch..3 * ch + 3]
                            .iter()
                            .map(|[fy, fx, ph, amp]| amp * (fy * y as f32 + fx * x as f32 + ph).sin())
                            .sum();
                        t.push((0.5 + v / 6.0).clamp(0.0, 1.0));
                    }
                }
            }
            t
        })
        .collect();
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        data.extend(templates[k].iter().map(|&t| (t + noise * (rng.random::<f32>() - 0.5) * 2.0).clamp(0.0, 1.0)));
    }
    Dataset::new(Tensor4::from_vec([n, c, h, w], data)?, labels, classes)
}
