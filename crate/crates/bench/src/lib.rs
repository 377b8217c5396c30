//! Deterministic inputs shared by the kernel benchmarks.

use vist_core::Tensor;

/// Smooth pseudo-random values in `[-1, 1]`, reproducible without an RNG.
pub fn wave(shape: &[usize], phase: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |i| (i as f32 * 0.618_034 + phase).sin())
}

/// Same as [`wave`] in `f64`, flattened.
pub fn wave_f64(len: usize, phase: f64) -> Vec<f64> {
    (0..len).map(|i| (i as f64 * 0.618_034 + phase).sin()).collect()
}
