//! Weight initialization helpers.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use super::Scalar;

/// Kaiming-uniform initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
///
/// This is the conventional default for convolution and linear weights with
/// leaky-ReLU-family gains folded in.
pub fn kaiming_uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    sample_uniform(rng, shape, bound)
}

/// Bias initialization matching the weight's fan-in bound.
pub fn uniform_bias<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    sample_uniform(rng, shape, bound)
}

/// Zero-filled tensor (used for output heads so models start as identity).
pub fn zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

fn sample_uniform<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<S> {
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.random_range(-bound..bound)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ArrayD<f64> = kaiming_uniform(&mut rng, &[64, 16, 3, 3], 16 * 9);
        let bound = 1.0 / (144f64).sqrt();
        assert!(w.iter().all(|&v| v.abs() < bound));
        // Not degenerate: values spread over the range.
        assert!(w.iter().any(|&v| v > bound * 0.5));
        assert!(w.iter().any(|&v| v < -bound * 0.5));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: ArrayD<f32> = kaiming_uniform(&mut r1, &[8, 8], 8);
        let b: ArrayD<f32> = kaiming_uniform(&mut r2, &[8, 8], 8);
        assert_eq!(a, b);
    }
}
