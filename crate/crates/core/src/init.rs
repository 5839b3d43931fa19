use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Fan-in and fan-out used by [`glorot_init`].
///
/// Matrices `[in, out]` use their extents directly. Rank-3 Chebyshev kernels
/// `[K, out, in]` count the K taps as part of both fans.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (*n, *n),
        [a, b] => (*a, *b),
        [k, out, inp, ..] => (k * inp, k * out),
        [] => (1, 1),
    }
}

/// Uniform Glorot initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init(shape: &[usize], seed: u64) -> Tensor {
    glorot_init_with(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn glorot_init_with<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = fans(shape);
    let bound = glorot_bound(fan_in, fan_out);
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bounded_and_seed_sensitive() {
        let a = glorot_init(&[3, 4, 5], 7);
        let b = glorot_init(&[3, 4, 5], 7);
        let c = glorot_init(&[3, 4, 5], 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = glorot_bound(15, 12);
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
