//! Weight initializers. Weight matrices use the `[d_in, d_out]` layout, so
//! the fan-in of a weight is its first dimension.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::tensor::Tensor;

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * std;
        }
    })
}

/// Uniform(−bound, bound).
pub fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// Upper bound of the leaky-ReLU Kaiming-uniform distribution:
/// `gain · sqrt(3 / fan_in)` with `gain = sqrt(2 / (1 + a²))`.
/// For `a = √5` this reduces to `sqrt(1 / fan_in)`.
pub fn kaiming_uniform_bound(fan_in: usize, a: f64) -> f64 {
    let gain = (2.0 / (1.0 + a * a)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

pub fn kaiming_uniform<R: Rng>(shape: &[usize], a: f64, rng: &mut R) -> Tensor {
    uniform(shape, kaiming_uniform_bound(shape[0], a), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_sqrt5_bound_is_inverse_sqrt_fan_in() {
        let b = kaiming_uniform_bound(768, 5f64.sqrt());
        assert!((b - (1.0f64 / 768.0).sqrt()).abs() < 1e-15);
        assert!((b - 0.036084).abs() < 1e-6);
    }

    #[test]
    fn trunc_normal_respects_cutoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trunc_normal(&[10_000], 0.02, &mut rng);
        assert!(t.max_abs() <= 0.04);
        let mean = t.data().iter().sum::<f64>() / 1e4;
        assert!(mean.abs() < 1e-3);
    }
}
