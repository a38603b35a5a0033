use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor4};

/// Normal draws with standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(dims: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor4<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    Tensor4::from_fn(dims, |_| T::from_f64(normal.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_and_determinism() {
        let a: Tensor4<f64> = he_normal([64, 32, 3, 3], 288, &mut ChaCha8Rng::seed_from_u64(1));
        let b: Tensor4<f64> = he_normal([64, 32, 3, 3], 288, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        let var = a.dot(&a) / a.len() as f64;
        assert!((var * 288.0 / 2.0 - 1.0).abs() < 0.05, "{var}");
    }
}
