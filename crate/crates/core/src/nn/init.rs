//! Seeded weight initializers. Every builder takes the caller's RNG so whole
//! models are reproducible from one seed.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::store::TensorD;

/// Zero-mean Gaussian with the given standard deviation.
pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> TensorD {
    let dist = Normal::new(0.0, std).expect("valid std");
    TensorD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// He initialization for convolution kernels `(k, c, kh, kw)`: Gaussian with
/// `std = sqrt(2 / (c·kh·kw))`, matched to ReLU fan-in.
pub fn kaiming_conv(k: usize, c: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> TensorD {
    let fan_in = (c * kh * kw) as f64;
    normal(&[k, c, kh, kw], (2.0 / fan_in).sqrt(), rng)
}

/// Glorot uniform initialization for dense layers `(fan_in, fan_out)`.
pub fn xavier_linear(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> TensorD {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    TensorD::from_shape_simple_fn(IxDyn(&[fan_in, fan_out]), || dist.sample(rng))
}

/// Embedding-table initialization: Gaussian with std 0.02.
pub fn embedding(rows: usize, cols: usize, rng: &mut impl Rng) -> TensorD {
    normal(&[rows, cols], 0.02, rng)
}

pub fn zeros(shape: &[usize]) -> TensorD {
    TensorD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> TensorD {
    TensorD::ones(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let wa = kaiming_conv(8, 3, 3, 3, &mut a);
        let wb = kaiming_conv(8, 3, 3, 3, &mut b);
        assert_eq!(wa.shape(), &[8, 3, 3, 3]);
        assert_eq!(wa, wb);

        let l = xavier_linear(16, 4, &mut a);
        assert_eq!(l.shape(), &[16, 4]);
        let limit = (6.0 / 20.0f64).sqrt();
        assert!(l.iter().all(|v| v.abs() <= limit));

        let e = embedding(5, 7, &mut a);
        assert_eq!(e.shape(), &[5, 7]);
    }

    #[test]
    fn kaiming_scale_tracks_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = kaiming_conv(64, 64, 3, 3, &mut rng);
        let var = w.mapv(|v| v * v).mean().unwrap();
        let expected = 2.0 / (64.0 * 9.0);
        assert!((var - expected).abs() < expected * 0.2, "variance {var}");
    }
}
