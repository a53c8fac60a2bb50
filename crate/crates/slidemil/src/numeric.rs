//! Float abstraction shared by the model and training code.
//!
//! Heavy training runs in f32 (roughly twice the gemm throughput on this
//! class of hardware), while tests that pin tight tolerances run the same
//! code in f64. `Real` is the single bound either path needs.

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Scalar type the model and optimizer are generic over.
pub trait Real: NdFloat + FromPrimitive + Default + std::iter::Sum {
    fn standard_normal<R: Rng>(rng: &mut R) -> Self;
    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Real for f32 {
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng>(rng: &mut R, lo: Self, hi: Self) -> Self {
        rng.random_range(lo..hi)
    }
}

/// Shorthand for lossy construction from f64, used for constants in generic
/// code.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x: f64 = Real::uniform(&mut rng, -0.25, 0.25);
            assert!((-0.25..0.25).contains(&x));
        }
    }

    #[test]
    fn cast_round_trips_simple_constants() {
        assert_eq!(c::<f64>(1.5), 1.5);
        assert_eq!(c::<f32>(0.25), 0.25f32);
    }
}
