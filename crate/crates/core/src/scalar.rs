use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for embeddings and cluster math: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Width of the inner accumulation block in [`dot`].
const LANE_BLOCK: usize = 16;

/// Dot product accumulated in `T` over fixed 16-element blocks, with the
/// block partial sums reduced in `f64`. Evaluation order is fixed, so the
/// result is identical no matter which thread computes it.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut total = 0.0f64;
    for (ca, cb) in a.chunks(LANE_BLOCK).zip(b.chunks(LANE_BLOCK)) {
        let mut block = T::zero();
        for (x, y) in ca.iter().zip(cb) {
            block = block + *x * *y;
        }
        total += block.as_f64();
    }
    total
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_short_vectors() {
        let a = [1.0f32, 2.0, 3.0];
        let b = [4.0f32, 5.0, 6.0];
        assert_eq!(dot(&a, &b), 32.0);
        let a = [0.5f64; 40];
        assert_eq!(dot(&a, &a), 10.0);
    }

    #[test]
    fn squared_distance_basic() {
        assert_eq!(squared_distance(&[0.0f32, 0.0], &[3.0, 4.0]), 25.0);
    }
}
