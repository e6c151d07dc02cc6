//! Forward/adjoint kernels used by the autograd graph.

pub mod conv;
pub mod norm;
pub mod pool;

use crate::scalar::Real;

/// In-place softmax of every contiguous row of length `width`, with
/// max-subtraction.
pub fn softmax_rows<T: Real>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Log-sum-exp of one row, stable for large magnitudes.
pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

#[inline]
pub fn smooth_l1<T: Real>(d: T) -> T {
    let a = d.abs();
    if a <= T::one() {
        T::lit(0.5) * d * d
    } else {
        a - T::lit(0.5)
    }
}

#[inline]
pub fn smooth_l1_grad<T: Real>(d: T) -> T {
    d.max(-T::one()).min(T::one())
}
