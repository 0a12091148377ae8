//! Scalar helpers shared by quantization and statistics.
//!
//! Everything here is generic over [`num_traits::Float`] so the same rounding
//! and interpolation rules apply whether the caller works in `f32` or `f64`.
//! The emulator itself uses [`crate::Scale`] (`f64`).

use num_traits::Float;

/// Round to the nearest integer, ties to the even neighbour.
///
/// ```
/// use macfi::num::round_half_even;
/// assert_eq!(round_half_even(2.5_f64), 2.0);
/// assert_eq!(round_half_even(3.5_f32), 4.0);
/// assert_eq!(round_half_even(-2.5_f64), -2.0);
/// ```
pub fn round_half_even<T: Float>(x: T) -> T {
    let floor = x.floor();
    let diff = x - floor;
    let half = T::from(0.5).unwrap();
    if diff < half {
        floor
    } else if diff > half {
        floor + T::one()
    } else {
        let two = T::one() + T::one();
        if (floor / two).floor() * two == floor {
            floor
        } else {
            floor + T::one()
        }
    }
}

/// Round-half-even then clamp into `[lo, hi]`; NaN maps to `lo`.
pub fn round_clamp<T: Float>(x: T, lo: i32, hi: i32) -> i32 {
    let r = round_half_even(x);
    let lo_t = T::from(lo).unwrap();
    let hi_t = T::from(hi).unwrap();
    if r.is_nan() || r < lo_t {
        lo
    } else if r > hi_t {
        hi
    } else {
        r.to_i32().unwrap()
    }
}

/// Quantile of an ascending-sorted slice using linear interpolation between
/// order statistics: `h = (n - 1) * p`, result `x[floor h] + (h - floor h) *
/// (x[floor h + 1] - x[floor h])`. This is the "type 7" estimator used by
/// numpy's default and R's `quantile`.
///
/// Returns `None` for an empty slice or `p` outside `[0, 1]`.
pub fn quantile_sorted<T: Float>(sorted: &[T], p: T) -> Option<T> {
    if sorted.is_empty() || !(p >= T::zero() && p <= T::one()) {
        return None;
    }
    let n1 = T::from(sorted.len() - 1).unwrap();
    let h = n1 * p;
    let lo = h.floor();
    let lo_idx = lo.to_usize().unwrap();
    let frac = h - lo;
    if lo_idx + 1 >= sorted.len() || frac == T::zero() {
        return Some(sorted[lo_idx.min(sorted.len() - 1)]);
    }
    Some(sorted[lo_idx] + frac * (sorted[lo_idx + 1] - sorted[lo_idx]))
}
