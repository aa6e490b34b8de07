//! Floating-point abstraction shared by the f64 reference path and the f32
//! training path, plus the handful of small dense kernels the low-rank
//! algebra needs (everything here operates on `l × l` matrices).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};

use crate::error::{Error, Result};

pub trait Real:
    Float
    + FloatConst
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// `ln(2π)`.
pub fn ln_2pi<T: Real>() -> T {
    T::of((2.0 * std::f64::consts::PI).ln())
}

/// Numerically stable `log Σ exp(xᵢ)`. Returns `-inf` for an empty slice or
/// when every entry is `-inf`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else if x < T::of(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
#[inline]
pub fn softplus_inv<T: Real>(y: T) -> T {
    if y > T::of(20.0) {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place lower Cholesky factorization of a symmetric positive definite
/// row-major `dim × dim` matrix. The strict upper triangle is zeroed.
pub fn cholesky_in_place<T: Real>(a: &mut [T], dim: usize) -> Result<()> {
    debug_assert_eq!(a.len(), dim * dim);
    for j in 0..dim {
        let mut diag = a[j * dim + j];
        for k in 0..j {
            diag -= a[j * dim + k] * a[j * dim + k];
        }
        if !(diag > T::zero()) || !diag.is_finite() {
            return Err(Error::Numerical(format!(
                "Cholesky pivot {j} is {diag} (matrix not positive definite)"
            )));
        }
        let ljj = diag.sqrt();
        a[j * dim + j] = ljj;
        for i in (j + 1)..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= a[i * dim + k] * a[j * dim + k];
            }
            a[i * dim + j] = s / ljj;
        }
        for k in (j + 1)..dim {
            a[j * dim + k] = T::zero();
        }
    }
    Ok(())
}

/// Solves `L y = b` in place for lower-triangular `L`.
pub fn forward_sub<T: Real>(l: &[T], dim: usize, b: &mut [T]) {
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * dim + k] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
}

/// Solves `Lᵀ y = b` in place for lower-triangular `L`.
pub fn backward_sub_transposed<T: Real>(l: &[T], dim: usize, b: &mut [T]) {
    for i in (0..dim).rev() {
        let mut s = b[i];
        for k in (i + 1)..dim {
            s -= l[k * dim + i] * b[k];
        }
        b[i] = s / l[i * dim + i];
    }
}

/// Solves `(L Lᵀ) y = b` in place.
pub fn cholesky_solve<T: Real>(l: &[T], dim: usize, b: &mut [T]) {
    forward_sub(l, dim, b);
    backward_sub_transposed(l, dim, b);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_of_known_matrix() {
        let mut a = vec![4.0, 2.0, 2.0, 3.0];
        cholesky_in_place(&mut a, 2).unwrap();
        assert_eq!(a, vec![2.0, 0.0, 1.0, 2f64.sqrt()]);
        let mut b = vec![6.0, 5.0];
        cholesky_solve(&a, 2, &mut b);
        // [[4,2],[2,3]] [1,1] = [6,5]
        assert!((b[0] - 1.0).abs() < 1e-14 && (b[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = vec![1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            cholesky_in_place(&mut a, 2),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn log_sum_exp_is_shift_invariant() {
        let xs = [1000.0, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.3, 1.0, 5.0, 50.0] {
            let x: f64 = softplus_inv(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0));
        }
    }
}
