//! Scalar abstraction shared by the analysis math.
//!
//! Everything that is plain arithmetic (physics budget, spectra, peak
//! fitting, limits) is written against [`Real`] so it runs on `f32` or
//! `f64`. The Monte Carlo generator and the frame format are `f64`/`f32`
//! concretely.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for finite inputs of `f32`/`f64`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Standard normal cumulative distribution.
pub fn normal_cdf<T: Real>(z: T) -> T {
    let z = z.to_f64_lossy();
    T::lit(0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2))
}

/// Standard normal upper tail, accurate far into the tail.
pub fn normal_sf<T: Real>(z: T) -> T {
    let z = z.to_f64_lossy();
    T::lit(0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn normal_pdf<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    (-(z * z) / two).exp() / (two * T::PI()).sqrt()
}

/// Probability mass of N(0,1) in `[a, b]`, computed on the side of the
/// distribution that avoids cancellation.
pub fn normal_interval<T: Real>(a: T, b: T) -> T {
    if a >= T::zero() {
        normal_sf(a) - normal_sf(b)
    } else if b <= T::zero() {
        normal_cdf(b) - normal_cdf(a)
    } else {
        T::one() - normal_cdf(a) - normal_sf(b)
    }
}

/// Two-sided standard normal quantile: the z with `P(|Z| < z) = cl`.
pub fn two_sided_z(cl: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::standard();
    n.inverse_cdf(0.5 * (1.0 + cl))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_matches_cdf_difference() {
        for &(a, b) in &[(-1.0, 1.0), (0.5, 2.0), (-3.0, -0.2), (-10.0, 10.0)] {
            let direct = normal_cdf(b) - normal_cdf(a);
            assert!((normal_interval(a, b) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn far_tail_interval_is_not_cancelled() {
        let p: f64 = normal_interval(9.0, 10.0);
        assert!(p > 0.0 && p < 2e-19);
    }

    #[test]
    fn two_sided_quantiles() {
        assert!((two_sided_z(0.997) - 2.9677).abs() < 1e-4);
        assert!((two_sided_z(0.6826894921370859) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pdf_normalisation_f32() {
        let v: f32 = normal_pdf(0.0);
        assert!((v - 0.398_942_3).abs() < 1e-6);
    }
}
