//! Scalar kernels used in the hot loops. With the `std` feature the
//! platform `exp` is used; otherwise the portable `libm` one.

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(x)
    }
}

/// `tanh` through a single `exp`. The absolute error stays at a few ulps of
/// 1; the relative error grows near zero, which no caller depends on.
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    let a = libm::fabs(x);
    if a > 22.0 {
        return libm::copysign(1.0, x);
    }
    let t = exp(-2.0 * a);
    libm::copysign((1.0 - t) / (1.0 + t), x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_close_to_reference() {
        let mut x = -30.0;
        while x <= 30.0 {
            assert!((tanh(x) - libm::tanh(x)).abs() < 4e-16, "{x}");
            x += 0.0137;
        }
        assert_eq!(tanh(0.0), 0.0);
        assert!(tanh(f64::NAN).is_nan());
        assert_eq!(tanh(f64::INFINITY), 1.0);
    }

    #[test]
    fn sigmoid_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0) < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
