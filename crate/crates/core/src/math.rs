//! Transcendental functions: the platform's implementations when `std` is
//! available (noticeably faster than the portable ones), `libm` otherwise.

#[cfg(feature = "std")]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    x.tanh()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}
