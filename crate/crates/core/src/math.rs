//! Small float helpers usable from `no_std`.

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut r = a - two_pi * libm::floor((a + core::f64::consts::PI) / two_pi);
    // floor keeps r in [-pi, pi) up to rounding; nudge the boundary case.
    if r >= core::f64::consts::PI {
        r -= two_pi;
    }
    if r < -core::f64::consts::PI {
        r += two_pi;
    }
    r
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn atan2(y: f64, x: f64) -> f64 {
    libm::atan2(y, x)
}

#[inline]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

/// Rotate `(x, y)` by angle `phi`.
pub fn rotate(x: f64, y: f64, phi: f64) -> (f64, f64) {
    let (c, s) = (cos(phi), sin(phi));
    (c * x - s * y, s * x + c * y)
}

/// Euclidean distance between two 2-D points.
pub fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    hypot(a.0 - b.0, a.1 - b.1)
}

/// `n` values linearly spaced on `[lo, hi]` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> alloc::vec::Vec<f64> {
    assert!(n >= 2);
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}
