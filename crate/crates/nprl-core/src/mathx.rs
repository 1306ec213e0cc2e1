//! Float math shims.
//!
//! Transcendentals (`exp`, `ln`, trig) always go through `libm` so results are
//! bit-identical across platforms and across std/no_std builds. Operations the
//! IEEE standard requires to be correctly rounded (`sqrt`, rounding) use the
//! hardware path when `std` is available and `libm` otherwise; both round the
//! same way, so determinism is unaffected.

pub fn exp32(x: f32) -> f32 {
    libm::expf(x)
}

pub fn ln32(x: f32) -> f32 {
    libm::logf(x)
}

pub fn sin32(x: f32) -> f32 {
    libm::sinf(x)
}

pub fn cos32(x: f32) -> f32 {
    libm::cosf(x)
}

pub fn tan32(x: f32) -> f32 {
    libm::tanf(x)
}

pub fn atan2_32(y: f32, x: f32) -> f32 {
    libm::atan2f(y, x)
}

pub fn pow32(x: f32, y: f32) -> f32 {
    libm::powf(x, y)
}

pub fn exp64(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln64(x: f64) -> f64 {
    libm::log(x)
}

pub fn pow64(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

pub fn cos64(x: f64) -> f64 {
    libm::cos(x)
}

pub fn sin64(x: f64) -> f64 {
    libm::sin(x)
}

#[cfg(feature = "std")]
pub fn sqrt32(x: f32) -> f32 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
pub fn sqrt32(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[cfg(feature = "std")]
pub fn sqrt64(x: f64) -> f64 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
pub fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

#[cfg(feature = "std")]
pub fn floor32(x: f32) -> f32 {
    x.floor()
}

#[cfg(not(feature = "std"))]
pub fn floor32(x: f32) -> f32 {
    libm::floorf(x)
}

#[cfg(feature = "std")]
pub fn round32(x: f32) -> f32 {
    x.round()
}

#[cfg(not(feature = "std"))]
pub fn round32(x: f32) -> f32 {
    libm::roundf(x)
}

/// Euclidean remainder into [0, m). Used for heading wrap-around.
pub fn wrap32(x: f32, m: f32) -> f32 {
    let r = x % m;
    if r < 0.0 {
        r + m
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_range() {
        assert_eq!(wrap32(370.0, 360.0), 10.0);
        assert_eq!(wrap32(-15.0, 360.0), 345.0);
        assert_eq!(wrap32(0.0, 360.0), 0.0);
    }

    #[test]
    fn sqrt_is_exact_on_squares() {
        assert_eq!(sqrt64(25.0), 5.0);
        assert_eq!(sqrt32(16.0), 4.0);
    }
}
