//! Special functions used by the PSF and edge models.
//!
//! The error function and the Bessel functions of the first kind come from
//! `libm` (FreeBSD msun rational/asymptotic approximations, accurate to a few
//! ulp). The Airy helpers below add the removable-singularity handling the
//! fitting code needs at the pattern center.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// First zero of J₁, i.e. the radius (in scale units) of the first dark Airy ring.
pub const AIRY_FIRST_ZERO: f64 = 3.831_705_970_207_512;

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal cumulative distribution function.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

#[inline]
pub fn bessel_j0(x: f64) -> f64 {
    libm::j0(x)
}

#[inline]
pub fn bessel_j1(x: f64) -> f64 {
    libm::j1(x)
}

/// Airy amplitude `2·J₁(ρ)/ρ`, equal to 1 at the origin.
pub fn airy_amplitude(rho: f64) -> f64 {
    let rho = rho.abs();
    if rho < 1e-4 {
        // 2J₁(ρ)/ρ = 1 − ρ²/8 + ρ⁴/192 − …
        let r2 = rho * rho;
        1.0 - r2 / 8.0 + r2 * r2 / 192.0
    } else {
        2.0 * bessel_j1(rho) / rho
    }
}

/// Airy intensity `[2·J₁(ρ)/ρ]²`.
#[inline]
pub fn airy_intensity(rho: f64) -> f64 {
    let a = airy_amplitude(rho);
    a * a
}

/// `(d/dρ [2J₁(ρ)/ρ]) / ρ = −2·J₂(ρ)/ρ²`, finite at ρ = 0 where it equals −1/4.
pub fn airy_amplitude_slope_over_rho(rho: f64) -> f64 {
    let rho = rho.abs();
    if rho < 0.1 {
        let r2 = rho * rho;
        -0.25 * (1.0 - r2 / 12.0 + r2 * r2 / 384.0)
    } else {
        let j2 = 2.0 * bessel_j1(rho) / rho - bessel_j0(rho);
        -2.0 * j2 / (rho * rho)
    }
}

/// Integral of the unit Airy intensity over the plane, in scale² units.
pub const AIRY_TOTAL_POWER: f64 = 4.0 * PI;
