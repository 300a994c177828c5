//! Model functions shared by the fitting modules, each with an analytic gradient.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::lm::LeastSquares;
use crate::special::{airy_amplitude, airy_amplitude_slope_over_rho, erf};

/// A model `y = f(coord; params)` with an analytic parameter gradient.
pub trait ParametricModel {
    type Coord: Copy;

    fn param_names(&self) -> &'static [&'static str];

    fn n_params(&self) -> usize {
        self.param_names().len()
    }

    fn value(&self, coord: Self::Coord, params: &[f64]) -> f64;

    /// Writes `∂f/∂pⱼ` into `grad` and returns the value.
    fn value_and_gradient(&self, coord: Self::Coord, params: &[f64], grad: &mut [f64]) -> f64;
}

/// Least-squares adapter: residuals `w·(f(cᵢ; p) − yᵢ)`.
pub struct CurveFit<'a, M: ParametricModel> {
    pub model: &'a M,
    pub coords: &'a [M::Coord],
    pub data: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl<'a, M: ParametricModel> CurveFit<'a, M> {
    pub fn new(model: &'a M, coords: &'a [M::Coord], data: &'a [f64]) -> Self {
        assert_eq!(coords.len(), data.len(), "coordinate/data length mismatch");
        Self {
            model,
            coords,
            data,
            weights: None,
        }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.map_or(1.0, |w| w[i])
    }
}

impl<M: ParametricModel> LeastSquares for CurveFit<'_, M> {
    fn n_params(&self) -> usize {
        self.model.n_params()
    }

    fn n_residuals(&self) -> usize {
        self.data.len()
    }

    fn residuals(&self, params: &[f64], out: &mut [f64]) {
        for (i, (&c, &y)) in self.coords.iter().zip(self.data).enumerate() {
            out[i] = self.weight(i) * (self.model.value(c, params) - y);
        }
    }

    fn jacobian(&self, params: &[f64], jac: &mut DMatrix<f64>) -> bool {
        let n = self.model.n_params();
        let mut grad = vec![0.0; n];
        for (i, &c) in self.coords.iter().enumerate() {
            self.model.value_and_gradient(c, params, &mut grad);
            let w = self.weight(i);
            for j in 0..n {
                jac[(i, j)] = w * grad[j];
            }
        }
        true
    }
}

/// How the blur parameter of the erf-edge model enters the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaConvention {
    /// `g(x) = exp(−x²/2σ)`: σ plays the role of a variance (px²). This is the
    /// form in which the marker-section model is usually written down.
    #[default]
    Variance,
    /// `g(x) = exp(−x²/2σ²)`: σ is a standard deviation (px).
    StdDev,
}

impl SigmaConvention {
    /// The factor `k` multiplying erf arguments.
    pub fn k(self, sigma: f64) -> f64 {
        match self {
            SigmaConvention::Variance => (1.0 / (2.0 * sigma)).sqrt(),
            SigmaConvention::StdDev => 1.0 / (2.0_f64.sqrt() * sigma),
        }
    }

    /// `dk/dσ`.
    fn dk(self, sigma: f64) -> f64 {
        match self {
            SigmaConvention::Variance => -0.5 * self.k(sigma) / sigma,
            SigmaConvention::StdDev => -self.k(sigma) / sigma,
        }
    }
}

/// Profile across a shadowed bar of width `d`: a box convolved with a Gaussian,
/// normalized so the value at the bar center is `A`, on a linear background.
///
/// `y(x) = A·[erf(k(x_c − d/2 − x)) − erf(k(x_c + d/2 − x))] / [erf(−k·d/2) − erf(k·d/2)] + B·x + C`
/// with `k = √(1/(2σ))` in the default [`SigmaConvention::Variance`] form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErfEdgeModel {
    pub amplitude: f64,
    pub center: f64,
    pub sigma: f64,
    /// Arm width `d`, held fixed during fits.
    pub width: f64,
    pub slope: f64,
    pub offset: f64,
    #[serde(default)]
    pub convention: SigmaConvention,
}

impl ErfEdgeModel {
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.convention.k(self.sigma);
        let h = 0.5 * self.width;
        let num = erf(k * (self.center - h - x)) - erf(k * (self.center + h - x));
        let den = erf(-k * h) - erf(k * h);
        self.amplitude * num / den + self.slope * x + self.offset
    }

    pub fn params(&self) -> [f64; 5] {
        [
            self.amplitude,
            self.center,
            self.sigma,
            self.slope,
            self.offset,
        ]
    }
}

/// Parameter family of [`ErfEdgeModel`] with `d` fixed: `[A, x_c, σ, B, C]`.
#[derive(Debug, Clone, Copy)]
pub struct ErfEdgeFamily {
    pub width: f64,
    pub convention: SigmaConvention,
}

impl ErfEdgeFamily {
    pub fn model(&self, p: &[f64]) -> ErfEdgeModel {
        ErfEdgeModel {
            amplitude: p[0],
            center: p[1],
            sigma: p[2],
            width: self.width,
            slope: p[3],
            offset: p[4],
            convention: self.convention,
        }
    }
}

const TWO_OVER_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

impl ParametricModel for ErfEdgeFamily {
    type Coord = f64;

    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "center", "sigma", "slope", "offset"]
    }

    fn value(&self, x: f64, p: &[f64]) -> f64 {
        self.model(p).eval(x)
    }

    fn value_and_gradient(&self, x: f64, p: &[f64], g: &mut [f64]) -> f64 {
        let (a, xc, sigma, b, c) = (p[0], p[1], p[2], p[3], p[4]);
        let k = self.convention.k(sigma);
        let dk = self.convention.dk(sigma);
        let h = 0.5 * self.width;
        let u1 = xc - h - x;
        let u2 = xc + h - x;
        let num = erf(k * u1) - erf(k * u2);
        let den = -2.0 * erf(k * h);
        let e1 = TWO_OVER_SQRT_PI * (-(k * u1).powi(2)).exp();
        let e2 = TWO_OVER_SQRT_PI * (-(k * u2).powi(2)).exp();
        let eh = TWO_OVER_SQRT_PI * (-(k * h).powi(2)).exp();
        let shape = num / den;
        // ∂/∂k of num and den
        let dnum_dk = e1 * u1 - e2 * u2;
        let dden_dk = -2.0 * eh * h;
        g[0] = shape;
        g[1] = a * k * (e1 - e2) / den;
        g[2] = a * dk * (dnum_dk * den - num * dden_dk) / (den * den);
        g[3] = x;
        g[4] = 1.0;
        a * shape + b * x + c
    }
}

/// Axis-aligned elliptical Gaussian spot on a constant offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2DModel {
    pub amplitude: f64,
    pub x0: f64,
    pub y0: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub offset: f64,
}

impl Gaussian2DModel {
    pub fn from_params(p: &[f64]) -> Self {
        Self {
            amplitude: p[0],
            x0: p[1],
            y0: p[2],
            sigma_x: p[3],
            sigma_y: p[4],
            offset: p[5],
        }
    }

    pub fn params(&self) -> [f64; 6] {
        [
            self.amplitude,
            self.x0,
            self.y0,
            self.sigma_x,
            self.sigma_y,
            self.offset,
        ]
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        Gaussian2DFamily.value((x, y), &self.params())
    }

    /// Volume under the peak above the offset.
    pub fn volume(&self) -> f64 {
        2.0 * PI * self.amplitude * self.sigma_x * self.sigma_y
    }
}

/// Parameters `[amplitude, x0, y0, sigma_x, sigma_y, offset]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian2DFamily;

impl ParametricModel for Gaussian2DFamily {
    type Coord = (f64, f64);

    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "x0", "y0", "sigma_x", "sigma_y", "offset"]
    }

    fn value(&self, (x, y): (f64, f64), p: &[f64]) -> f64 {
        let dx = (x - p[1]) / p[3];
        let dy = (y - p[2]) / p[4];
        p[0] * (-0.5 * (dx * dx + dy * dy)).exp() + p[5]
    }

    fn value_and_gradient(&self, (x, y): (f64, f64), p: &[f64], g: &mut [f64]) -> f64 {
        let (a, x0, y0, sx, sy, off) = (p[0], p[1], p[2], p[3], p[4], p[5]);
        let dx = x - x0;
        let dy = y - y0;
        let e = (-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp();
        let ae = a * e;
        g[0] = e;
        g[1] = ae * dx / (sx * sx);
        g[2] = ae * dy / (sy * sy);
        g[3] = ae * dx * dx / (sx * sx * sx);
        g[4] = ae * dy * dy / (sy * sy * sy);
        g[5] = 1.0;
        ae + off
    }
}

/// Single Gaussian line on a linear background, with the slope measured
/// relative to a fixed reference coordinate: `[amplitude, center, width, slope, offset]`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianLineFamily {
    pub reference: f64,
}

impl ParametricModel for GaussianLineFamily {
    type Coord = f64;

    fn param_names(&self) -> &'static [&'static str] {
        &["amplitude", "center", "width", "slope", "offset"]
    }

    fn value(&self, x: f64, p: &[f64]) -> f64 {
        let u = (x - p[1]) / p[2];
        p[0] * (-0.5 * u * u).exp() + p[3] * (x - self.reference) + p[4]
    }

    fn value_and_gradient(&self, x: f64, p: &[f64], g: &mut [f64]) -> f64 {
        let (a, c, w) = (p[0], p[1], p[2]);
        let d = x - c;
        let e = (-0.5 * d * d / (w * w)).exp();
        g[0] = e;
        g[1] = a * e * d / (w * w);
        g[2] = a * e * d * d / (w * w * w);
        g[3] = x - self.reference;
        g[4] = 1.0;
        a * e + p[3] * (x - self.reference) + p[4]
    }
}

/// One Gaussian component of a [`TripleGaussianModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPeak {
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

/// Guide profile: left trench edge, guide, right trench edge, plus a linear
/// background whose slope is measured from `reference`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleGaussianModel {
    pub peaks: [GaussianPeak; 3],
    pub slope: f64,
    pub offset: f64,
    pub reference: f64,
}

impl TripleGaussianModel {
    pub fn params(&self) -> [f64; 11] {
        let mut p = [0.0; 11];
        for (i, pk) in self.peaks.iter().enumerate() {
            p[3 * i] = pk.amplitude;
            p[3 * i + 1] = pk.center;
            p[3 * i + 2] = pk.width;
        }
        p[9] = self.slope;
        p[10] = self.offset;
        p
    }

    pub fn from_params(p: &[f64], reference: f64) -> Self {
        let pk = |i: usize| GaussianPeak {
            amplitude: p[3 * i],
            center: p[3 * i + 1],
            width: p[3 * i + 2],
        };
        Self {
            peaks: [pk(0), pk(1), pk(2)],
            slope: p[9],
            offset: p[10],
            reference,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        TripleGaussianFamily {
            reference: self.reference,
        }
        .value(x, &self.params())
    }

    pub fn is_ordered(&self) -> bool {
        self.peaks[0].center < self.peaks[1].center && self.peaks[1].center < self.peaks[2].center
    }
}

/// Parameters `[a₁, c₁, w₁, a₂, c₂, w₂, a₃, c₃, w₃, slope, offset]`.
#[derive(Debug, Clone, Copy)]
pub struct TripleGaussianFamily {
    pub reference: f64,
}

impl ParametricModel for TripleGaussianFamily {
    type Coord = f64;

    fn param_names(&self) -> &'static [&'static str] {
        &[
            "left_amplitude",
            "left_center",
            "left_width",
            "middle_amplitude",
            "middle_center",
            "middle_width",
            "right_amplitude",
            "right_center",
            "right_width",
            "slope",
            "offset",
        ]
    }

    fn value(&self, x: f64, p: &[f64]) -> f64 {
        let mut v = p[9] * (x - self.reference) + p[10];
        for i in 0..3 {
            let u = (x - p[3 * i + 1]) / p[3 * i + 2];
            v += p[3 * i] * (-0.5 * u * u).exp();
        }
        v
    }

    fn value_and_gradient(&self, x: f64, p: &[f64], g: &mut [f64]) -> f64 {
        let mut v = p[9] * (x - self.reference) + p[10];
        for i in 0..3 {
            let (a, c, w) = (p[3 * i], p[3 * i + 1], p[3 * i + 2]);
            let d = x - c;
            let e = (-0.5 * d * d / (w * w)).exp();
            g[3 * i] = e;
            g[3 * i + 1] = a * e * d / (w * w);
            g[3 * i + 2] = a * e * d * d / (w * w * w);
            v += a * e;
        }
        g[9] = x - self.reference;
        g[10] = 1.0;
        v
    }
}

/// Airy spot `amplitude·[2J₁(ρ)/ρ]² + offset` with an elliptical radius
/// `ρ² = (u/s_major)² + (v/s_minor)²`, where `(u, v)` are coordinates rotated
/// by `orientation` (degrees, major axis measured from +x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticalAiryModel {
    pub amplitude: f64,
    pub x0: f64,
    pub y0: f64,
    pub scale_major: f64,
    pub scale_minor: f64,
    pub orientation: f64,
    pub offset: f64,
}

impl EllipticalAiryModel {
    pub fn params(&self) -> [f64; 7] {
        [
            self.amplitude,
            self.x0,
            self.y0,
            self.scale_major,
            self.scale_minor,
            self.orientation,
            self.offset,
        ]
    }

    pub fn from_params(p: &[f64]) -> Self {
        Self {
            amplitude: p[0],
            x0: p[1],
            y0: p[2],
            scale_major: p[3],
            scale_minor: p[4],
            orientation: p[5],
            offset: p[6],
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        EllipticalAiryFamily.value((x, y), &self.params())
    }

    /// Swaps axes if needed so that `scale_major ≥ scale_minor`, keeping the
    /// orientation in (−90°, 90°].
    pub fn normalized(mut self) -> Self {
        if self.scale_minor > self.scale_major {
            std::mem::swap(&mut self.scale_major, &mut self.scale_minor);
            self.orientation += 90.0;
        }
        self.orientation = self.orientation.rem_euclid(180.0);
        if self.orientation > 90.0 {
            self.orientation -= 180.0;
        }
        self
    }
}

/// Parameters `[amplitude, x0, y0, scale_major, scale_minor, orientation_deg, offset]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct EllipticalAiryFamily;

impl ParametricModel for EllipticalAiryFamily {
    type Coord = (f64, f64);

    fn param_names(&self) -> &'static [&'static str] {
        &[
            "amplitude",
            "x0",
            "y0",
            "scale_major",
            "scale_minor",
            "orientation",
            "offset",
        ]
    }

    fn value(&self, (x, y): (f64, f64), p: &[f64]) -> f64 {
        let (s, c) = p[5].to_radians().sin_cos();
        let dx = x - p[1];
        let dy = y - p[2];
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let rho = ((u / p[3]).powi(2) + (v / p[4]).powi(2)).sqrt();
        let h = airy_amplitude(rho);
        p[0] * h * h + p[6]
    }

    fn value_and_gradient(&self, (x, y): (f64, f64), p: &[f64], g: &mut [f64]) -> f64 {
        let (amp, x0, y0, a, b, phi, off) = (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
        let (s, c) = phi.to_radians().sin_cos();
        let dx = x - x0;
        let dy = y - y0;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let (a2, b2) = (a * a, b * b);
        let rho = (u * u / a2 + v * v / b2).sqrt();
        let h = airy_amplitude(rho);
        // dI/dρ · (1/ρ), finite at the center
        let k = amp * 2.0 * h * airy_amplitude_slope_over_rho(rho);
        g[0] = h * h;
        // each term below is ρ·∂ρ/∂p
        g[1] = k * (-u * c / a2 + v * s / b2);
        g[2] = k * (-u * s / a2 - v * c / b2);
        g[3] = k * (-u * u / (a2 * a));
        g[4] = k * (-v * v / (b2 * b));
        g[5] = k * (u * v * (1.0 / a2 - 1.0 / b2)) * PI / 180.0;
        g[6] = 1.0;
        amp * h * h + off
    }
}
