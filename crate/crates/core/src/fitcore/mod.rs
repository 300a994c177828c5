//! Damped nonlinear least squares and the model zoo used by every fitting stage.

mod lm;
mod models;

pub use lm::{lm_fit, FitProblem, FitResult, LeastSquares};
pub use models::{
    CurveFit, EllipticalAiryFamily, EllipticalAiryModel, ErfEdgeFamily,
    ErfEdgeModel, Gaussian2DFamily, Gaussian2DModel, GaussianLineFamily, GaussianPeak,
    ParametricModel, SigmaConvention, TripleGaussianFamily, TripleGaussianModel,
};


/// Fits `model` to `(coords, data)` starting from `fit.initial`.
pub fn fit_curve<M: ParametricModel>(
    model: &M,
    coords: &[M::Coord],
    data: &[f64],
    fit: FitProblem,
) -> crate::Result<FitResult> {
    let fit = fit.with_names(model.param_names());
    lm_fit(&CurveFit::new(model, coords, data), &fit)
}

/// Intensity-weighted centroid and second central moment of a 1D profile
/// after subtracting its minimum.
pub fn profile_moments(values: &[f64]) -> (f64, f64) {
    let base = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for (i, &v) in values.iter().enumerate() {
        let w = v - base;
        s0 += w;
        s1 += w * i as f64;
    }
    if s0 <= 0.0 {
        return ((values.len() as f64 - 1.0) / 2.0, 0.0);
    }
    let mean = s1 / s0;
    let s2: f64 = values
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - base) * (i as f64 - mean).powi(2))
        .sum();
    (mean, s2 / s0)
}
