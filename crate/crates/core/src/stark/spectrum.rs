//! Emission spectra: single-line peak fits and before/after shift statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitcore::{fit_curve, FitProblem, GaussianLineFamily};

/// Half-width, in samples, of the window fitted around the maximum.
pub const PEAK_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    wavelengths: Vec<f64>,
    intensities: Vec<f64>,
}

impl Spectrum {
    pub fn new(wavelengths: Vec<f64>, intensities: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != intensities.len() {
            return Err(Error::InvalidInput(format!(
                "{} wavelengths but {} intensities",
                wavelengths.len(),
                intensities.len()
            )));
        }
        if wavelengths.len() < 8 {
            return Err(Error::InvalidInput(format!(
                "spectrum has {} samples, need at least 8",
                wavelengths.len()
            )));
        }
        if wavelengths.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("wavelengths must be strictly increasing".into()));
        }
        if intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("intensities must be finite".into()));
        }
        Ok(Self {
            wavelengths,
            intensities,
        })
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn len(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths.is_empty()
    }
}

/// Fitted line position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFit {
    pub wavelength_nm: f64,
    /// Half of the 95.4 % interval.
    pub unc_nm: f64,
    pub amplitude: f64,
    pub width_nm: f64,
}

/// Fits a Gaussian line on a linear background to the samples within
/// `half_window` of index `imax`.
pub(crate) fn fit_line_at(wl: &[f64], y: &[f64], imax: usize, half_window: usize) -> Result<PeakFit> {
    let n = wl.len();
    if imax == 0 || imax + 1 >= n {
        return Err(Error::PeakAtEdge { index: imax, len: n });
    }
    let lo = imax.saturating_sub(half_window);
    let hi = (imax + half_window).min(n - 1);
    let xs = &wl[lo..=hi];
    let ys = &y[lo..=hi];
    if xs.len() < 6 {
        return Err(Error::InvalidInput(format!("only {} samples around the peak", xs.len())));
    }
    let base = ys[0].min(ys[ys.len() - 1]);
    let amp = (y[imax] - base).max(1e-12);
    let half = base + amp / 2.0;
    // half-maximum width from the samples around the top
    let mut l = imax;
    while l > lo && y[l - 1] > half {
        l -= 1;
    }
    let mut r = imax;
    while r < hi && y[r + 1] > half {
        r += 1;
    }
    let step = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let fwhm = (wl[r] - wl[l]).max(step);
    let width0 = fwhm / 2.3548;
    let slope0 = (ys[ys.len() - 1] - ys[0]) / (xs[xs.len() - 1] - xs[0]);
    let reference = wl[imax];
    let span = xs[xs.len() - 1] - xs[0];
    let problem = FitProblem::new(vec![amp, wl[imax], width0, slope0, ys[0] - slope0 * (xs[0] - reference)])
        .with_bounds(
            vec![0.0, xs[0], 0.05 * step, f64::NEG_INFINITY, f64::NEG_INFINITY],
            vec![f64::INFINITY, xs[xs.len() - 1], span, f64::INFINITY, f64::INFINITY],
        )
        .with_max_iterations(200)
        .with_tolerance(1e-12);
    let res = fit_curve(&GaussianLineFamily { reference }, xs, ys, problem)?;
    if !res.converged {
        return Err(Error::FitFailed(format!(
            "line fit did not converge after {} iterations",
            res.iterations
        )));
    }
    Ok(PeakFit {
        wavelength_nm: res.params[1],
        unc_nm: res.ci95[1],
        amplitude: res.params[0],
        width_nm: res.params[2],
    })
}

/// Position of the dominant line: Gaussian plus linear background fitted
/// within ±10 samples of the global maximum.
pub fn fit_peak(s: &Spectrum) -> Result<PeakFit> {
    let imax = s
        .intensities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("spectrum is non-empty");
    fit_line_at(&s.wavelengths, &s.intensities, imax, PEAK_WINDOW)
}

/// Line shift between two spectra of the same emitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralShift {
    /// `λ(after) − λ(before)`.
    pub delta_nm: f64,
    pub unc_nm: f64,
}

pub fn spectral_shift(before: &Spectrum, after: &Spectrum) -> Result<SpectralShift> {
    let b = fit_peak(before)?;
    let a = fit_peak(after)?;
    Ok(SpectralShift {
        delta_nm: a.wavelength_nm - b.wavelength_nm,
        unc_nm: a.unc_nm.hypot(b.unc_nm),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Nanoguide,
    Phcw,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Nanoguide => "nanoguide",
            Structure::Phcw => "phcw",
        })
    }
}

/// One measured shift with the grouping attributes of its device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub qd_id: String,
    pub structure: Structure,
    /// Guide width or unit-cell offset label, e.g. `width=300` or `offset_x=20`.
    pub group: String,
    pub delta_nm: f64,
}

/// How records are pooled by [`shift_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    #[default]
    Structure,
    Group,
    StructureAndGroup,
}

/// Normal-fit summary of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: String,
    pub n: usize,
    pub mean_nm: f64,
    /// Sample standard deviation (n − 1); `None` for a single record.
    pub std_nm: Option<f64>,
}

/// Per-group mean and sample standard deviation, groups in sorted order.
pub fn shift_stats(records: &[ShiftRecord], grouping: Grouping) -> Result<Vec<GroupStats>> {
    if let Some(r) = records.iter().find(|r| !r.delta_nm.is_finite()) {
        return Err(Error::InvalidInput(format!("shift of {} is not finite", r.qd_id)));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = match grouping {
            Grouping::Structure => r.structure.to_string(),
            Grouping::Group => r.group.clone(),
            Grouping::StructureAndGroup => format!("{}/{}", r.structure, r.group),
        };
        groups.entry(key).or_default().push(r.delta_nm);
    }
    Ok(groups
        .into_iter()
        .map(|(group, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let std_nm = (n > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            if n == 1 {
                tracing::warn!("group {group} has a single record; its spread is undefined");
            }
            GroupStats {
                group,
                n,
                mean_nm: mean,
                std_nm,
            }
        })
        .collect())
}
