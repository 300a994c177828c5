//! Nanoguide axis extraction and quantum-dot misalignment.

use serde::{Deserialize, Serialize};

use crate::emitters::EmitterFit;
use crate::error::{Error, Result};
use crate::fitcore::{fit_curve, FitProblem, FitResult, TripleGaussianFamily, TripleGaussianModel};
use crate::imgproc::{Image, Roi};
use crate::special::normal_cdf;
use crate::synth::Orientation;

/// Expected cross-section geometry used to seed the three peaks (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideSeed {
    /// Guide position along the profile.
    pub center: f64,
    /// Trench-edge positions relative to the guide (negative, positive).
    pub edge_offsets: (f64, f64),
    /// Gaussian σ of each peak.
    pub width: f64,
}

/// Section-fit settings in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuideFitConfig {
    pub sections: usize,
    /// Fraction of the guide length inside the region spanned by the sections.
    pub coverage: f64,
    pub edge_offsets_nm: (f64, f64),
    pub peak_width_nm: f64,
}

impl Default for GuideFitConfig {
    fn default() -> Self {
        Self {
            sections: 9,
            coverage: 0.6,
            edge_offsets_nm: (-1_200.0, 1_200.0),
            peak_width_nm: 250.0,
        }
    }
}

/// Center of one fitted section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionCenter {
    pub center: f64,
    /// Half of the 95.4 % interval.
    pub unc: f64,
}

/// One section of a fitted guide, in nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideSection {
    pub along_nm: f64,
    pub center_nm: f64,
    pub unc_nm: f64,
}

/// Guide axis: the coordinate across the guide (y for guides along x).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveguideAxis {
    pub orientation: Orientation,
    pub axis_nm: f64,
    pub unc_nm: f64,
    pub sections: Vec<GuideSection>,
}

/// Signed distance of the quantum dot from the guide axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    /// QD coordinate minus axis coordinate, across the guide.
    pub delta_nm: f64,
    pub unc_nm: f64,
}

/// Normal fit of a misalignment sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1).
    pub std: f64,
    /// Anderson–Darling A² against the fitted normal; `None` when the
    /// sample has no spread.
    pub anderson_darling: Option<f64>,
}

fn seeded_fit(profile: &[f64], coords: &[f64], family: &TripleGaussianFamily, init: Vec<f64>) -> Result<FitResult> {
    let n = profile.len() as f64;
    let lo = vec![
        0.0,
        0.0,
        0.3,
        0.0,
        0.0,
        0.3,
        0.0,
        0.0,
        0.3,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    ];
    let hi = vec![
        f64::INFINITY,
        n - 1.0,
        n / 2.0,
        f64::INFINITY,
        n - 1.0,
        n / 2.0,
        f64::INFINITY,
        n - 1.0,
        n / 2.0,
        f64::INFINITY,
        f64::INFINITY,
    ];
    let problem = FitProblem::new(init)
        .with_bounds(lo, hi)
        .with_max_iterations(300)
        .with_tolerance(1e-10);
    fit_curve(family, coords, profile, problem)
}

/// Fits three Gaussian peaks (trench edge, guide, trench edge) on a linear
/// background and returns the middle peak, in sample units.
pub fn fit_guide_section(profile: &[f64], seed: &GuideSeed) -> Result<SectionCenter> {
    let n = profile.len();
    if n < 12 {
        return Err(Error::InvalidInput(format!("guide profile of {n} samples is too short")));
    }
    let coords: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let reference = (n as f64 - 1.0) / 2.0;
    let family = TripleGaussianFamily { reference };
    let mut sorted = profile.to_vec();
    sorted.sort_by(f64::total_cmp);
    let base = sorted[n / 10];
    let at = |x: f64| profile[(x.round().max(0.0) as usize).min(n - 1)] - base;
    let w0 = seed.width.max(0.5);

    // refine the middle seed to the local maximum within one peak width
    let r = (1.5 * w0).ceil() as isize;
    let c0 = seed.center.round() as isize;
    let middle = (c0 - r..=c0 + r)
        .filter(|&i| i >= 0 && (i as usize) < n)
        .max_by(|&a, &b| profile[a as usize].total_cmp(&profile[b as usize]))
        .map_or(seed.center, |i| i as f64);
    let left = middle + seed.edge_offsets.0;
    let right = middle + seed.edge_offsets.1;
    let first = vec![
        at(left).max(1e-9),
        left.clamp(0.0, n as f64 - 1.0),
        w0,
        at(middle).max(1e-9),
        middle,
        w0,
        at(right).max(1e-9),
        right.clamp(0.0, n as f64 - 1.0),
        w0,
        0.0,
        base,
    ];
    let attempts = [first.clone(), {
        // re-seed from the profile halves when the nominal geometry misleads
        let lmax = (0..middle as usize).max_by(|&a, &b| profile[a].total_cmp(&profile[b])).unwrap_or(0) as f64;
        let rmax = (middle as usize + 1..n)
            .max_by(|&a, &b| profile[a].total_cmp(&profile[b]))
            .unwrap_or(n - 1) as f64;
        let mut p = first;
        p[0] = at(lmax).max(1e-9);
        p[1] = lmax;
        p[6] = at(rmax).max(1e-9);
        p[7] = rmax;
        p
    }];
    let mut last_err = None;
    for init in attempts {
        match seeded_fit(profile, &coords, &family, init) {
            Ok(res) if res.converged => {
                let m = TripleGaussianModel::from_params(&res.params, reference);
                let unc = res.ci95[4];
                if m.is_ordered() && unc.is_finite() && unc > 0.0 {
                    return Ok(SectionCenter { center: m.peaks[1].center, unc });
                }
                last_err = Some(Error::FitFailed("guide section peaks out of order".into()));
            }
            Ok(res) => {
                last_err = Some(Error::FitFailed(format!(
                    "guide section fit did not converge after {} iterations",
                    res.iterations
                )))
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::FitFailed("guide section fit failed".into())))
}

/// Inverse-variance weighted mean and its standard error.
pub fn weighted_mean(values: &[(f64, f64)]) -> Option<(f64, f64)> {
    let (mut sw, mut swx) = (0.0, 0.0);
    for &(x, u) in values {
        let w = 1.0 / (u * u);
        sw += w;
        swx += w * x;
    }
    (sw > 0.0 && sw.is_finite()).then(|| (swx / sw, 1.0 / sw.sqrt()))
}

/// Fits `cfg.sections` single-pixel cross-sections of a guide inside `roi`
/// and combines their middle-peak centers into the axis coordinate.
pub fn fit_waveguide(img: &Image, roi: &Roi, orientation: Orientation, cfg: &GuideFitConfig) -> Result<WaveguideAxis> {
    if roi.x0 + roi.width > img.width() || roi.y0 + roi.height > img.height() {
        return Err(Error::InvalidInput("guide region leaves the image".into()));
    }
    let p = img.pixel_pitch();
    let (along_len, across_len) = match orientation {
        Orientation::AlongX => (roi.width, roi.height),
        Orientation::AlongY => (roi.height, roi.width),
    };
    let (along0, across0) = match orientation {
        Orientation::AlongX => (roi.x0, roi.y0),
        Orientation::AlongY => (roi.y0, roi.x0),
    };
    let seed = GuideSeed {
        center: (across_len as f64 - 1.0) / 2.0,
        edge_offsets: (cfg.edge_offsets_nm.0 / p, cfg.edge_offsets_nm.1 / p),
        width: cfg.peak_width_nm / p,
    };
    let span = cfg.coverage.clamp(0.0, 1.0) * (along_len as f64 - 1.0);
    let start = (along_len as f64 - 1.0 - span) / 2.0;
    let n = cfg.sections.max(1);
    let mut sections = Vec::with_capacity(n);
    let mut failures = Vec::new();
    for k in 0..n {
        let t = if n > 1 { start + span * k as f64 / (n - 1) as f64 } else { start + span / 2.0 };
        let a = along0 + t.round() as usize;
        let profile: Vec<f64> = (0..across_len)
            .map(|j| match orientation {
                Orientation::AlongX => img.get(a, across0 + j),
                Orientation::AlongY => img.get(across0 + j, a),
            })
            .collect();
        match fit_guide_section(&profile, &seed) {
            Ok(s) => sections.push(GuideSection {
                along_nm: a as f64 * p,
                center_nm: (across0 as f64 + s.center) * p,
                unc_nm: s.unc * p,
            }),
            Err(e) => failures.push(format!("section {k}: {e}")),
        }
    }
    if sections.len() < 3 {
        return Err(Error::TooFewSections(sections.len()));
    }
    if !failures.is_empty() {
        tracing::debug!("guide sections discarded: {}", failures.join("; "));
    }
    let pairs: Vec<(f64, f64)> = sections.iter().map(|s| (s.center_nm, s.unc_nm)).collect();
    let (axis_nm, unc_nm) = weighted_mean(&pairs).ok_or(Error::TooFewSections(0))?;
    Ok(WaveguideAxis {
        orientation,
        axis_nm,
        unc_nm,
        sections,
    })
}

/// Misalignment of a quantum dot from a guide of the expected orientation.
/// Both must be in the same frame.
pub fn misalign(qd: &EmitterFit, wg: &WaveguideAxis, expected: Orientation) -> Result<Misalignment> {
    if wg.orientation != expected {
        return Err(Error::Contract(format!(
            "guide is {} but the device is declared {}",
            wg.orientation, expected
        )));
    }
    let (q, uq) = match wg.orientation {
        Orientation::AlongX => (qd.y_nm, qd.unc_y_nm),
        Orientation::AlongY => (qd.x_nm, qd.unc_x_nm),
    };
    Ok(Misalignment {
        delta_nm: q - wg.axis_nm,
        unc_nm: (uq * uq + wg.unc_nm * wg.unc_nm).sqrt(),
    })
}

/// Mean, n − 1 standard deviation and Anderson–Darling statistic.
pub fn misalign_stats(deltas: &[f64]) -> Result<MisalignStats> {
    let n = deltas.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!("need at least 5 misalignments, got {n}")));
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let anderson_darling = (std > 0.0).then(|| {
        let mut z: Vec<f64> = deltas.iter().map(|d| (d - mean) / std).collect();
        z.sort_by(f64::total_cmp);
        let nf = n as f64;
        let s: f64 = (0..n)
            .map(|i| {
                let lo = normal_cdf(z[i]).max(1e-300).ln();
                let hi = (1.0 - normal_cdf(z[n - 1 - i])).max(1e-300).ln();
                (2.0 * i as f64 + 1.0) * (lo + hi)
            })
            .sum();
        -nf - s / nf
    });
    Ok(MisalignStats {
        n,
        mean,
        std,
        anderson_darling,
    })
}

/// Histogram with bins `[k·w, (k+1)·w)`; returns `(bin center, count)` for
/// every bin between the smallest and largest value.
pub fn histogram(values: &[f64], bin_width: f64) -> Vec<(f64, usize)> {
    if values.is_empty() || !(bin_width > 0.0) {
        return Vec::new();
    }
    let idx = |v: f64| (v / bin_width).floor() as i64;
    let lo = values.iter().map(|&v| idx(v)).min().unwrap_or(0);
    let hi = values.iter().map(|&v| idx(v)).max().unwrap_or(0);
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &v in values {
        counts[(idx(v) - lo) as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (((lo + i as i64) as f64 + 0.5) * bin_width, c))
        .collect()
}

/// Bar chart of a histogram with the fitted normal density overlaid.
pub fn histogram_svg(bins: &[(f64, usize)], bin_width: f64, stats: Option<&MisalignStats>, title: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 40.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    if bins.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let x_lo = bins[0].0 - bin_width / 2.0;
    let x_hi = bins[bins.len() - 1].0 + bin_width / 2.0;
    let total: usize = bins.iter().map(|b| b.1).sum();
    let mut y_max = bins.iter().map(|b| b.1).max().unwrap_or(1) as f64;
    let density = |x: f64, s: &MisalignStats| {
        let z = (x - s.mean) / s.std;
        total as f64 * bin_width * (-0.5 * z * z).exp() / (s.std * (2.0 * std::f64::consts::PI).sqrt())
    };
    if let Some(s) = stats.filter(|s| s.std > 0.0) {
        y_max = y_max.max(density(s.mean, s));
    }
    let sx = |x: f64| m + (x - x_lo) / (x_hi - x_lo) * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / y_max * (h - 2.0 * m);
    for &(c, n) in bins {
        let x0 = sx(c - bin_width / 2.0);
        let x1 = sx(c + bin_width / 2.0);
        out.push_str(&format!(
            "<rect x=\"{x0:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#7a9cc6\" stroke=\"#2d4d7a\"/>\n",
            sy(n as f64),
            x1 - x0,
            sy(0.0) - sy(n as f64)
        ));
    }
    if let Some(s) = stats.filter(|s| s.std > 0.0) {
        let pts: Vec<String> = (0..=100)
            .map(|i| {
                let x = x_lo + (x_hi - x_lo) * i as f64 / 100.0;
                format!("{:.2},{:.2}", sx(x), sy(density(x, s)))
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{:.0}\" y=\"40\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">mean {:.1} nm, std {:.1} nm, n = {}</text>\n",
            w - m,
            s.mean,
            s.std,
            s.n
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"black\"/>\n\
         <text x=\"{2:.2}\" y=\"{3:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">misalignment (nm)</text>\n\
         <text x=\"{m}\" y=\"{3:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{4:.0}</text>\n\
         <text x=\"{1:.2}\" y=\"{3:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{5:.0}</text>\n",
        h - m,
        w - m,
        w / 2.0,
        h - m + 16.0,
        x_lo,
        x_hi
    ));
    out.push_str("</svg>\n");
    out
}

pub(crate) fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One row of the per-device misalignment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRow {
    pub device_id: String,
    pub orientation: Orientation,
    pub axis_nm: f64,
    pub axis_unc_nm: f64,
    pub qd_nm: f64,
    pub delta_nm: f64,
    pub delta_unc_nm: f64,
}

pub const DEVICE_ROW_HEADER: [&str; 7] = [
    "device_id",
    "orientation",
    "axis_nm",
    "axis_unc_nm",
    "qd_nm",
    "delta_nm",
    "delta_unc_nm",
];

/// Comment line written above misalignment tables.
pub const DELTA_SIGN_NOTE: &str = "delta_nm = qd_nm - axis_nm across the guide; positive toward increasing coordinate";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emitters::EmitterModel;
    use crate::fitcore::GaussianPeak;
    use crate::synth::{render, Frame, ImagingMode, Scene, WaveguideSpec};

    fn triple(middle: f64) -> Vec<f64> {
        let m = TripleGaussianModel {
            peaks: [
                GaussianPeak {
                    amplitude: 300.0,
                    center: 10.0,
                    width: 4.0,
                },
                GaussianPeak {
                    amplitude: 900.0,
                    center: middle,
                    width: 4.0,
                },
                GaussianPeak {
                    amplitude: 300.0,
                    center: 50.0,
                    width: 4.0,
                },
            ],
            slope: 0.5,
            offset: 100.0,
            reference: 30.0,
        };
        (0..61).map(|i| m.eval(i as f64)).collect()
    }

    fn seed() -> GuideSeed {
        GuideSeed {
            center: 30.0,
            edge_offsets: (-20.0, 20.0),
            width: 4.0,
        }
    }

    #[test]
    fn section_exact_and_shift() {
        let s = fit_guide_section(&triple(30.0), &seed()).unwrap();
        assert!((s.center - 30.0).abs() < 1e-3, "{s:?}");
        let t = fit_guide_section(&triple(30.5), &seed()).unwrap();
        assert!((t.center - s.center - 0.5).abs() < 1e-3);
    }

    fn guide_image(axis_nm: f64, orientation: Orientation) -> Image {
        let mut s = Scene::empty(
            ImagingMode::IntrinsicEmitters,
            Frame {
                width: 100,
                height: 100,
                pitch_nm: 59.0,
            },
        );
        s.emitter_background = 50.0;
        s.waveguides.push(WaveguideSpec {
            axis_nm,
            orientation,
            width_nm: 500.0,
            trench_edge_offsets_nm: (-1200.0, 1200.0),
            edge_brightness: 400.0,
            core_brightness: 1000.0,
            blur_nm: 250.0,
            extent_nm: None,
        });
        render(&s).unwrap()
    }

    #[test]
    fn noise_free_guide_axis() {
        let full = Roi {
            x0: 0,
            y0: 0,
            width: 100,
            height: 100,
            center: (49.5, 49.5),
            merged: false,
        };
        let img = guide_image(2950.0, Orientation::AlongX);
        let axis = fit_waveguide(&img, &full, Orientation::AlongX, &GuideFitConfig::default()).unwrap();
        assert!((axis.axis_nm - 2950.0).abs() < 1.0, "{axis:?}");
        assert_eq!(axis.sections.len(), 9);
        let min_unc = axis.sections.iter().map(|s| s.unc_nm).fold(f64::INFINITY, f64::min);
        assert!(axis.unc_nm <= min_unc);
        let img = guide_image(2900.0, Orientation::AlongY);
        let axis = fit_waveguide(&img, &full, Orientation::AlongY, &GuideFitConfig::default()).unwrap();
        assert!((axis.axis_nm - 2900.0).abs() < 1.0, "{axis:?}");
    }

    fn qd(x: f64, y: f64) -> EmitterFit {
        EmitterFit {
            x_nm: x,
            y_nm: y,
            model: EmitterModel::Airy2d,
            sigma_x: 3.0,
            sigma_y: 2.0,
            orientation_deg: 0.0,
            photons: 1e5,
            b2: 10.0,
            unc_x_nm: 3.0,
            unc_y_nm: 4.0,
            ci95_x_nm: 3.0,
            ci95_y_nm: 4.0,
        }
    }

    #[test]
    fn misalignment_sign_and_errors() {
        let wg = WaveguideAxis {
            orientation: Orientation::AlongX,
            axis_nm: 1000.0,
            unc_nm: 3.0,
            sections: vec![],
        };
        let m = misalign(&qd(50.0, 1046.0), &wg, Orientation::AlongX).unwrap();
        assert!((m.delta_nm - 46.0).abs() < 1e-12);
        assert!((m.unc_nm - 5.0).abs() < 1e-12);
        let r = misalign(&qd(50.0, 954.0), &wg, Orientation::AlongX).unwrap();
        assert_eq!(r.delta_nm, -m.delta_nm);
        assert_eq!(misalign(&qd(0.0, 1000.0), &wg, Orientation::AlongX).unwrap().delta_nm, 0.0);
        assert!(matches!(
            misalign(&qd(0.0, 0.0), &wg, Orientation::AlongY),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stats_and_histogram() {
        let s = misalign_stats(&[3.0; 6]).unwrap();
        assert_eq!(s.std, 0.0);
        assert!(s.anderson_darling.is_none());
        assert!(misalign_stats(&[1.0, 2.0]).is_err());
        let s = misalign_stats(&[-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.mean, 0.0);
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-15);
        let h = histogram(&[-5.0, 1.0, 9.0, 12.0], 10.0);
        assert_eq!(h, vec![(-5.0, 1), (5.0, 2), (15.0, 1)]);
        let svg = histogram_svg(&h, 10.0, Some(&s), "test");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
