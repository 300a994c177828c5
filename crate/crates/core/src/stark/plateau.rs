//! Voltage–wavelength photoluminescence maps and charge-plateau tracking.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spectrum::fit_line_at;
use crate::error::{Error, Result};
use crate::imgproc::median_mad;
use crate::io::write_atomic;

/// Intensity on a voltage × wavelength grid (row per voltage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauMap {
    voltages: Vec<f64>,
    wavelengths: Vec<f64>,
    intensity: Vec<Vec<f64>>,
}

impl PlateauMap {
    pub fn new(voltages: Vec<f64>, wavelengths: Vec<f64>, intensity: Vec<Vec<f64>>) -> Result<Self> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
        if voltages.is_empty() || wavelengths.len() < 8 {
            return Err(Error::InvalidInput("map needs at least one voltage and 8 wavelengths".into()));
        }
        if !increasing(&voltages) || !increasing(&wavelengths) {
            return Err(Error::InvalidInput("map axes must be strictly increasing".into()));
        }
        if intensity.len() != voltages.len() || intensity.iter().any(|r| r.len() != wavelengths.len()) {
            return Err(Error::InvalidInput("intensity grid does not match the axes".into()));
        }
        if intensity.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput("intensities must be finite and non-negative".into()));
        }
        Ok(Self {
            voltages,
            wavelengths,
            intensity,
        })
    }

    pub fn voltages(&self) -> &[f64] {
        &self.voltages
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    /// Spectrum recorded at voltage index `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.intensity[i]
    }
}

/// Writes a map as CSV: a header of wavelengths, then one row per voltage.
pub fn write_plateau_map(path: &Path, map: &PlateauMap) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut header = vec!["voltage_V".to_string()];
    header.extend(map.wavelengths.iter().map(|l| l.to_string()));
    w.write_record(&header)?;
    for (v, row) in map.voltages.iter().zip(&map.intensity) {
        let mut rec = vec![v.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_plateau_map(path: &Path) -> Result<PlateauMap> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file);
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Format(format!("{}: cannot parse {what} {s:?}", path.display())))
    };
    let header = r.headers()?.clone();
    let wavelengths = header
        .iter()
        .skip(1)
        .map(|s| parse(s, "wavelength"))
        .collect::<Result<Vec<_>>>()?;
    let mut voltages = Vec::new();
    let mut intensity = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut it = rec.iter();
        let v = parse(it.next().unwrap_or(""), "voltage")?;
        voltages.push(v);
        intensity.push(it.map(|s| parse(s, "intensity")).collect::<Result<Vec<_>>>()?);
    }
    PlateauMap::new(voltages, wavelengths, intensity)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExcitonLabel {
    #[serde(rename = "X0")]
    X0,
    #[serde(rename = "Xplus")]
    XPlus,
    #[serde(rename = "other")]
    Other,
}

impl fmt::Display for ExcitonLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExcitonLabel::X0 => "X0",
            ExcitonLabel::XPlus => "Xplus",
            ExcitonLabel::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauPoint {
    pub voltage: f64,
    pub wavelength_nm: f64,
    pub weight: f64,
}

/// One charge plateau followed across voltage columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauTrace {
    pub label: ExcitonLabel,
    pub points: Vec<PlateauPoint>,
}

impl PlateauTrace {
    pub fn voltage_span(&self) -> (f64, f64) {
        (
            self.points.first().map_or(f64::NAN, |p| p.voltage),
            self.points.last().map_or(f64::NAN, |p| p.voltage),
        )
    }

    pub fn mean_wavelength(&self) -> f64 {
        self.points.iter().map(|p| p.wavelength_nm).sum::<f64>() / self.points.len() as f64
    }
}

/// Plateau tracking settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    /// Peaks kept per voltage column.
    pub max_peaks: usize,
    /// Largest wavelength step between adjacent columns of one trace, nm.
    pub continuity_nm: f64,
    pub min_points: usize,
    /// Peak threshold above the column median, in robust noise units.
    pub threshold: f64,
    /// Half-width, in samples, of the line fit around each peak.
    pub fit_half_window: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            max_peaks: 3,
            continuity_nm: 0.15,
            min_points: 5,
            threshold: 5.0,
            fit_half_window: 6,
        }
    }
}

fn column_peaks(wl: &[f64], y: &[f64], cfg: &PlateauConfig) -> Vec<(f64, f64)> {
    let n = y.len();
    let (med, mad) = median_mad(y);
    let noise = (1.4826 * mad).max(1e-12);
    let thr = med + cfg.threshold * noise;
    let mut cand: Vec<usize> = (1..n - 1)
        .filter(|&i| y[i] > thr && y[i] > y[i - 1] && y[i] >= y[i + 1])
        .collect();
    cand.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in cand {
        if kept.len() >= cfg.max_peaks {
            break;
        }
        if kept.iter().all(|&k| k.abs_diff(i) >= 3) {
            kept.push(i);
        }
    }
    kept.into_iter()
        .map(|i| match fit_line_at(wl, y, i, cfg.fit_half_window) {
            Ok(p) if (p.wavelength_nm - wl[i]).abs() <= 2.0 * (wl[i + 1] - wl[i - 1]) => {
                (p.wavelength_nm, p.amplitude.max(y[i] - med))
            }
            _ => {
                // parabolic vertex through the three top samples
                let (a, b, c) = (y[i - 1], y[i], y[i + 1]);
                let den = a - 2.0 * b + c;
                let off = if den < 0.0 { 0.5 * (a - c) / den } else { 0.0 };
                let h = 0.5 * (wl[i + 1] - wl[i - 1]);
                (wl[i] + off.clamp(-1.0, 1.0) * h, y[i] - med)
            }
        })
        .collect()
}

/// Follows spectral lines across voltage columns.
///
/// Each column contributes up to `max_peaks` peaks; a peak extends a trace
/// whose last point lies in the previous column within `continuity_nm`
/// (closest pairs first), otherwise it starts a new trace. Traces with fewer
/// than `min_points` points are dropped. Of the two longest traces, the one
/// starting at the lower voltage is labeled X⁺ and the other X⁰.
pub fn extract_plateaus(map: &PlateauMap, cfg: &PlateauConfig) -> Vec<PlateauTrace> {
    struct Open {
        points: Vec<PlateauPoint>,
        last_col: usize,
    }
    let mut traces: Vec<Open> = Vec::new();
    for (j, &v) in map.voltages.iter().enumerate() {
        let peaks = column_peaks(&map.wavelengths, map.row(j), cfg);
        let mut pairs = Vec::new();
        for (t, tr) in traces.iter().enumerate() {
            if j == 0 || tr.last_col != j - 1 {
                continue;
            }
            let last = tr.points.last().expect("traces are never empty").wavelength_nm;
            for (k, &(l, _)) in peaks.iter().enumerate() {
                let d = (l - last).abs();
                if d <= cfg.continuity_nm {
                    pairs.push((d, t, k));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut used_t = vec![false; traces.len()];
        let mut used_k = vec![false; peaks.len()];
        for (_, t, k) in pairs {
            if used_t[t] || used_k[k] {
                continue;
            }
            used_t[t] = true;
            used_k[k] = true;
            traces[t].points.push(PlateauPoint {
                voltage: v,
                wavelength_nm: peaks[k].0,
                weight: peaks[k].1,
            });
            traces[t].last_col = j;
        }
        for (k, &(l, w)) in peaks.iter().enumerate() {
            if !used_k[k] {
                traces.push(Open {
                    points: vec![PlateauPoint {
                        voltage: v,
                        wavelength_nm: l,
                        weight: w,
                    }],
                    last_col: j,
                });
            }
        }
    }
    let mut out: Vec<PlateauTrace> = traces
        .into_iter()
        .filter(|t| t.points.len() >= cfg.min_points.max(1))
        .map(|t| PlateauTrace {
            label: ExcitonLabel::Other,
            points: t.points,
        })
        .collect();
    out.sort_by(|a, b| {
        a.voltage_span()
            .0
            .total_cmp(&b.voltage_span().0)
            .then(a.mean_wavelength().total_cmp(&b.mean_wavelength()))
    });
    let mut by_len: Vec<usize> = (0..out.len()).collect();
    by_len.sort_by(|&a, &b| out[b].points.len().cmp(&out[a].points.len()).then(a.cmp(&b)));
    match by_len.len() {
        0 => {}
        1 => out[0].label = ExcitonLabel::X0,
        _ => {
            let (a, b) = (by_len[0].min(by_len[1]), by_len[0].max(by_len[1]));
            // `out` is ordered by starting voltage, so `a` appears first
            out[a].label = ExcitonLabel::XPlus;
            out[b].label = ExcitonLabel::X0;
        }
    }
    out
}
