use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Content rotation of an image, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub angle: f64,
    pub uncertainty: f64,
}

/// Scan settings for [`estimate_rotation_with`].
#[derive(Debug, Clone, Copy)]
pub struct RotationSearch {
    pub range_deg: f64,
    pub step_deg: f64,
    /// Step of the coarse pre-scan that locates the neighbourhood of the peak.
    pub coarse_step_deg: f64,
    /// Images larger than this (shorter side, px) are block-averaged first.
    pub max_working_size: usize,
    /// Half-width (bins) of the moving average removed from each profile.
    pub highpass_half_width: usize,
}

impl Default for RotationSearch {
    fn default() -> Self {
        Self {
            range_deg: 5.0,
            step_deg: 0.01,
            coarse_step_deg: 0.1,
            max_working_size: 512,
            highpass_half_width: 15,
        }
    }
}

/// Rotates the image content by `angle` degrees about the image center using
/// bilinear interpolation; samples falling outside the frame are 0.
///
/// With x to the right and y down, a positive angle turns +x toward +y.
/// `rotate(img, 0.0)` returns an exact copy.
pub fn rotate(img: &Image, angle: f64) -> Image {
    assert!(angle.is_finite(), "rotation angle must be finite");
    if angle == 0.0 {
        return img.clone();
    }
    let (s, c) = angle.to_radians().sin_cos();
    let (cx, cy) = img.center();
    let (w, h) = (img.width(), img.height());
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let dy = y as f64 - cy;
        for x in 0..w {
            let dx = x as f64 - cx;
            // inverse mapping: rotate the output position by −angle
            let sx = cx + c * dx + s * dy;
            let sy = cy - s * dx + c * dy;
            if let Some(v) = img.sample_bilinear(sx, sy) {
                out[y * w + x] = v;
            }
        }
    }
    Image::new(w, h, out, img.pixel_pitch())
        .expect("rotation preserves validity")
        .with_meta(img.meta.clone())
}

struct Samples {
    dx: Vec<f64>,
    dy: Vec<f64>,
    value: Vec<f64>,
    radius: f64,
}

/// Pixels inside the inscribed disk, optionally block-averaged, relative to the center.
fn disk_samples(img: &Image, max_size: usize) -> Samples {
    let short = img.width().min(img.height());
    let factor = short.div_ceil(max_size).max(1);
    let w = img.width() / factor;
    let h = img.height() / factor;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let radius = (w.min(h) as f64 - 1.0) / 2.0;
    let mut s = Samples {
        dx: Vec::new(),
        dy: Vec::new(),
        value: Vec::new(),
        radius,
    };
    let norm = 1.0 / (factor * factor) as f64;
    for by in 0..h {
        for bx in 0..w {
            let dx = bx as f64 - cx;
            let dy = by as f64 - cy;
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let mut v = 0.0;
            for y in by * factor..(by + 1) * factor {
                for x in bx * factor..(bx + 1) * factor {
                    v += img.get(x, y);
                }
            }
            s.dx.push(dx);
            s.dy.push(dy);
            s.value.push(v * norm);
        }
    }
    s
}

/// Profile bins per pixel. Sub-pixel bins with box-footprint splatting keep the
/// axis-aligned scan from being favored by the pixel grid.
const OVERSAMPLE: usize = 4;

/// Adds a box of unit (pixel) width centered at `u` (pixel units) to the profile.
fn splat(sum: &mut [f64], wt: &mut [f64], u: f64, val: f64) {
    let k = OVERSAMPLE as f64;
    let (lo, hi) = (k * (u - 0.5), k * (u + 0.5));
    let mut b = lo.floor();
    while b < hi {
        let overlap = (b + 1.0).min(hi) - b.max(lo);
        let i = b as usize;
        sum[i] += val * overlap;
        wt[i] += overlap;
        b += 1.0;
    }
}

/// Variance of the high-passed mean-intensity profiles along the two axes of a
/// frame rotated by `angle`.
fn projection_score(s: &Samples, angle: f64, half_width: usize) -> f64 {
    let (sn, cs) = angle.to_radians().sin_cos();
    let nbins = OVERSAMPLE * ((2.0 * s.radius).ceil() as usize + 4);
    let mut sum_u = vec![0.0; nbins];
    let mut wt_u = vec![0.0; nbins];
    let mut sum_v = vec![0.0; nbins];
    let mut wt_v = vec![0.0; nbins];
    let off = s.radius + 2.0;
    for i in 0..s.value.len() {
        let (dx, dy, val) = (s.dx[i], s.dy[i], s.value[i]);
        splat(&mut sum_u, &mut wt_u, dx * cs + dy * sn + off, val);
        splat(&mut sum_v, &mut wt_v, -dx * sn + dy * cs + off, val);
    }
    // the disk's chord lengths do not depend on angle, so a fixed central band
    // of bins keeps the score continuous in angle
    let k = OVERSAMPLE as f64;
    let band = |i: usize| ((i as f64 + 0.5) / k - off).abs() <= 0.95 * s.radius;
    let hw = half_width * OVERSAMPLE;
    profile_variance(&sum_u, &wt_u, hw, band) + profile_variance(&sum_v, &wt_v, hw, band)
}

/// Moving average over `k` samples (output shorter by `k − 1`).
fn box_smooth(v: &[f64], k: usize) -> Vec<f64> {
    if v.len() < k {
        return Vec::new();
    }
    let mut acc: f64 = v[..k].iter().sum();
    let mut out = Vec::with_capacity(v.len() - k + 1);
    out.push(acc / k as f64);
    for i in k..v.len() {
        acc += v[i] - v[i - k];
        out.push(acc / k as f64);
    }
    out
}

fn profile_variance(sum: &[f64], wt: &[f64], half_width: usize, keep: impl Fn(usize) -> bool) -> f64 {
    let raw: Vec<f64> = (0..sum.len())
        .filter(|&i| keep(i) && wt[i] > 0.0)
        .map(|i| sum[i] / wt[i])
        .collect();
    // a two-pixel triangle removes the column steps of the pixel grid
    let profile = box_smooth(&box_smooth(&raw, OVERSAMPLE), OVERSAMPLE);
    let n = profile.len();
    if n <= 2 * half_width + 1 {
        return 0.0;
    }
    let mut acc = 0.0;
    let mut acc2 = 0.0;
    let mut count = 0.0;
    let mut window: f64 = profile[..2 * half_width + 1].iter().sum();
    let span = (2 * half_width + 1) as f64;
    for i in half_width..n - half_width {
        if i > half_width {
            window += profile[i + half_width] - profile[i - half_width - 1];
        }
        let d = profile[i] - window / span;
        acc += d;
        acc2 += d * d;
        count += 1.0;
    }
    let mean = acc / count;
    acc2 / count - mean * mean
}

/// Least-squares parabola through `(t, y)`; returns the vertex and its standard error.
fn parabola_vertex(t: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = t.len() as f64;
    let t0 = t.iter().sum::<f64>() / n;
    let x: Vec<f64> = t.iter().map(|v| v - t0).collect();
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    let mut rhs = nalgebra::Vector3::<f64>::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let row = nalgebra::Vector3::new(1.0, xi, xi * xi);
        m += row * row.transpose();
        rhs += row * yi;
    }
    let inv = m.try_inverse()?;
    let coef = inv * rhs;
    let (b, c) = (coef[1], coef[2]);
    if !(c < 0.0) {
        return None;
    }
    let vertex = -b / (2.0 * c);
    let dof = (t.len() as f64 - 3.0).max(1.0);
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(&xi, &yi)| (yi - coef[0] - b * xi - c * xi * xi).powi(2))
        .sum();
    let cov = inv * (rss / dof);
    let gb = -1.0 / (2.0 * c);
    let gc = b / (2.0 * c * c);
    let var = gb * gb * cov[(1, 1)] + 2.0 * gb * gc * cov[(1, 2)] + gc * gc * cov[(2, 2)];
    Some((vertex + t0, var.max(0.0).sqrt()))
}

pub fn estimate_rotation(img: &Image) -> Result<RotationEstimate> {
    estimate_rotation_with(img, &RotationSearch::default())
}

/// Finds the content rotation that maximizes the variance of the row and
/// column projection profiles. The scan covers `±range_deg`; a coarse pass
/// brackets the peak, a fine pass at `step_deg` follows, and a parabola fitted
/// to the fine scores across the top of the peak, re-centered on its own
/// vertex, gives the angle and its uncertainty (floored at the step
/// quantization `step/√12`). Profiles are binned at sub-pixel resolution and
/// smoothed over two pixels so the pixel grid does not pull the estimate to 0.
pub fn estimate_rotation_with(img: &Image, search: &RotationSearch) -> Result<RotationEstimate> {
    let samples = disk_samples(img, search.max_working_size);
    if samples.value.len() < 64 {
        return Err(Error::InvalidInput("image too small to estimate rotation".into()));
    }
    let hw = search.highpass_half_width;
    let score = |a: f64| projection_score(&samples, a, hw);

    let n_coarse = (search.range_deg / search.coarse_step_deg).round() as i64;
    let coarse: Vec<(f64, f64)> = (-n_coarse..=n_coarse)
        .map(|i| {
            let a = i as f64 * search.coarse_step_deg;
            (a, score(a))
        })
        .collect();
    let mut values: Vec<f64> = coarse.iter().map(|c| c.1).collect();
    let peak = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let med = super::image::median(&mut values);
    let mean_sq = samples.value.iter().map(|v| v * v).sum::<f64>() / samples.value.len() as f64;
    if !(peak > 1e-12 * (mean_sq + 1.0)) || (peak - med) <= 0.25 * peak {
        return Err(Error::NoFeatures("projection variance is flat".into()));
    }
    let best_coarse = coarse
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|c| c.0)
        .expect("non-empty scan");

    let step = search.step_deg;
    let limit = (search.range_deg / step).round() as i64;
    let mut cache = std::collections::BTreeMap::new();
    let mut fine_score = |i: i64| *cache.entry(i).or_insert_with(|| score(i as f64 * step));

    let half = (2.0 * search.coarse_step_deg / step).round() as i64;
    let center_idx = (best_coarse / step).round() as i64;
    let (lo, hi) = ((center_idx - half).max(-limit), (center_idx + half).min(limit));
    let imax = (lo..=hi)
        .map(|i| (i, fine_score(i)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .expect("non-empty scan");
    // fit the vertex over the contiguous cap of the peak, so broad peaks are
    // fitted on their shape rather than on the roughness at the top
    let top = fine_score(imax);
    let floor = top - 0.05 * (top - med);
    let mut reach_lo = 0;
    while reach_lo < half && imax - reach_lo > -limit && fine_score(imax - reach_lo - 1) >= floor {
        reach_lo += 1;
    }
    let mut reach_hi = 0;
    while reach_hi < half && imax + reach_hi < limit && fine_score(imax + reach_hi + 1) >= floor {
        reach_hi += 1;
    }
    let reach = reach_lo.min(reach_hi).max(3);
    // re-center the window on the vertex: the maximum of a flat cap is noisy and
    // an off-center window biases the fit on a non-parabolic peak
    let mut center = imax;
    let mut fit = None;
    for _ in 0..8 {
        let idx: Vec<i64> = ((center - reach).max(-limit)..=(center + reach).min(limit)).collect();
        let t: Vec<f64> = idx.iter().map(|&i| i as f64 * step).collect();
        let y: Vec<f64> = idx.iter().map(|&i| fine_score(i)).collect();
        let vertex = parabola_vertex(&t, &y).filter(|v| (v.0 - center as f64 * step).abs() <= reach as f64 * step);
        let Some(v) = vertex else { break };
        fit = Some(v);
        let next = (v.0 / step).round() as i64;
        if next == center {
            break;
        }
        center = next;
    }
    let quantization = step / 12f64.sqrt();
    let (angle, se) = match fit {
        Some(v) => v,
        None => (imax as f64 * step, step),
    };
    let angle = angle.clamp(-search.range_deg, search.range_deg);
    Ok(RotationEstimate {
        angle,
        uncertainty: (se * se + quantization * quantization).sqrt(),
    })
}
