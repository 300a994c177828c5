//! Alignment-cross localization: per-section erf-edge fits, weighted arm
//! lines, their intersection, and binary grid labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitcore::{fit_curve, ErfEdgeFamily, FitProblem, SigmaConvention};
use crate::imgproc::{median_mad, Image, Roi};
use crate::synth::{LABEL_COLS, LABEL_ROWS};

/// Geometry of the fabricated marker grid (all lengths in nm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerGrid {
    /// Node spacing: each grid square is `pitch × pitch`.
    pub pitch_nm: f64,
    /// Center-to-tip length of each arm.
    pub arm_length_nm: f64,
    pub arm_width_nm: f64,
    /// Label center relative to its cross.
    pub label_offset_nm: (f64, f64),
    pub label_rect_long_nm: f64,
    pub label_rect_short_nm: f64,
    pub label_cell_nm: f64,
}

impl Default for MarkerGrid {
    fn default() -> Self {
        Self {
            pitch_nm: 40_000.0,
            arm_length_nm: 5_000.0,
            arm_width_nm: 500.0,
            label_offset_nm: (5_500.0, 5_500.0),
            label_rect_long_nm: 1_200.0,
            label_rect_short_nm: 400.0,
            label_cell_nm: 1_600.0,
        }
    }
}

impl MarkerGrid {
    /// Global coordinates of node `(row, col)`.
    pub fn node_global(&self, row: u8, col: u8) -> (f64, f64) {
        (col as f64 * self.pitch_nm, row as f64 * self.pitch_nm)
    }

    pub fn label_center(&self, cross: (f64, f64)) -> (f64, f64) {
        (cross.0 + self.label_offset_nm.0, cross.1 + self.label_offset_nm.1)
    }
}

/// Fit settings for crosses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossFitConfig {
    pub sections_per_half_arm: usize,
    /// Half-length of each section profile, in units of the arm width.
    pub section_half_width: f64,
    pub convention: SigmaConvention,
    /// Threshold on the mean shadow contrast at the cross center, in units of its standard error.
    pub detect_threshold: f64,
    pub min_sections: usize,
}

impl Default for CrossFitConfig {
    fn default() -> Self {
        Self {
            sections_per_half_arm: 9,
            section_half_width: 2.0,
            convention: SigmaConvention::Variance,
            detect_threshold: 6.0,
            min_sections: 3,
        }
    }
}

/// Weighted straight line `c = intercept + slope·(t − reference)` through the
/// section centers of one bar, where `t` runs along the bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmLine {
    pub slope: f64,
    pub intercept: f64,
    pub reference: f64,
    /// Covariance of (intercept, slope), px².
    pub covariance: [[f64; 2]; 2],
}

/// Fitted cross center (image frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub center_x_nm: f64,
    pub center_y_nm: f64,
    /// One standard deviation, propagated from the arm lines.
    pub unc_x_nm: f64,
    pub unc_y_nm: f64,
    /// Sections used on the horizontal and vertical bar.
    pub n_sections_used: (usize, usize),
    /// Bar along x: center y as a function of x (pixels).
    pub horizontal: ArmLine,
    /// Bar along y: center x as a function of y (pixels).
    pub vertical: ArmLine,
}

/// One fitted cross-section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionFit {
    /// Bar center along the profile, in the coordinates of the profile samples.
    pub center: f64,
    /// Half of the 95.4 % interval of the center.
    pub unc: f64,
    pub amplitude: f64,
    pub sigma: f64,
}

/// Decoded grid label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLabel {
    pub row: u8,
    pub column: u8,
}

impl GridLabel {
    pub fn code(&self) -> u8 {
        (self.row << 4) | self.column
    }
}

/// Region found around an expected grid node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedCross {
    /// Index into the nominal node list.
    pub node: usize,
    pub roi: Roi,
}

/// Fits the erf-edge bar model to a profile sampled at `0, 1, …, n−1`.
///
/// The returned center is in sample units; `unc` is half the 95.4 %
/// confidence interval.
pub fn fit_arm_section(profile: &[f64], d: f64, convention: SigmaConvention) -> Result<SectionFit> {
    if !(d > 0.0) {
        return Err(Error::InvalidInput(format!("arm width {d} must be positive")));
    }
    if (profile.len() as f64) < 3.0 * d || profile.len() < 6 {
        return Err(Error::InvalidInput(format!(
            "profile of {} samples is shorter than 3·d = {:.1}",
            profile.len(),
            3.0 * d
        )));
    }
    let n = profile.len();
    let reference = (n as f64 - 1.0) / 2.0;
    let coords: Vec<f64> = (0..n).map(|i| i as f64 - reference).collect();

    let edge = (n / 6).max(2);
    let mut ends: Vec<f64> = profile[..edge].iter().chain(&profile[n - edge..]).cloned().collect();
    ends.sort_by(f64::total_cmp);
    let base = ends[ends.len() / 2];
    let peak = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s0, mut s1) = (0.0, 0.0);
    for (&x, &v) in coords.iter().zip(profile) {
        let w = (v - base).max(0.0);
        s0 += w;
        s1 += w * x;
    }
    let c0 = if s0 > 0.0 { s1 / s0 } else { 0.0 };
    let mut s2 = 0.0;
    for (&x, &v) in coords.iter().zip(profile) {
        s2 += (v - base).max(0.0) * (x - c0).powi(2);
    }
    let m2 = if s0 > 0.0 { s2 / s0 } else { d * d };
    let blur_var = (m2 - d * d / 12.0).clamp(0.25, 4.0 * d * d);
    let sigma0 = match convention {
        SigmaConvention::Variance => blur_var,
        SigmaConvention::StdDev => blur_var.sqrt(),
    };
    let sigma_max = match convention {
        SigmaConvention::Variance => 16.0 * d * d,
        SigmaConvention::StdDev => 4.0 * d,
    };
    let half = reference;
    let amp0 = (peak - base).max(1e-9);
    let fit = FitProblem::new(vec![amp0, c0.clamp(-half, half), sigma0, 0.0, base])
        .with_bounds(
            vec![0.0, -half, 1e-3, f64::NEG_INFINITY, f64::NEG_INFINITY],
            vec![f64::INFINITY, half, sigma_max, f64::INFINITY, f64::INFINITY],
        )
        .with_max_iterations(100)
        .with_tolerance(1e-9);
    let family = ErfEdgeFamily { width: d, convention };
    let res = fit_curve(&family, &coords, profile, fit)?;
    if !res.converged {
        return Err(Error::FitFailed(format!(
            "section fit did not converge after {} iterations",
            res.iterations
        )));
    }
    let unc = res.ci95[1];
    if !(unc.is_finite()) {
        return Err(Error::FitFailed("section center has no finite uncertainty".into()));
    }
    Ok(SectionFit {
        center: res.params[1] + reference,
        unc: unc.max(1e-12),
        amplitude: res.params[0],
        sigma: res.params[2],
    })
}

/// Locates each expected cross near its nominal node (pixel coordinates) in a
/// preprocessed image where shadows are positive. Nodes without enough
/// contrast, or whose fitting region would leave the frame, are skipped.
pub fn detect_crosses(img: &Image, nodes_px: &[(f64, f64)], grid: &MarkerGrid, cfg: &CrossFitConfig) -> Vec<DetectedCross> {
    let p = img.pixel_pitch();
    let l = grid.arm_length_nm / p;
    let d = grid.arm_width_nm / p;
    let (w, h) = (img.width() as isize, img.height() as isize);
    let side = roi_side(grid, p);
    let mut out = Vec::new();
    for (k, &(nx, ny)) in nodes_px.iter().enumerate() {
        let reach = (l + 2.0 * d).ceil() as isize;
        let x0 = (nx.round() as isize - reach).max(0);
        let x1 = (nx.round() as isize + reach).min(w - 1);
        let y0 = (ny.round() as isize - reach).max(0);
        let y1 = (ny.round() as isize + reach).min(h - 1);
        if x1 - x0 < 8 || y1 - y0 < 8 {
            continue;
        }
        let (x0, x1, y0, y1) = (x0 as usize, x1 as usize, y0 as usize, y1 as usize);
        let mut window = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1));
        for y in y0..=y1 {
            window.extend_from_slice(&img.row(y)[x0..=x1]);
        }
        let (med, mad) = median_mad(&window);
        let mut cols = vec![0.0; x1 - x0 + 1];
        let mut rows = vec![0.0; y1 - y0 + 1];
        for y in y0..=y1 {
            for x in x0..=x1 {
                let v = img.get(x, y) - med;
                cols[x - x0] += v;
                rows[y - y0] += v;
            }
        }
        let cx = refine_peak(&cols, d) + x0 as f64;
        let cy = refine_peak(&rows, d) + y0 as f64;

        let r = (d / 2.0).max(1.0);
        let mut sum = 0.0;
        let mut count = 0.0;
        for y in (cy - r).round().max(0.0) as usize..=((cy + r).round() as usize).min(img.height() - 1) {
            for x in (cx - r).round().max(0.0) as usize..=((cx + r).round() as usize).min(img.width() - 1) {
                sum += img.get(x, y) - med;
                count += 1.0;
            }
        }
        let contrast = sum / count;
        let noise = 1.4826 * mad / f64::sqrt(count);
        if !(contrast > 0.0 && contrast > cfg.detect_threshold * noise) {
            tracing::debug!("node {k}: shadow contrast {contrast:.1} below threshold");
            continue;
        }
        match Roi::centered((cx, cy), side, img.width(), img.height()) {
            Some(mut roi) => {
                roi.center = (cx, cy);
                out.push(DetectedCross { node: k, roi });
            }
            None => tracing::debug!("node {k}: cross clipped by the frame edge"),
        }
    }
    out
}

/// Side of the square region needed to fit a whole cross, pixels.
pub fn roi_side(grid: &MarkerGrid, pitch: f64) -> usize {
    let reach = (grid.arm_length_nm + 3.0 * grid.arm_width_nm) / pitch;
    2 * reach.ceil() as usize + 1
}

fn refine_peak(profile: &[f64], d: f64) -> f64 {
    let imax = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let r = d.ceil().max(1.0) as usize;
    let lo = imax.saturating_sub(r);
    let hi = (imax + r).min(profile.len() - 1);
    let base = profile[lo..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
    let (mut s0, mut s1) = (0.0, 0.0);
    for (i, &v) in profile.iter().enumerate().take(hi + 1).skip(lo) {
        s0 += v - base;
        s1 += (v - base) * i as f64;
    }
    if s0 > 0.0 {
        s1 / s0
    } else {
        imax as f64
    }
}

/// Offsets (px) of the section positions from the cross center along one
/// half-arm: evenly spaced by `d` (or tighter for short arms) and centered on
/// the free part of the arm beyond the central junction.
fn section_offsets(l: f64, d: f64, n: usize) -> Vec<f64> {
    let start = d;
    let end = l - 0.5 * d;
    let mid = 0.5 * (start + end);
    let spacing = if n > 1 { d.min((end - start) / (n - 1) as f64) } else { 0.0 };
    (0..n)
        .map(|k| mid + (k as f64 - (n as f64 - 1.0) / 2.0) * spacing)
        .collect()
}

struct SectionPoint {
    along: f64,
    center: f64,
    sigma: f64,
}

/// Weighted fit of `center = a + b·(along − reference)`, with one pass of
/// 4σ outlier rejection. Covariance is scaled by the reduced χ².
fn fit_line(points: &[SectionPoint], reference: f64, min_points: usize) -> Option<(ArmLine, usize)> {
    let solve = |pts: &[&SectionPoint]| -> Option<ArmLine> {
        let (mut sw, mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for p in pts {
            let w = 1.0 / (p.sigma * p.sigma);
            let u = p.along - reference;
            sw += w;
            su += w * u;
            suu += w * u * u;
            sy += w * p.center;
            suy += w * u * p.center;
        }
        let det = sw * suu - su * su;
        if !(det > 0.0) {
            return None;
        }
        let a = (suu * sy - su * suy) / det;
        let b = (sw * suy - su * sy) / det;
        let n = pts.len() as f64;
        let chi2: f64 = pts
            .iter()
            .map(|p| ((p.center - a - b * (p.along - reference)) / p.sigma).powi(2))
            .sum();
        let scale = if n > 2.0 { chi2 / (n - 2.0) } else { 1.0 };
        Some(ArmLine {
            slope: b,
            intercept: a,
            reference,
            covariance: [
                [scale * suu / det, -scale * su / det],
                [-scale * su / det, scale * sw / det],
            ],
        })
    };
    let all: Vec<&SectionPoint> = points.iter().collect();
    if all.len() < min_points {
        return None;
    }
    let first = solve(&all)?;
    let scale = {
        let n = all.len() as f64;
        let chi2: f64 = all
            .iter()
            .map(|p| ((p.center - first.intercept - first.slope * (p.along - reference)) / p.sigma).powi(2))
            .sum();
        (chi2 / (n - 2.0).max(1.0)).max(1.0).sqrt()
    };
    let kept: Vec<&SectionPoint> = all
        .iter()
        .copied()
        .filter(|p| {
            let r = p.center - first.intercept - first.slope * (p.along - reference);
            r.abs() <= 4.0 * p.sigma * scale
        })
        .collect();
    if kept.len() == all.len() {
        return Some((first, all.len()));
    }
    if kept.len() < min_points {
        return None;
    }
    solve(&kept).map(|l| (l, kept.len()))
}

/// 2×2 covariance matrix.
pub type Cov2 = [[f64; 2]; 2];

/// Intersection of `y = a_h + b_h·(x − x_ref)` and `x = a_v + b_v·(y − y_ref)`
/// with its covariance (pixels).
pub fn intersect(h: &ArmLine, v: &ArmLine) -> Result<((f64, f64), Cov2)> {
    let (xr, yr) = (h.reference, v.reference);
    let ah = h.intercept - yr;
    let av = v.intercept - xr;
    let (bh, bv) = (h.slope, v.slope);
    let den = 1.0 - bh * bv;
    if den.abs() < 1e-9 {
        return Err(Error::Conditioning("arm lines are parallel".into()));
    }
    let u = (av + bv * ah) / den;
    let w = ah + bh * u;
    // gradients with respect to (a_h, b_h, a_v, b_v)
    let du = [bv / den, u * bv / den, 1.0 / den, (ah + av * bh) / (den * den)];
    let dw = [1.0 + bh * du[0], u + bh * du[1], bh * du[2], bh * du[3]];
    let cov_block = |g: &[f64; 4], f: &[f64; 4]| -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                s += g[i] * h.covariance[i][j] * f[j];
                s += g[2 + i] * v.covariance[i][j] * f[2 + j];
            }
        }
        s
    };
    let cov = [
        [cov_block(&du, &du), cov_block(&du, &dw)],
        [cov_block(&dw, &du), cov_block(&dw, &dw)],
    ];
    Ok(((xr + u, yr + w), cov))
}

/// Fits the cross inside `roi` of a preprocessed (shadows positive) image.
///
/// Each bar is sampled by `sections_per_half_arm` single-pixel profiles on
/// both sides of the center; every profile is fitted with the erf-edge model
/// with `d` fixed, the section centers of each bar are fitted by a weighted
/// line, and the center is the intersection of the two lines.
pub fn fit_cross(img: &Image, roi: &Roi, grid: &MarkerGrid, cfg: &CrossFitConfig) -> Result<CrossFit> {
    let p = img.pixel_pitch();
    let d = grid.arm_width_nm / p;
    let l = grid.arm_length_nm / p;
    let (cx, cy) = roi.center;
    let hw = (cfg.section_half_width * d).ceil() as isize;
    let offsets = section_offsets(l, d, cfg.sections_per_half_arm);

    let inside_x = |x: isize| x >= roi.x0 as isize && x < (roi.x0 + roi.width) as isize;
    let inside_y = |y: isize| y >= roi.y0 as isize && y < (roi.y0 + roi.height) as isize;

    let mut horiz = Vec::new();
    let mut vert = Vec::new();
    for &o in &offsets {
        for sign in [-1.0, 1.0] {
            // column through the horizontal bar
            let x = (cx + sign * o).round() as isize;
            let yc = cy.round() as isize;
            if inside_x(x) && inside_y(yc - hw) && inside_y(yc + hw) {
                let prof: Vec<f64> = (yc - hw..=yc + hw).map(|y| img.get(x as usize, y as usize)).collect();
                match fit_arm_section(&prof, d, cfg.convention) {
                    Ok(s) => horiz.push(SectionPoint {
                        along: x as f64,
                        center: s.center + (yc - hw) as f64,
                        sigma: s.unc / 2.0,
                    }),
                    Err(e) => tracing::debug!("horizontal section at x={x} discarded: {e}"),
                }
            }
            // row through the vertical bar
            let y = (cy + sign * o).round() as isize;
            let xc = cx.round() as isize;
            if inside_y(y) && inside_x(xc - hw) && inside_x(xc + hw) {
                let prof = &img.row(y as usize)[(xc - hw) as usize..=(xc + hw) as usize];
                match fit_arm_section(prof, d, cfg.convention) {
                    Ok(s) => vert.push(SectionPoint {
                        along: y as f64,
                        center: s.center + (xc - hw) as f64,
                        sigma: s.unc / 2.0,
                    }),
                    Err(e) => tracing::debug!("vertical section at y={y} discarded: {e}"),
                }
            }
        }
    }
    let min = cfg.min_sections.max(3);
    let h_line = fit_line(&horiz, cx, min);
    let v_line = fit_line(&vert, cy, min);
    let ((h, nh), (v, nv)) = match (h_line, v_line) {
        (Some(h), Some(v)) => (h, v),
        _ => {
            return Err(Error::DegenerateCross {
                horizontal: horiz.len(),
                vertical: vert.len(),
            })
        }
    };
    let ((x, y), cov) = intersect(&h, &v)?;
    Ok(CrossFit {
        center_x_nm: x * p,
        center_y_nm: y * p,
        unc_x_nm: cov[0][0].max(0.0).sqrt() * p,
        unc_y_nm: cov[1][1].max(0.0).sqrt() * p,
        n_sections_used: (nh, nv),
        horizontal: h,
        vertical: v,
    })
}

/// One row of `markers.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossRow {
    pub cross_id: String,
    pub x_nm: f64,
    pub y_nm: f64,
    pub unc_x_nm: f64,
    pub unc_y_nm: f64,
    pub n_sections: usize,
}

pub const CROSS_HEADER: [&str; 6] = ["cross_id", "x_nm", "y_nm", "unc_x_nm", "unc_y_nm", "n_sections"];

impl CrossRow {
    pub fn new(id: impl Into<String>, c: &CrossFit) -> Self {
        Self {
            cross_id: id.into(),
            x_nm: c.center_x_nm,
            y_nm: c.center_y_nm,
            unc_x_nm: c.unc_x_nm,
            unc_y_nm: c.unc_y_nm,
            n_sections: c.n_sections_used.0 + c.n_sections_used.1,
        }
    }
}

struct Blob {
    n: f64,
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

/// Decodes a label from a region where the rectangles are positive signal.
///
/// Pixels above half the peak (relative to the median) are grouped into
/// 4-connected blobs; the eight largest are split into two rows by their
/// vertical position, read left to right, and each blob's second moments
/// decide horizontal (0) or vertical (1).
pub fn decode_label(roi: &Image) -> Result<GridLabel> {
    let (w, h) = (roi.width(), roi.height());
    let (med, _) = median_mad(roi.counts());
    let peak = roi.max();
    if !(peak > med) {
        return Err(Error::LabelDecode("no signal in label region".into()));
    }
    let thr = med + 0.5 * (peak - med);
    let mut label = vec![usize::MAX; w * h];
    let mut blobs: Vec<Blob> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if label[start] != usize::MAX || roi.counts()[start] <= thr {
            continue;
        }
        let id = blobs.len();
        let mut b = Blob {
            n: 0.0,
            mx: 0.0,
            my: 0.0,
            sxx: 0.0,
            syy: 0.0,
            sxy: 0.0,
        };
        let mut pix = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pix.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if label[j] == usize::MAX && roi.counts()[j] > thr {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        for &i in &pix {
            b.n += 1.0;
            b.mx += (i % w) as f64;
            b.my += (i / w) as f64;
        }
        b.mx /= b.n;
        b.my /= b.n;
        for &i in &pix {
            let dx = (i % w) as f64 - b.mx;
            let dy = (i / w) as f64 - b.my;
            b.sxx += dx * dx;
            b.syy += dy * dy;
            b.sxy += dx * dy;
        }
        blobs.push(b);
    }
    let expected = LABEL_ROWS * LABEL_COLS;
    blobs.sort_by(|a, b| b.n.total_cmp(&a.n));
    if blobs.len() < expected {
        return Err(Error::LabelDecode(format!("found {} rectangles, expected {expected}", blobs.len())));
    }
    let smallest_kept = blobs[expected - 1].n;
    if blobs.len() > expected && blobs[expected].n > 0.5 * smallest_kept {
        return Err(Error::LabelDecode("more rectangle-sized blobs than label cells".into()));
    }
    blobs.truncate(expected);
    blobs.sort_by(|a, b| a.my.total_cmp(&b.my));
    let mut code = 0u8;
    for r in 0..LABEL_ROWS {
        let mut row: Vec<&Blob> = blobs[r * LABEL_COLS..(r + 1) * LABEL_COLS].iter().collect();
        row.sort_by(|a, b| a.mx.total_cmp(&b.mx));
        for (c, b) in row.iter().enumerate() {
            let tr = b.sxx + b.syy;
            let det = b.sxx * b.syy - b.sxy * b.sxy;
            let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
            let (l1, l2) = (0.5 * tr + disc, (0.5 * tr - disc).max(1e-12));
            let aspect = (l1 / l2).sqrt();
            if aspect < 1.3 {
                return Err(Error::LabelDecode(format!(
                    "rectangle {} has ambiguous aspect ratio {aspect:.2}",
                    r * LABEL_COLS + c
                )));
            }
            if b.syy > b.sxx {
                code |= 1 << (7 - (r * LABEL_COLS + c));
            }
        }
    }
    Ok(GridLabel {
        row: code >> 4,
        column: code & 0xF,
    })
}

/// Region (pixels) of the label belonging to a cross at `cross_px`.
pub fn label_roi(cross_px: (f64, f64), grid: &MarkerGrid, pitch: f64, width: usize, height: usize) -> Option<Roi> {
    let (lx, ly) = grid.label_center((cross_px.0 * pitch, cross_px.1 * pitch));
    let half_w = (LABEL_COLS as f64 / 2.0 * grid.label_cell_nm + grid.label_rect_long_nm / 2.0) / pitch + 3.0;
    let half_h = (LABEL_ROWS as f64 / 2.0 * grid.label_cell_nm + grid.label_rect_long_nm / 2.0) / pitch + 3.0;
    let (cx, cy) = (lx / pitch, ly / pitch);
    let x0 = (cx - half_w).floor();
    let y0 = (cy - half_h).floor();
    let x1 = (cx + half_w).ceil();
    let y1 = (cy + half_h).ceil();
    if x0 < 0.0 || y0 < 0.0 || x1 >= width as f64 || y1 >= height as f64 {
        return None;
    }
    Some(Roi {
        x0: x0 as usize,
        y0: y0 as usize,
        width: (x1 - x0) as usize + 1,
        height: (y1 - y0) as usize + 1,
        center: (cx, cy),
        merged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitcore::ErfEdgeModel;
    use crate::imgproc::{inverted_residual, subtract_background, BackgroundModel};
    use crate::synth::{render, CrossSpec, Frame, ImagingMode, LabelSpec, Scene};

    fn section(xc: f64, n: usize) -> Vec<f64> {
        let m = ErfEdgeModel {
            amplitude: 800.0,
            center: xc,
            sigma: 16.0,
            width: 8.5,
            slope: 0.0,
            offset: 40.0,
            convention: SigmaConvention::Variance,
        };
        (0..n).map(|i| m.eval(i as f64)).collect()
    }

    #[test]
    fn section_exact_recovery_and_mirror() {
        let prof = section(20.30, 41);
        let s = fit_arm_section(&prof, 8.5, SigmaConvention::Variance).unwrap();
        assert!((s.center - 20.30).abs() < 1e-3, "{s:?}");
        let mirrored: Vec<f64> = prof.iter().rev().cloned().collect();
        let m = fit_arm_section(&mirrored, 8.5, SigmaConvention::Variance).unwrap();
        // reflection about the profile midpoint 20 maps 20.30 to 19.70
        assert!((m.center - (40.0 - 20.30)).abs() < 1e-3);
        assert!(fit_arm_section(&prof[..20], 8.5, SigmaConvention::Variance).is_err());
    }

    fn line(a: f64, b: f64, reference: f64) -> ArmLine {
        ArmLine {
            slope: b,
            intercept: a,
            reference,
            covariance: [[1e-4, 0.0], [0.0, 1e-6]],
        }
    }

    #[test]
    fn perpendicular_intersection_is_exact() {
        let ((x, y), cov) = intersect(&line(37.25, 0.0, 81.5), &line(81.5, 0.0, 37.25)).unwrap();
        assert!((x - 81.5).abs() < 1e-9 && (y - 37.25).abs() < 1e-9);
        assert!((cov[0][0] - 1e-4).abs() < 1e-12);
        // tilted lines: y = 10 + 0.1 (x − 0), x = 20 − 0.1 (y − 0)
        let ((x, y), _) = intersect(&line(10.0, 0.1, 0.0), &line(20.0, -0.1, 0.0)).unwrap();
        assert!((y - 10.0 - 0.1 * x).abs() < 1e-12);
        assert!((x - 20.0 + 0.1 * y).abs() < 1e-12);
    }

    fn cross_scene(cx_px: f64, cy_px: f64) -> Scene {
        let mut s = Scene::empty(
            ImagingMode::IntrinsicMarkers,
            Frame {
                width: 240,
                height: 240,
                pitch_nm: 59.0,
            },
        );
        s.background = BackgroundModel {
            amplitude: 0.0,
            center_x: 120.0,
            center_y: 120.0,
            sigma_x: 500.0,
            sigma_y: 500.0,
            offset: 1000.0,
        };
        s.crosses.push(CrossSpec {
            center_x_nm: cx_px * 59.0,
            center_y_nm: cy_px * 59.0,
            arm_length_nm: 5000.0,
            arm_width_nm: 500.0,
            depth: 1.0,
        });
        s
    }

    #[test]
    fn noise_free_cross_is_exact() {
        let s = cross_scene(120.37, 118.81);
        let img = render(&s).unwrap();
        let (_, bg) = subtract_background(&img);
        let inv = inverted_residual(&img, &bg);
        let grid = MarkerGrid::default();
        let cfg = CrossFitConfig::default();
        let found = detect_crosses(&inv, &[(120.0, 120.0)], &grid, &cfg);
        assert_eq!(found.len(), 1);
        assert!((found[0].roi.center.0 - 120.37).abs() < 2.0);
        let c = fit_cross(&inv, &found[0].roi, &grid, &cfg).unwrap();
        assert!((c.center_x_nm / 59.0 - 120.37).abs() < 1e-3, "{c:?}");
        assert!((c.center_y_nm / 59.0 - 118.81).abs() < 1e-3, "{c:?}");
        assert_eq!(c.n_sections_used, (18, 18), "{c:?}");
    }

    #[test]
    fn blank_image_has_no_crosses() {
        let img = Image::new(220, 220, vec![5.0; 220 * 220], 59.0).unwrap();
        let found = detect_crosses(&img, &[(110.0, 110.0)], &MarkerGrid::default(), &CrossFitConfig::default());
        assert!(found.is_empty());
    }

    fn label_image(code: u8, rotation: f64) -> Image {
        let mut s = Scene::empty(
            ImagingMode::IntrinsicMarkers,
            Frame {
                width: 160,
                height: 100,
                pitch_nm: 59.0,
            },
        );
        s.background.offset = 1000.0;
        s.rotation_deg = rotation;
        s.labels.push(LabelSpec {
            center_x_nm: 80.0 * 59.0,
            center_y_nm: 50.0 * 59.0,
            code,
            rect_long_nm: 1200.0,
            rect_short_nm: 400.0,
            cell_nm: 1600.0,
            depth: 1.0,
        });
        let img = render(&s).unwrap();
        let flat = BackgroundModel::constant(1000.0);
        inverted_residual(&img, &flat)
    }

    #[test]
    fn decodes_labels() {
        assert_eq!(decode_label(&label_image(0, 0.0)).unwrap(), GridLabel { row: 0, column: 0 });
        let l = decode_label(&label_image(0b1011, 0.0)).unwrap();
        assert_eq!(l, GridLabel { row: 0, column: 11 });
        let l = decode_label(&label_image(0x3A, 0.3)).unwrap();
        assert_eq!(l.code(), 0x3A);
    }

    #[test]
    fn featureless_label_fails() {
        let img = Image::new(40, 40, vec![3.0; 1600], 59.0).unwrap();
        assert!(matches!(decode_label(&img), Err(Error::LabelDecode(_))));
    }
}
