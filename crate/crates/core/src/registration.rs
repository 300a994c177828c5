//! Mapping from an image frame into the global marker frame, and matching of
//! detections across fabrication steps.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markers::CrossFit;

/// Similarity transform `g = s·R(θ)·(p − c) + t` from image nm to global nm,
/// with `c` the weighted centroid of the crosses used to solve it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTransform {
    pub rotation_deg: f64,
    pub translation_nm: (f64, f64),
    pub scale: f64,
    pub residual_rms_nm: f64,
    /// Image-frame pivot `c`.
    pub pivot_nm: (f64, f64),
    /// Covariance of `(s·cos θ, s·sin θ, t_x, t_y)`.
    pub covariance: [[f64; 4]; 4],
    /// Set when the residual is large compared with the cross uncertainties,
    /// which usually means a cross was matched to the wrong node.
    pub suspect: bool,
}

impl FrameTransform {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_nm: (0.0, 0.0),
            scale: 1.0,
            residual_rms_nm: 0.0,
            pivot_nm: (0.0, 0.0),
            covariance: [[0.0; 4]; 4],
            suspect: false,
        }
    }

    fn ab(&self) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        (self.scale * c, self.scale * s)
    }

    /// Maps an image-frame point (nm) into the global frame.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (a, b) = self.ab();
        let (u, v) = (x - self.pivot_nm.0, y - self.pivot_nm.1);
        (
            a * u - b * v + self.translation_nm.0,
            b * u + a * v + self.translation_nm.1,
        )
    }

    /// Covariance (nm²) of the mapped position caused by the transform
    /// parameters alone.
    pub fn propagated_covariance(&self, x: f64, y: f64) -> [[f64; 2]; 2] {
        let (u, v) = (x - self.pivot_nm.0, y - self.pivot_nm.1);
        let jx = [u, -v, 1.0, 0.0];
        let jy = [v, u, 0.0, 1.0];
        let q = |g: &[f64; 4], f: &[f64; 4]| -> f64 {
            g.iter()
                .zip(&self.covariance)
                .map(|(gi, row)| gi * row.iter().zip(f).map(|(c, fj)| c * fj).sum::<f64>())
                .sum()
        };
        [[q(&jx, &jx), q(&jx, &jy)], [q(&jy, &jx), q(&jy, &jy)]]
    }
}

/// What a global point was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Marker,
    Emitter,
    Waveguide,
}

/// A position in the global frame with its total radial uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPoint {
    pub id: String,
    pub x_nm: f64,
    pub y_nm: f64,
    pub unc_nm: f64,
    pub source: PointSource,
}

/// Image-frame point with per-axis uncertainty (nm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePoint {
    pub x_nm: f64,
    pub y_nm: f64,
    pub unc_x_nm: f64,
    pub unc_y_nm: f64,
}

/// Weighted least-squares similarity transform taking the observed cross
/// centers onto their nominal grid positions.
pub fn solve_transform(observed: &[CrossFit], nominal: &[(f64, f64)]) -> Result<FrameTransform> {
    if observed.len() != nominal.len() {
        return Err(Error::InvalidInput(format!(
            "{} observed crosses but {} nominal positions",
            observed.len(),
            nominal.len()
        )));
    }
    if observed.len() < 2 {
        return Err(Error::Underdetermined(observed.len()));
    }
    let weight = |c: &CrossFit| {
        let u2 = 0.5 * (c.unc_x_nm.powi(2) + c.unc_y_nm.powi(2));
        if u2 > 0.0 && u2.is_finite() {
            1.0 / u2
        } else {
            1.0
        }
    };
    let sw: f64 = observed.iter().map(weight).sum();
    let pivot = (
        observed.iter().map(|c| weight(c) * c.center_x_nm).sum::<f64>() / sw,
        observed.iter().map(|c| weight(c) * c.center_y_nm).sum::<f64>() / sw,
    );
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for (c, &(gx, gy)) in observed.iter().zip(nominal) {
        let w = weight(c);
        let (u, v) = (c.center_x_nm - pivot.0, c.center_y_nm - pivot.1);
        for (row, target) in [(Vector4::new(u, -v, 1.0, 0.0), gx), (Vector4::new(v, u, 0.0, 1.0), gy)] {
            ata += w * row * row.transpose();
            atb += w * row * target;
        }
    }
    let inv = ata
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("cross positions do not constrain a similarity transform".into()))?;
    let p = inv * atb;
    let (a, b) = (p[0], p[1]);
    let scale = a.hypot(b);
    if !(0.9..=1.1).contains(&scale) {
        return Err(Error::Contract(format!(
            "fitted scale {scale:.4} is implausible; crosses are probably mismatched"
        )));
    }
    let mut covariance = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            covariance[i][j] = inv[(i, j)];
        }
    }
    let mut t = FrameTransform {
        rotation_deg: b.atan2(a).to_degrees(),
        translation_nm: (p[2], p[3]),
        scale,
        residual_rms_nm: 0.0,
        pivot_nm: pivot,
        covariance,
        suspect: false,
    };
    let mut ss = 0.0;
    for (c, &(gx, gy)) in observed.iter().zip(nominal) {
        let (mx, my) = t.apply(c.center_x_nm, c.center_y_nm);
        ss += (mx - gx).powi(2) + (my - gy).powi(2);
    }
    t.residual_rms_nm = (ss / observed.len() as f64).sqrt();
    let mut uncs: Vec<f64> = observed.iter().map(|c| c.unc_x_nm.max(c.unc_y_nm)).collect();
    uncs.sort_by(f64::total_cmp);
    let med = uncs[uncs.len() / 2];
    if t.residual_rms_nm > 3.0 * med {
        t.suspect = true;
        tracing::warn!(
            "registration residual {:.1} nm exceeds 3x the median cross uncertainty {:.1} nm",
            t.residual_rms_nm,
            med
        );
    }
    Ok(t)
}

/// Maps `p` into the global frame. The radial uncertainty combines the point
/// itself, the transform covariance at `p`, and the positional uncertainty of
/// the marker defining the frame (`marker_unc` per axis).
pub fn to_global(id: impl Into<String>, p: &ImagePoint, t: &FrameTransform, marker_unc: f64, source: PointSource) -> GlobalPoint {
    let (x, y) = t.apply(p.x_nm, p.y_nm);
    let prop = t.propagated_covariance(p.x_nm, p.y_nm);
    let frame2 = prop[0][0] + prop[1][1] + 2.0 * marker_unc * marker_unc;
    let point2 = p.unc_x_nm.powi(2) + p.unc_y_nm.powi(2);
    GlobalPoint {
        id: id.into(),
        x_nm: x,
        y_nm: y,
        unc_nm: (point2 + frame2).sqrt(),
        source,
    }
}

/// Frame contribution to [`to_global`]'s uncertainty at `(x, y)`.
pub fn frame_uncertainty(t: &FrameTransform, x: f64, y: f64, marker_unc: f64) -> f64 {
    let prop = t.propagated_covariance(x, y);
    (prop[0][0] + prop[1][1] + 2.0 * marker_unc * marker_unc).sqrt()
}

/// Result of matching pre- and post-fabrication detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `(pre index, post index, distance nm)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub matched: usize,
    pub total: usize,
    pub yield_fraction: f64,
}

/// Greedy nearest-pair matching within `radius_nm`: all candidate pairs are
/// taken in order of increasing distance while both ends are free.
pub fn correlate_devices(pre: &[GlobalPoint], post: &[GlobalPoint], radius_nm: f64) -> Result<Correlation> {
    if !(radius_nm > 0.0) {
        return Err(Error::InvalidInput(format!("matching radius {radius_nm} must be positive")));
    }
    let mut cand = Vec::new();
    for (i, a) in pre.iter().enumerate() {
        for (j, b) in post.iter().enumerate() {
            let d = (a.x_nm - b.x_nm).hypot(a.y_nm - b.y_nm);
            if d <= radius_nm {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut used_pre = vec![false; pre.len()];
    let mut used_post = vec![false; post.len()];
    let mut pairs = Vec::new();
    for (d, i, j) in cand {
        if !used_pre[i] && !used_post[j] {
            used_pre[i] = true;
            used_post[j] = true;
            pairs.push((i, j, d));
        }
    }
    pairs.sort_by_key(|p| p.0);
    let total = pre.len().max(post.len());
    let matched = pairs.len();
    Ok(Correlation {
        pairs,
        matched,
        total,
        yield_fraction: if total > 0 { matched as f64 / total as f64 } else { 0.0 },
    })
}
