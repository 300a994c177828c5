//! Spectral shifts and quadratic Stark-shift analysis.

mod plateau;
mod spectrum;

pub use plateau::{
    extract_plateaus, read_plateau_map, write_plateau_map, ExcitonLabel, PlateauConfig, PlateauMap, PlateauPoint,
    PlateauTrace,
};
pub use spectrum::{
    fit_peak, shift_stats, spectral_shift, GroupStats, Grouping, PeakFit, ShiftRecord, SpectralShift, Spectrum,
    Structure, PEAK_WINDOW,
};

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Planck constant times speed of light, eV·nm.
pub const HC_EV_NM: f64 = 1239.842;

/// Built-in field of the diode at zero bias, kV/cm.
pub const BUILT_IN_FIELD_KV_CM: f64 = 224.24;

/// Intrinsic-region thickness, nm.
pub const DIODE_THICKNESS_NM: f64 = 70.0;

/// Maps bias voltage to electric field across the diode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    /// Built-in voltage, V.
    pub v_i: f64,
    /// Intrinsic-region thickness, nm.
    pub thickness_nm: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self::from_built_in_field(BUILT_IN_FIELD_KV_CM, DIODE_THICKNESS_NM)
    }
}

impl FieldConfig {
    /// Configuration whose zero-bias field is `−field_kv_cm`.
    pub fn from_built_in_field(field_kv_cm: f64, thickness_nm: f64) -> Self {
        Self {
            v_i: field_kv_cm * thickness_nm / 1e4,
            thickness_nm,
        }
    }
}

/// `F = (V − V_i)/t` in kV/cm (1 V/nm = 10⁴ kV/cm).
pub fn field(v: f64, cfg: &FieldConfig) -> f64 {
    (v - cfg.v_i) / cfg.thickness_nm * 1e4
}

/// Transition energy in meV for a Stark model at field `f` (kV/cm).
pub fn stark_energy_mev(lambda0_nm: f64, p_z: f64, alpha: f64, f: f64) -> f64 {
    HC_EV_NM / lambda0_nm * 1e3 - p_z * f + alpha * f * f
}

/// Emission wavelength for a Stark model at field `f`.
pub fn stark_wavelength_nm(lambda0_nm: f64, p_z: f64, alpha: f64, f: f64) -> f64 {
    HC_EV_NM * 1e3 / stark_energy_mev(lambda0_nm, p_z, alpha, f)
}

/// Quadratic Stark model `E(F) = hc/λ₀ − p_z·F + α·F²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarkModel {
    pub lambda0_nm: f64,
    /// meV per kV/cm.
    pub p_z: f64,
    /// meV per (kV/cm)².
    pub alpha: f64,
    pub field: FieldConfig,
    /// Half-widths of the 95.4 % intervals of (λ₀, p_z, α).
    pub ci95: [f64; 3],
    /// Covariance of (E₀ in meV, p_z, α).
    pub covariance: [[f64; 3]; 3],
    pub n_points: usize,
}

impl StarkModel {
    /// Field of the energy extremum.
    pub fn vertex_field(&self) -> f64 {
        self.p_z / (2.0 * self.alpha)
    }

    pub fn energy_mev(&self, f: f64) -> f64 {
        stark_energy_mev(self.lambda0_nm, self.p_z, self.alpha, f)
    }

    pub fn wavelength_nm(&self, f: f64) -> f64 {
        stark_wavelength_nm(self.lambda0_nm, self.p_z, self.alpha, f)
    }
}

/// Weighted least-squares fit of the quadratic Stark model to a plateau trace.
///
/// Wavelengths are converted to energies and the design `[1, −F, F²]` is
/// solved by SVD after centering and scaling the field; the covariance is
/// scaled by the weighted residual variance, so uniform rescaling of the
/// weights changes neither parameters nor intervals.
pub fn fit_stark(trace: &PlateauTrace, cfg: &FieldConfig) -> Result<StarkModel> {
    let pts = &trace.points;
    let n = pts.len();
    if n < 5 {
        return Err(Error::InvalidInput(format!("trace has {n} points, need at least 5")));
    }
    if pts.iter().any(|p| !(p.weight > 0.0) || !p.wavelength_nm.is_finite() || !(p.wavelength_nm > 0.0)) {
        return Err(Error::InvalidInput("trace points need positive weights and wavelengths".into()));
    }
    let f: Vec<f64> = pts.iter().map(|p| field(p.voltage, cfg)).collect();
    let e: Vec<f64> = pts.iter().map(|p| HC_EV_NM / p.wavelength_nm * 1e3).collect();
    let sw: f64 = pts.iter().map(|p| p.weight).sum();
    let fc = pts.iter().zip(&f).map(|(p, x)| p.weight * x).sum::<f64>() / sw;
    let fs = (pts.iter().zip(&f).map(|(p, x)| p.weight * (x - fc).powi(2)).sum::<f64>() / sw).sqrt();
    if !(fs > 1e-9 * (1.0 + fc.abs())) {
        return Err(Error::Conditioning("trace spans no field range".into()));
    }
    // E = c0 + c1·z + c2·z², z = (F − fc)/fs
    let ec = e.iter().sum::<f64>() / n as f64;
    let mut a = DMatrix::zeros(n, 3);
    let mut b = DVector::zeros(n);
    for i in 0..n {
        let sq = pts[i].weight.sqrt();
        let z = (f[i] - fc) / fs;
        a[(i, 0)] = sq;
        a[(i, 1)] = sq * z;
        a[(i, 2)] = sq * z * z;
        b[i] = sq * (e[i] - ec);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax) {
        return Err(Error::Conditioning(format!(
            "quadratic design is rank-deficient (singular values {smin:.3e} / {smax:.3e})"
        )));
    }
    let c = svd
        .solve(&b, 0.0)
        .map_err(|e| Error::Conditioning(format!("quadratic solve failed: {e}")))?;
    let resid = &a * &c - &b;
    let dof = n as f64 - 3.0;
    let s2 = if dof > 0.0 { resid.norm_squared() / dof } else { 0.0 };
    let ata_inv = (a.transpose() * &a)
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("normal matrix is singular".into()))?;
    let cov_c = Matrix3::from_fn(|i, j| s2 * ata_inv[(i, j)]);

    // back to (E0, p_z, α): E = E0 − p_z F + α F²
    let (c0, c1, c2) = (c[0] + ec, c[1], c[2]);
    let alpha = c2 / (fs * fs);
    let lin = c1 / fs - 2.0 * c2 * fc / (fs * fs);
    let e0 = c0 - c1 * fc / fs + c2 * fc * fc / (fs * fs);
    let p_z = -lin;
    // Jacobian of (E0, p_z, α) with respect to (c0, c1, c2)
    let jac = Matrix3::new(
        1.0,
        -fc / fs,
        fc * fc / (fs * fs),
        0.0,
        -1.0 / fs,
        2.0 * fc / (fs * fs),
        0.0,
        0.0,
        1.0 / (fs * fs),
    );
    let cov = jac * cov_c * jac.transpose();
    let lambda0 = HC_EV_NM * 1e3 / e0;
    let dl = HC_EV_NM * 1e3 / (e0 * e0);
    let ci95 = [
        2.0 * dl * cov[(0, 0)].max(0.0).sqrt(),
        2.0 * cov[(1, 1)].max(0.0).sqrt(),
        2.0 * cov[(2, 2)].max(0.0).sqrt(),
    ];
    let mut covariance = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            covariance[i][j] = cov[(i, j)];
        }
    }
    Ok(StarkModel {
        lambda0_nm: lambda0,
        p_z,
        alpha,
        field: *cfg,
        ci95,
        covariance,
        n_points: n,
    })
}

/// Fabrication-induced parameter changes, `after − before`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StarkDelta {
    pub d_lambda0_nm: f64,
    pub d_p_z: f64,
    pub d_alpha: f64,
    /// Root-sum-square of the two 95.4 % half-widths for each component.
    pub ci95: [f64; 3],
}

pub fn compare_stark(before: &StarkModel, after: &StarkModel) -> Result<StarkDelta> {
    if before.field != after.field {
        return Err(Error::Contract(format!(
            "field configurations differ: {:?} vs {:?}",
            before.field, after.field
        )));
    }
    let mut ci95 = [0.0; 3];
    for (i, c) in ci95.iter_mut().enumerate() {
        *c = before.ci95[i].hypot(after.ci95[i]);
    }
    Ok(StarkDelta {
        d_lambda0_nm: after.lambda0_nm - before.lambda0_nm,
        d_p_z: after.p_z - before.p_z,
        d_alpha: after.alpha - before.alpha,
        ci95,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_constants() {
        let cfg = FieldConfig::default();
        assert!((field(0.0, &cfg) + 224.24).abs() < 1e-12);
        assert_eq!(field(cfg.v_i, &cfg), 0.0);
        assert!((cfg.v_i - 1.56968).abs() < 1e-12);
        assert!((field(0.3, &cfg) + 181.4).abs() < 0.05);
        let d = field(1.2, &cfg) - field(0.7, &cfg);
        assert!((d - 0.5 / 70.0 * 1e4).abs() < 1e-9);
    }

    fn trace(lambda0: f64, p_z: f64, alpha: f64, n: usize) -> PlateauTrace {
        let cfg = FieldConfig::default();
        let points = (0..n)
            .map(|i| {
                let v = 3.0 * i as f64 / (n - 1) as f64;
                PlateauPoint {
                    voltage: v,
                    wavelength_nm: stark_wavelength_nm(lambda0, p_z, alpha, field(v, &cfg)),
                    weight: 1.0 + (i % 3) as f64,
                }
            })
            .collect();
        PlateauTrace {
            label: ExcitonLabel::X0,
            points,
        }
    }

    #[test]
    fn noise_free_recovery_and_vertex() {
        let m = fit_stark(&trace(930.0, 5e-3, -5e-4, 40), &FieldConfig::default()).unwrap();
        assert!((m.lambda0_nm / 930.0 - 1.0).abs() < 1e-4);
        assert!((m.p_z / 5e-3 - 1.0).abs() < 1e-4, "{m:?}");
        assert!((m.alpha / -5e-4 - 1.0).abs() < 1e-4);
        assert!((m.vertex_field() - 5e-3 / (2.0 * -5e-4)).abs() < 1e-6);
        let flat = fit_stark(&trace(935.0, 0.0, 0.0, 10), &FieldConfig::default()).unwrap();
        assert!((HC_EV_NM / flat.lambda0_nm - 1.32603).abs() < 1e-5);
    }

    #[test]
    fn rank_deficient_design() {
        let mut t = trace(930.0, 5e-3, -5e-4, 10);
        for p in &mut t.points {
            p.voltage = 1.0;
        }
        assert!(matches!(fit_stark(&t, &FieldConfig::default()), Err(Error::Conditioning(_))));
    }

    #[test]
    fn comparison_requires_same_field() {
        let m = fit_stark(&trace(930.0, 5e-3, -5e-4, 20), &FieldConfig::default()).unwrap();
        let d = compare_stark(&m, &m).unwrap();
        assert_eq!((d.d_lambda0_nm, d.d_p_z, d.d_alpha), (0.0, 0.0, 0.0));
        let mut other = m.clone();
        other.field.thickness_nm = 80.0;
        assert!(matches!(compare_stark(&m, &other), Err(Error::Contract(_))));
    }
}
