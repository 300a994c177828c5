//! In-memory analysis chains: locating emitters in a grid square, measuring
//! device misalignment, and the spectroscopy workflow.

use serde::{Deserialize, Serialize};

use crate::emitters::{detect_spots, fit_emitter, EmitterFit, EmitterModel, SpotDetection};
use crate::error::{Error, Result};
use crate::imgproc::{estimate_rotation, inverted_residual, rotate, subtract_background, Image, Roi};
use crate::markers::{decode_label, detect_crosses, fit_cross, label_roi, CrossFit, CrossFitConfig, GridLabel};
use crate::registration::{solve_transform, to_global, FrameTransform, GlobalPoint, ImagePoint, PointSource};
use crate::stark::{
    compare_stark, extract_plateaus, fit_stark, ExcitonLabel, FieldConfig, PlateauConfig, PlateauMap, StarkDelta,
    StarkModel,
};
use crate::synth::{Orientation, SquareRecord};
use crate::waveguides::{fit_waveguide, misalign, GuideFitConfig, Misalignment, WaveguideAxis};

/// Pipeline stage, used to attribute failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Input,
    Rotation,
    Markers,
    Registration,
    Emitters,
    Waveguides,
    Stark,
    Report,
    Output,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Input => "input",
            Stage::Rotation => "rotation",
            Stage::Markers => "markers",
            Stage::Registration => "registration",
            Stage::Emitters => "emitters",
            Stage::Waveguides => "waveguides",
            Stage::Stark => "stark",
            Stage::Report => "report",
            Stage::Output => "output",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Whether a failure is due to the inputs given or happened while processing them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Config,
    Runtime,
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct StageError {
    pub stage: Stage,
    pub kind: FailureKind,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn config(stage: Stage, source: Error) -> Self {
        Self {
            stage,
            kind: FailureKind::Config,
            source,
        }
    }

    pub fn runtime(stage: Stage, source: Error) -> Self {
        Self {
            stage,
            kind: FailureKind::Runtime,
            source,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub(crate) trait AtStage<T> {
    /// Tags a processing failure with its stage.
    fn at(self, stage: Stage) -> StageResult<T>;
    /// Tags an input or configuration failure with its stage.
    fn at_config(self, stage: Stage) -> StageResult<T>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError::runtime(stage, source))
    }

    fn at_config(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError::config(stage, source))
    }
}

/// Settings of [`locate_square`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocateConfig {
    pub cross: CrossFitConfig,
    pub spots: SpotDetection,
    pub emitter_model: EmitterModel,
    /// Estimate and undo the content rotation of the marker image.
    pub correct_rotation: bool,
    /// Rotations smaller than this (degrees) are left uncorrected.
    pub min_rotation_deg: f64,
}

impl Default for LocateConfig {
    fn default() -> Self {
        Self {
            cross: CrossFitConfig::default(),
            spots: SpotDetection::default(),
            emitter_model: EmitterModel::Gaussian2d,
            correct_rotation: true,
            min_rotation_deg: 0.02,
        }
    }
}

/// A fitted cross with the grid node it was assigned to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedCross {
    pub row: u8,
    pub col: u8,
    /// Label read from the image, when decoding succeeded.
    pub label: Option<GridLabel>,
    pub fit: CrossFit,
}

/// An emitter with its image-frame fit and global position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocatedEmitter {
    pub fit: EmitterFit,
    /// Position in the rotation-corrected image frame, nm.
    pub image_x_nm: f64,
    pub image_y_nm: f64,
    pub global: GlobalPoint,
}

/// Everything measured in one grid square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareResult {
    pub square_id: String,
    /// Estimated content rotation (degrees) and its uncertainty.
    pub rotation_deg: f64,
    pub rotation_unc_deg: f64,
    pub rotation_corrected: bool,
    pub crosses: Vec<LocatedCross>,
    pub transform: FrameTransform,
    /// Per-axis positional uncertainty assigned to the marker frame, nm.
    pub marker_unc_nm: f64,
    pub emitters: Vec<LocatedEmitter>,
    /// Spots whose regions overlapped and were not fitted.
    pub skipped_merged: usize,
    pub failed_fits: usize,
}

/// Maps a pixel position of the raw image into the frame obtained by
/// `rotate(img, -angle)`.
fn unrotate_point(p: (f64, f64), angle_deg: f64, w: usize, h: usize) -> (f64, f64) {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = (-angle_deg).to_radians().sin_cos();
    let (dx, dy) = (p.0 - cx, p.1 - cy);
    (cx + c * dx - s * dy, cy + s * dx + c * dy)
}

/// Grid indices of the square's top-left node: the most common value implied
/// by the decoded labels, else the sidecar's.
fn square_origin(labels: &[(usize, Option<GridLabel>)], fallback: (u8, u8)) -> (u8, u8) {
    let mut votes: Vec<((u8, u8), usize)> = Vec::new();
    for &(node, label) in labels {
        let Some(l) = label else { continue };
        let (di, dj) = ((node / 2) as u8, (node % 2) as u8);
        if l.row < di || l.column < dj {
            continue;
        }
        let key = (l.row - di, l.column - dj);
        match votes.iter_mut().find(|v| v.0 == key) {
            Some(v) => v.1 += 1,
            None => votes.push((key, 1)),
        }
    }
    votes
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map_or(fallback, |v| v.0)
}

/// Runs the whole chain on one square: rotation correction, cross fits and
/// labels, the similarity transform into the grid frame, and emitter fits
/// mapped through it.
pub fn locate_square(
    markers: &Image,
    emitters: &Image,
    record: &SquareRecord,
    cfg: &LocateConfig,
) -> StageResult<SquareResult> {
    if markers.width() != emitters.width() || markers.height() != emitters.height() {
        return Err(StageError::config(
            Stage::Input,
            Error::InvalidInput(format!(
                "marker image is {}×{} but emitter image is {}×{}",
                markers.width(),
                markers.height(),
                emitters.width(),
                emitters.height()
            )),
        ));
    }
    let (w, h) = (markers.width(), markers.height());
    let pitch = markers.pixel_pitch();
    let grid = &record.grid;

    let (rotation_deg, rotation_unc_deg) = if cfg.correct_rotation {
        match estimate_rotation(markers) {
            Ok(r) => (r.angle, r.uncertainty),
            Err(Error::NoFeatures(_)) => {
                tracing::warn!("{}: no structure to estimate rotation from", record.square_id);
                (0.0, 0.0)
            }
            Err(e) => return Err(e).at(Stage::Rotation),
        }
    } else {
        (0.0, 0.0)
    };
    let corrected = rotation_deg.abs() > (2.0 * rotation_unc_deg).max(cfg.min_rotation_deg);

    let (_, model) = subtract_background(markers);
    let mut shadows = inverted_residual(markers, &model);
    if corrected {
        shadows = rotate(&shadows, -rotation_deg);
    }

    let nodes_px: Vec<(f64, f64)> = (0..4)
        .map(|k| {
            let (di, dj) = ((k / 2) as f64, (k % 2) as f64);
            (
                (record.nominal_origin_nm.0 + dj * grid.pitch_nm) / pitch,
                (record.nominal_origin_nm.1 + di * grid.pitch_nm) / pitch,
            )
        })
        .collect();
    let detected = detect_crosses(&shadows, &nodes_px, grid, &cfg.cross);
    let mut fits = Vec::new();
    for d in &detected {
        match fit_cross(&shadows, &d.roi, grid, &cfg.cross) {
            Ok(f) => {
                let center = (f.center_x_nm / pitch, f.center_y_nm / pitch);
                let label = label_roi(center, grid, pitch, w, h)
                    .and_then(|roi| shadows.crop(&roi).ok())
                    .and_then(|img| match decode_label(&img) {
                        Ok(l) => Some(l),
                        Err(e) => {
                            tracing::debug!("node {}: label not read: {e}", d.node);
                            None
                        }
                    });
                fits.push((d.node, label, f));
            }
            Err(e) => tracing::warn!("{}: cross at node {} rejected: {e}", record.square_id, d.node),
        }
    }
    if fits.is_empty() {
        return Err(Error::NoFeatures("no cross could be fitted".into())).at(Stage::Markers);
    }
    let labels: Vec<(usize, Option<GridLabel>)> = fits.iter().map(|f| (f.0, f.1)).collect();
    let (row0, col0) = square_origin(&labels, (record.row, record.col));
    if (row0, col0) != (record.row, record.col) {
        tracing::warn!(
            "{}: labels place the square at ({row0}, {col0}), sidecar says ({}, {})",
            record.square_id,
            record.row,
            record.col
        );
    }
    let crosses: Vec<LocatedCross> = fits
        .into_iter()
        .map(|(node, label, fit)| LocatedCross {
            row: row0 + (node / 2) as u8,
            col: col0 + (node % 2) as u8,
            label,
            fit,
        })
        .collect();
    let observed: Vec<CrossFit> = crosses.iter().map(|c| c.fit).collect();
    let nominal: Vec<(f64, f64)> = crosses.iter().map(|c| grid.node_global(c.row, c.col)).collect();
    let transform = solve_transform(&observed, &nominal).at(Stage::Registration)?;
    let mut axis_unc: Vec<f64> = observed.iter().flat_map(|c| [c.unc_x_nm, c.unc_y_nm]).collect();
    axis_unc.sort_by(f64::total_cmp);
    let marker_unc_nm = crate::imgproc::median(&mut axis_unc);

    let rois = detect_spots(emitters, &cfg.spots);
    let mut located = Vec::new();
    let (mut skipped_merged, mut failed_fits) = (0, 0);
    for roi in rois.iter().filter(|r| {
        if r.merged {
            skipped_merged += 1;
        }
        !r.merged
    }) {
        match fit_emitter(emitters, roi, cfg.emitter_model) {
            Ok(fit) => located.push(fit),
            Err(e) => {
                failed_fits += 1;
                tracing::debug!("spot at ({:.1}, {:.1}) not fitted: {e}", roi.center.0, roi.center.1);
            }
        }
    }
    let emitters = located
        .into_iter()
        .enumerate()
        .map(|(k, fit)| {
            let (x, y) = if corrected {
                let (x, y) = unrotate_point((fit.x_nm / pitch, fit.y_nm / pitch), rotation_deg, w, h);
                (x * pitch, y * pitch)
            } else {
                (fit.x_nm, fit.y_nm)
            };
            let p = ImagePoint {
                x_nm: x,
                y_nm: y,
                unc_x_nm: fit.unc_x_nm,
                unc_y_nm: fit.unc_y_nm,
            };
            let global = to_global(
                format!("{}_e{k:03}", record.square_id),
                &p,
                &transform,
                marker_unc_nm,
                PointSource::Emitter,
            );
            LocatedEmitter {
                fit,
                image_x_nm: x,
                image_y_nm: y,
                global,
            }
        })
        .collect();
    Ok(SquareResult {
        square_id: record.square_id.clone(),
        rotation_deg,
        rotation_unc_deg,
        rotation_corrected: corrected,
        crosses,
        transform,
        marker_unc_nm,
        emitters,
        skipped_merged,
        failed_fits,
    })
}

/// Measurement of one post-fabrication device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceResult {
    pub device_id: String,
    pub orientation: Orientation,
    pub axis: WaveguideAxis,
    pub qd: EmitterFit,
    pub misalignment: Misalignment,
}

/// Fits the guide over the whole frame and the brightest QD spot, then
/// measures the QD offset from the guide axis.
pub fn measure_device(
    device_id: &str,
    guide: &Image,
    qd: &Image,
    orientation: Orientation,
    guide_cfg: &GuideFitConfig,
    spots: &SpotDetection,
) -> StageResult<DeviceResult> {
    let roi = Roi {
        x0: 0,
        y0: 0,
        width: guide.width(),
        height: guide.height(),
        center: guide.center(),
        merged: false,
    };
    let axis = fit_waveguide(guide, &roi, orientation, guide_cfg).at(Stage::Waveguides)?;
    let rois = detect_spots(qd, spots);
    let brightest = rois
        .iter()
        .filter(|r| !r.merged)
        .max_by(|a, b| {
            let va = qd.get(a.center.0.round() as usize, a.center.1.round() as usize);
            let vb = qd.get(b.center.0.round() as usize, b.center.1.round() as usize);
            va.total_cmp(&vb)
        })
        .ok_or_else(|| Error::NoFeatures("no isolated spot in the emitter image".into()))
        .at(Stage::Emitters)?;
    let fit = fit_emitter(qd, brightest, EmitterModel::Airy2d).at(Stage::Emitters)?;
    let misalignment = misalign(&fit, &axis, orientation).at(Stage::Waveguides)?;
    Ok(DeviceResult {
        device_id: device_id.to_string(),
        orientation,
        axis,
        qd: fit,
        misalignment,
    })
}

/// Stark fit of one labeled trace of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceModel {
    pub label: ExcitonLabel,
    pub voltage_range: (f64, f64),
    pub model: StarkModel,
}

/// Extracts the plateaus of a map and fits every X⁰/X⁺ trace.
pub fn analyze_map(map: &PlateauMap, plateau: &PlateauConfig, field: &FieldConfig) -> Result<Vec<TraceModel>> {
    let traces = extract_plateaus(map, plateau);
    let mut out = Vec::new();
    for t in traces.iter().filter(|t| t.label != ExcitonLabel::Other) {
        match fit_stark(t, field) {
            Ok(model) => out.push(TraceModel {
                label: t.label,
                voltage_range: t.voltage_span(),
                model,
            }),
            Err(e) => tracing::warn!("{} trace not fitted: {e}", t.label),
        }
    }
    Ok(out)
}

/// Before/after comparison of the traces that share a label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceComparison {
    pub label: ExcitonLabel,
    pub before: StarkModel,
    pub after: StarkModel,
    pub delta: StarkDelta,
    /// Mean wavelength change over the voltages both traces cover, nm.
    pub mean_shift_nm: f64,
}

pub fn compare_maps(before: &[TraceModel], after: &[TraceModel]) -> Result<Vec<TraceComparison>> {
    let mut out = Vec::new();
    for b in before {
        let Some(a) = after.iter().find(|a| a.label == b.label) else {
            tracing::warn!("{} trace has no counterpart after processing", b.label);
            continue;
        };
        let delta = compare_stark(&b.model, &a.model)?;
        let lo = b.voltage_range.0.max(a.voltage_range.0);
        let hi = b.voltage_range.1.min(a.voltage_range.1);
        let (lo, hi) = if hi > lo { (lo, hi) } else { b.voltage_range };
        let n = 21;
        let mean_shift_nm = (0..n)
            .map(|i| {
                let v = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                let f = crate::stark::field(v, &b.model.field);
                a.model.wavelength_nm(f) - b.model.wavelength_nm(f)
            })
            .sum::<f64>()
            / n as f64;
        out.push(TraceComparison {
            label: b.label,
            before: b.model.clone(),
            after: a.model.clone(),
            delta,
            mean_shift_nm,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unrotate_inverts_the_content_rotation() {
        // a point at p in the unrotated frame lands at c + R(θ)(p − c) in the raw image
        let (w, h) = (101, 81);
        let (cx, cy) = (50.0, 40.0);
        let p = (70.0, 20.0);
        let (s, c) = 1.5f64.to_radians().sin_cos();
        let raw = (cx + c * (p.0 - cx) - s * (p.1 - cy), cy + s * (p.0 - cx) + c * (p.1 - cy));
        let back = unrotate_point(raw, 1.5, w, h);
        assert!((back.0 - p.0).abs() < 1e-12 && (back.1 - p.1).abs() < 1e-12);
    }

    #[test]
    fn origin_vote_prefers_labels() {
        let l = |row, column| Some(GridLabel { row, column });
        assert_eq!(square_origin(&[(0, l(3, 4)), (3, l(4, 5)), (1, None)], (0, 0)), (3, 4));
        assert_eq!(square_origin(&[(0, None)], (2, 7)), (2, 7));
        assert_eq!(square_origin(&[(3, l(0, 0))], (2, 7)), (2, 7));
    }
}
