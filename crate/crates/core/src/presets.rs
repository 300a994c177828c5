//! Calibrated synthetic settings for the intrinsic and doped samples, the
//! spectral-shift survey and the Stark maps.
//!
//! The intensity, noise and blur values were tuned by Monte Carlo so that the
//! analysis chain reproduces the reference statistics (cross accuracy,
//! emitter precision, guide-section intervals and misalignment spread).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{BackgroundModel, DEFAULT_PIXEL_PITCH_NM};
use crate::markers::MarkerGrid;
use crate::stark::{FieldConfig, Structure};
use crate::synth::{
    CorpusConfig, CrossSpec, DeviceTemplate, Frame, Orientation, PlateauLine, PlateauMapSpec, SampleKind, Scene, ShiftCorpusConfig,
    ShiftPopulation, SpectralNoise, SquareTemplate, WavelengthGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Intrinsic sample: bright markers, low emitter background.
    Fig2b,
    /// Doped sample: dim markers, bright emitter background.
    Fig2c,
    /// Before/after emission-line shifts.
    Fig3,
    /// Voltage–wavelength maps before and after processing.
    Fig5,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Fig2b, Preset::Fig2c, Preset::Fig3, Preset::Fig5];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Fig2b => "fig2b",
            Preset::Fig2c => "fig2c",
            Preset::Fig3 => "fig3",
            Preset::Fig5 => "fig5",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown preset {s:?}; expected fig2b, fig2c, fig3 or fig5")))
    }
}

const SQUARE_FRAME: Frame = Frame {
    width: 1024,
    height: 1024,
    pitch_nm: DEFAULT_PIXEL_PITCH_NM,
};

const DEVICE_FRAME: Frame = Frame {
    width: 96,
    height: 96,
    pitch_nm: DEFAULT_PIXEL_PITCH_NM,
};

/// Marker illumination in the intrinsic sample, counts.
const ENVELOPE_PEAK: f64 = 215.0;
const ENVELOPE_OFFSET: f64 = 72.0;
const ENVELOPE_SIGMA_PX: f64 = 700.0;
/// Marker brightness of the doped sample relative to the intrinsic one.
const DOPED_BRIGHTNESS: f64 = 0.42;

fn envelope() -> BackgroundModel {
    BackgroundModel {
        amplitude: ENVELOPE_PEAK,
        center_x: (SQUARE_FRAME.width as f64 - 1.0) / 2.0,
        center_y: (SQUARE_FRAME.height as f64 - 1.0) / 2.0,
        sigma_x: ENVELOPE_SIGMA_PX,
        sigma_y: ENVELOPE_SIGMA_PX,
        offset: ENVELOPE_OFFSET,
    }
}

pub fn square_template(sample: SampleKind) -> SquareTemplate {
    let (emitter_background, emitter_read_noise) = match sample {
        SampleKind::Intrinsic => (2.0, 1.0),
        SampleKind::Doped => (400.0, 5.5),
    };
    SquareTemplate {
        sample,
        frame: SQUARE_FRAME,
        grid: MarkerGrid::default(),
        row: 3,
        col: 5,
        envelope: envelope(),
        doped_brightness: DOPED_BRIGHTNESS,
        marker_blur_nm: 250.0,
        marker_read_noise: 5.0,
        rotation_deg: 0.0,
        position_jitter_nm: 400.0,
        n_emitters: 15,
        emitter_photons: 1e5,
        emitter_sigma_nm: 2.4 * DEFAULT_PIXEL_PITCH_NM,
        emitter_background,
        emitter_read_noise,
        emitter_margin_nm: 8000.0,
        min_emitter_separation_nm: 2000.0,
    }
}

pub fn device_template(sample: SampleKind) -> DeviceTemplate {
    let (delta_mean_nm, delta_std_nm, qd_background) = match sample {
        SampleKind::Intrinsic => (9.0, 46.0, 5.0),
        SampleKind::Doped => (1.0, 33.0, 40.0),
    };
    DeviceTemplate {
        sample,
        frame: DEVICE_FRAME,
        orientation: Orientation::AlongX,
        guide_width_nm: 300.0,
        trench_edge_offsets_nm: (-1200.0, 1200.0),
        edge_brightness: 115.0,
        core_brightness: 58.0,
        guide_blur_nm: 180.0,
        guide_background: 20.0,
        qd_photons: 3e4,
        qd_scale_nm: 200.0,
        qd_ellipticity: 1.4,
        qd_orientation_deg: 20.0,
        qd_background,
        read_noise_sigma: 2.0,
        delta_mean_nm,
        delta_std_nm,
        dropout_fraction: 0.0,
        device_spacing_nm: 40_000.0,
    }
}

/// A single cross at `center_px` of a 240×240 frame, lit and blurred like
/// the nodes of [`square_template`] (the nodes sit half a grid pitch from the
/// frame center along both axes).
pub fn cross_trial_scene(sample: SampleKind, center_px: (f64, f64), seed: u64) -> Scene {
    let t = square_template(sample);
    let frame = Frame {
        width: 240,
        height: 240,
        pitch_nm: t.frame.pitch_nm,
    };
    let half = t.grid.pitch_nm / 2.0 / t.frame.pitch_nm;
    let level = t.envelope.eval(t.envelope.center_x - half, t.envelope.center_y - half);
    let mut s = Scene::empty(sample.marker_mode(), frame);
    s.background = BackgroundModel::constant(level);
    s.doped_brightness = t.doped_brightness;
    s.marker_blur_nm = t.marker_blur_nm;
    s.read_noise_sigma = t.marker_read_noise;
    s.shot_noise = true;
    s.seed = seed;
    s.crosses.push(CrossSpec {
        center_x_nm: center_px.0 * frame.pitch_nm,
        center_y_nm: center_px.1 * frame.pitch_nm,
        arm_length_nm: t.grid.arm_length_nm,
        arm_width_nm: t.grid.arm_width_nm,
        depth: 1.0,
    });
    s
}

/// Device and square corpus of one sample kind.
pub fn corpus(preset: Preset, seed: u64, devices: usize, squares: usize) -> Result<CorpusConfig> {
    let sample = match preset {
        Preset::Fig2b => SampleKind::Intrinsic,
        Preset::Fig2c => SampleKind::Doped,
        other => {
            return Err(Error::InvalidInput(format!(
                "preset {other} describes spectra, not images"
            )))
        }
    };
    Ok(CorpusConfig {
        preset: Some(preset.as_str().to_string()),
        seed,
        devices,
        squares,
        device: device_template(sample),
        square: square_template(sample),
    })
}

/// Shift survey: nanoguides of two widths and photonic-crystal guides, all
/// drawn from a 0.8 ± 0.6 nm red shift.
pub fn shift_survey(count_per_group: usize) -> ShiftCorpusConfig {
    let pop = |structure, group: &str| ShiftPopulation {
        structure,
        group: group.to_string(),
        count: count_per_group,
        shift_mean_nm: 0.8,
        shift_std_nm: 0.6,
    };
    ShiftCorpusConfig {
        grid: WavelengthGrid {
            start_nm: 915.0,
            step_nm: 0.02,
            len: 1500,
        },
        noise: SpectralNoise {
            shot_noise: true,
            read_noise: 2.0,
        },
        line_width_nm: 0.06,
        amplitude: 2000.0,
        background: 20.0,
        center_range_nm: (920.0, 940.0),
        populations: vec![
            pop(Structure::Nanoguide, "width=250"),
            pop(Structure::Nanoguide, "width=300"),
            pop(Structure::Phcw, "offset_x=0"),
        ],
    }
}

/// Stark maps of one dot before and after processing. Both lines blue-shift
/// by ~0.3 nm; X⁺ occupies the lower voltages.
pub fn stark_maps() -> (PlateauMapSpec, PlateauMapSpec) {
    let grid = WavelengthGrid {
        start_nm: 927.0,
        step_nm: 0.02,
        len: 400,
    };
    let lines = |shift_nm: f64| {
        vec![
            PlateauLine {
                lambda0_nm: 931.0 + shift_nm,
                p_z: 0.03,
                alpha: -1.5e-4,
                voltage_range: (0.6, 1.15),
                amplitude: 800.0,
                width_nm: 0.05,
            },
            PlateauLine {
                lambda0_nm: 929.2 + shift_nm,
                p_z: 4e-3,
                alpha: -2e-4,
                voltage_range: (1.2, 1.8),
                amplitude: 1000.0,
                width_nm: 0.05,
            },
        ]
    };
    let spec = |shift| PlateauMapSpec {
        voltages: (0.5, 1.9, 141),
        grid,
        field: FieldConfig::default(),
        background: 10.0,
        noise: SpectralNoise {
            shot_noise: true,
            read_noise: 1.0,
        },
        lines: lines(shift),
    };
    (spec(0.0), spec(-0.3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
        }
        assert!("fig9".parse::<Preset>().is_err());
    }

    #[test]
    fn spectral_presets_have_no_images() {
        assert!(corpus(Preset::Fig3, 1, 1, 1).is_err());
        assert_eq!(corpus(Preset::Fig2c, 1, 1, 1).unwrap().square.sample, SampleKind::Doped);
    }
}
