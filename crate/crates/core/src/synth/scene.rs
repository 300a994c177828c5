use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{BackgroundModel, DEFAULT_PIXEL_PITCH_NM};

/// Which of the four imaging configurations a scene reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagingMode {
    IntrinsicMarkers,
    IntrinsicEmitters,
    DopedMarkers,
    DopedEmitters,
}

impl ImagingMode {
    pub fn is_marker(self) -> bool {
        matches!(self, ImagingMode::IntrinsicMarkers | ImagingMode::DopedMarkers)
    }

    pub fn is_doped(self) -> bool {
        matches!(self, ImagingMode::DopedMarkers | ImagingMode::DopedEmitters)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ImagingMode::IntrinsicMarkers => "intrinsic-markers",
            ImagingMode::IntrinsicEmitters => "intrinsic-emitters",
            ImagingMode::DopedMarkers => "doped-markers",
            ImagingMode::DopedEmitters => "doped-emitters",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    AlongX,
    AlongY,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::AlongX => "along-x",
            Orientation::AlongY => "along-y",
        }
    }

    /// Splits `(x, y)` into (along, across) coordinates.
    pub fn split(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Orientation::AlongX => (x, y),
            Orientation::AlongY => (y, x),
        }
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "along-x" => Ok(Orientation::AlongX),
            "along-y" => Ok(Orientation::AlongY),
            other => Err(Error::InvalidInput(format!("unknown orientation `{other}`"))),
        }
    }
}

/// Detector geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pitch_nm: f64,
}

impl Default for Frame {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
            pitch_nm: DEFAULT_PIXEL_PITCH_NM,
        }
    }
}

impl Frame {
    pub fn field_of_view_nm(&self) -> (f64, f64) {
        (self.width as f64 * self.pitch_nm, self.height as f64 * self.pitch_nm)
    }

    fn contains_nm(&self, x: f64, y: f64) -> bool {
        let max_x = (self.width as f64 - 0.5) * self.pitch_nm;
        let max_y = (self.height as f64 - 0.5) * self.pitch_nm;
        let min = -0.5 * self.pitch_nm;
        x >= min && y >= min && x <= max_x && y <= max_y
    }
}

fn one() -> f64 {
    1.0
}

/// Gold alignment cross: two bars of width `arm_width_nm` reaching
/// `arm_length_nm` from the center in each direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossSpec {
    pub center_x_nm: f64,
    pub center_y_nm: f64,
    pub arm_length_nm: f64,
    pub arm_width_nm: f64,
    /// Fractional shadow contrast; 1 is fully opaque.
    #[serde(default = "one")]
    pub depth: f64,
}

/// A straight gold line spanning the whole frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSpec {
    pub orientation: Orientation,
    /// Across-line coordinate of the line center.
    pub position_nm: f64,
    pub width_nm: f64,
    #[serde(default = "one")]
    pub depth: f64,
}

/// Binary grid label: 2 rows × 4 rectangles, horizontal = 0, vertical = 1.
///
/// Rectangles are read row-major from the top-left; rectangle `k` carries bit
/// `7 − k` of `code`, so the top row spells the grid row and the bottom row
/// the grid column (4 bits each, most significant first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub center_x_nm: f64,
    pub center_y_nm: f64,
    pub code: u8,
    pub rect_long_nm: f64,
    pub rect_short_nm: f64,
    /// Center-to-center spacing of neighbouring rectangles.
    pub cell_nm: f64,
    #[serde(default = "one")]
    pub depth: f64,
}

pub const LABEL_ROWS: usize = 2;
pub const LABEL_COLS: usize = 4;

impl LabelSpec {
    pub fn for_node(center: (f64, f64), row: u8, col: u8, rect_long_nm: f64, rect_short_nm: f64, cell_nm: f64) -> Self {
        Self {
            center_x_nm: center.0,
            center_y_nm: center.1,
            code: ((row & 0xF) << 4) | (col & 0xF),
            rect_long_nm,
            rect_short_nm,
            cell_nm,
            depth: 1.0,
        }
    }

    /// Rectangles as (center_x, center_y, half_x, half_y) in nm, row-major.
    pub fn rectangles(&self) -> Vec<(f64, f64, f64, f64)> {
        let mut out = Vec::with_capacity(LABEL_ROWS * LABEL_COLS);
        for r in 0..LABEL_ROWS {
            for c in 0..LABEL_COLS {
                let k = r * LABEL_COLS + c;
                let vertical = (self.code >> (7 - k)) & 1 == 1;
                let cx = self.center_x_nm + (c as f64 - 1.5) * self.cell_nm;
                let cy = self.center_y_nm + (r as f64 - 0.5) * self.cell_nm;
                let (hx, hy) = if vertical {
                    (self.rect_short_nm / 2.0, self.rect_long_nm / 2.0)
                } else {
                    (self.rect_long_nm / 2.0, self.rect_short_nm / 2.0)
                };
                out.push((cx, cy, hx, hy));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfKind {
    Gaussian,
    Airy,
}

/// A point emitter. `psf_scale_nm` is the Gaussian σ or the Airy radial
/// scale along the minor axis; the major axis is `ellipticity` times longer
/// and points along `orientation_deg` from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterSpec {
    pub x_nm: f64,
    pub y_nm: f64,
    pub photons: f64,
    pub psf: PsfKind,
    pub psf_scale_nm: f64,
    #[serde(default = "one")]
    pub ellipticity: f64,
    #[serde(default)]
    pub orientation_deg: f64,
}

/// A suspended nanoguide seen in photoluminescence: a central peak on the
/// guide axis plus two peaks scattered from the outer trench edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveguideSpec {
    pub axis_nm: f64,
    pub orientation: Orientation,
    pub width_nm: f64,
    /// Trench-edge positions relative to the axis (negative, positive).
    pub trench_edge_offsets_nm: (f64, f64),
    pub edge_brightness: f64,
    pub core_brightness: f64,
    /// Gaussian σ of every peak.
    pub blur_nm: f64,
    /// Along-guide start and end; `None` spans the frame.
    #[serde(default)]
    pub extent_nm: Option<(f64, f64)>,
}

fn default_doped_brightness() -> f64 {
    0.2
}

fn default_blur() -> f64 {
    250.0
}

/// Everything needed to render one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub mode: ImagingMode,
    #[serde(default)]
    pub frame: Frame,
    #[serde(default)]
    pub crosses: Vec<CrossSpec>,
    #[serde(default)]
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub labels: Vec<LabelSpec>,
    #[serde(default)]
    pub emitters: Vec<EmitterSpec>,
    #[serde(default)]
    pub waveguides: Vec<WaveguideSpec>,
    /// Illumination envelope of marker images, in pixel units.
    pub background: BackgroundModel,
    /// Flat background of emitter images, counts per pixel.
    #[serde(default)]
    pub emitter_background: f64,
    /// Marker-image brightness relative to intrinsic samples (doped modes only).
    #[serde(default = "default_doped_brightness")]
    pub doped_brightness: f64,
    /// Gaussian σ of the optical blur applied to shadow masks.
    #[serde(default = "default_blur")]
    pub marker_blur_nm: f64,
    /// Content rotation about the image center, degrees.
    #[serde(default)]
    pub rotation_deg: f64,
    #[serde(default)]
    pub read_noise_sigma: f64,
    #[serde(default = "default_true")]
    pub shot_noise: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Scene {
    /// An empty, noise-free scene with zero background.
    pub fn empty(mode: ImagingMode, frame: Frame) -> Self {
        Self {
            mode,
            frame,
            crosses: Vec::new(),
            lines: Vec::new(),
            labels: Vec::new(),
            emitters: Vec::new(),
            waveguides: Vec::new(),
            background: BackgroundModel {
                amplitude: 0.0,
                center_x: (frame.width as f64 - 1.0) / 2.0,
                center_y: (frame.height as f64 - 1.0) / 2.0,
                sigma_x: frame.width as f64,
                sigma_y: frame.height as f64,
                offset: 0.0,
            },
            emitter_background: 0.0,
            doped_brightness: default_doped_brightness(),
            marker_blur_nm: default_blur(),
            rotation_deg: 0.0,
            read_noise_sigma: 0.0,
            shot_noise: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        let f = &self.frame;
        if f.width < 16 || f.height < 16 {
            return bad(format!("frame {}×{} is smaller than 16×16", f.width, f.height));
        }
        if !(f.pitch_nm > 0.0 && f.pitch_nm.is_finite()) {
            return bad(format!("pixel pitch {} must be positive", f.pitch_nm));
        }
        if !(self.read_noise_sigma >= 0.0) {
            return bad("read_noise_sigma must be ≥ 0".into());
        }
        if !(self.emitter_background >= 0.0) {
            return bad("emitter_background must be ≥ 0".into());
        }
        if !(self.doped_brightness > 0.0) {
            return bad("doped_brightness must be > 0".into());
        }
        if !(self.marker_blur_nm >= 0.0) {
            return bad("marker_blur_nm must be ≥ 0".into());
        }
        if !self.rotation_deg.is_finite() || self.rotation_deg.abs() >= 45.0 {
            return bad(format!("rotation {}° outside (−45°, 45°)", self.rotation_deg));
        }
        let bg = &self.background;
        if !(bg.amplitude >= 0.0 && bg.offset >= 0.0 && bg.sigma_x > 0.0 && bg.sigma_y > 0.0) {
            return bad(format!("invalid illumination envelope {bg:?}"));
        }
        for (i, c) in self.crosses.iter().enumerate() {
            if !(c.arm_width_nm > 0.0) || !(c.arm_length_nm > c.arm_width_nm) {
                return bad(format!("cross {i}: need arm_length > arm_width > 0"));
            }
            if !(0.0..=1.0).contains(&c.depth) {
                return bad(format!("cross {i}: depth {} outside [0, 1]", c.depth));
            }
            if !f.contains_nm(c.center_x_nm, c.center_y_nm) {
                return bad(format!("cross {i} center lies outside the frame"));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if !(l.width_nm > 0.0) || !(0.0..=1.0).contains(&l.depth) {
                return bad(format!("line {i}: invalid width or depth"));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if !(l.rect_long_nm > l.rect_short_nm && l.rect_short_nm > 0.0 && l.cell_nm > 0.0) {
                return bad(format!("label {i}: need rect_long > rect_short > 0"));
            }
            if !f.contains_nm(l.center_x_nm, l.center_y_nm) {
                return bad(format!("label {i} lies outside the frame"));
            }
        }
        for (i, e) in self.emitters.iter().enumerate() {
            if !(e.photons > 0.0) || !(e.psf_scale_nm > 0.0) || !(e.ellipticity >= 1.0) {
                return bad(format!("emitter {i}: need photons > 0, psf_scale > 0, ellipticity ≥ 1"));
            }
            if !f.contains_nm(e.x_nm, e.y_nm) {
                return bad(format!("emitter {i} lies outside the frame"));
            }
        }
        for (i, w) in self.waveguides.iter().enumerate() {
            let (lo, hi) = w.trench_edge_offsets_nm;
            if !(w.width_nm > 0.0) || !(lo < 0.0 && hi > 0.0) || !(w.blur_nm > 0.0) {
                return bad(format!(
                    "waveguide {i}: need width > 0, blur > 0 and trench offsets straddling the axis"
                ));
            }
            let (x, y) = match w.orientation {
                Orientation::AlongX => (0.0, w.axis_nm),
                Orientation::AlongY => (w.axis_nm, 0.0),
            };
            if !f.contains_nm(x, y) {
                return bad(format!("waveguide {i} axis lies outside the frame"));
            }
        }
        Ok(())
    }
}
