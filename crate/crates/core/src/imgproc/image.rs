use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel pitch of the reference imaging setup: 1024 px across ≈ 60 µm.
pub const DEFAULT_PIXEL_PITCH_NM: f64 = 59.0;

/// Optional header metadata carried with an image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub exposure_s: Option<f64>,
    pub mode: Option<String>,
}

/// A grid of non-negative detector counts, stored row-major.
///
/// Pixel `(x, y)` covers `[x − ½, x + ½] × [y − ½, y + ½]` in pixel
/// coordinates; physical coordinates are pixel coordinates times the pitch.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    counts: Vec<f64>,
    pixel_pitch: f64,
    pub meta: ImageMeta,
}

impl Image {
    pub fn new(width: usize, height: usize, counts: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {width}×{height}"
            )));
        }
        if counts.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{}×{} image needs {} counts, got {}",
                width,
                height,
                width * height,
                counts.len()
            )));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "pixel pitch must be positive, got {pixel_pitch}"
            )));
        }
        if let Some(i) = counts.iter().position(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(Error::InvalidInput(format!(
                "count at index {i} is {} (must be finite and ≥ 0)",
                counts[i]
            )));
        }
        Ok(Self {
            width,
            height,
            counts,
            pixel_pitch,
            meta: ImageMeta::default(),
        })
    }

    /// Builds an image from counts that may dip below zero, clamping at 0.
    pub fn from_clamped(width: usize, height: usize, mut counts: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        for c in &mut counts {
            if *c < 0.0 || c.is_nan() {
                *c = 0.0;
            }
        }
        Self::new(width, height, counts, pixel_pitch)
    }

    pub fn zeros(width: usize, height: usize, pixel_pitch: f64) -> Result<Self> {
        Self::new(width, height, vec![0.0; width * height], pixel_pitch)
    }

    pub fn with_meta(mut self, meta: ImageMeta) -> Self {
        self.meta = meta;
        self
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    #[inline]
    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn into_counts(self) -> Vec<f64> {
        self.counts
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.counts[y * self.width + x]
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.counts[y * self.width..(y + 1) * self.width]
    }

    pub fn column(&self, x: usize) -> Vec<f64> {
        (0..self.height).map(|y| self.get(x, y)).collect()
    }

    /// Image center in pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
    }

    pub fn max(&self) -> f64 {
        self.counts.iter().cloned().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.counts.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Bilinear sample at pixel coordinates; `None` outside the pixel-center hull.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= max_x && y <= max_y) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        Some(
            v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy,
        )
    }

    /// Copies the pixels inside `roi`.
    pub fn crop(&self, roi: &Roi) -> Result<Image> {
        if roi.x0 + roi.width > self.width || roi.y0 + roi.height > self.height {
            return Err(Error::InvalidInput(format!(
                "ROI {roi:?} exceeds the {}×{} frame",
                self.width, self.height
            )));
        }
        let mut counts = Vec::with_capacity(roi.width * roi.height);
        for y in roi.y0..roi.y0 + roi.height {
            counts.extend_from_slice(&self.row(y)[roi.x0..roi.x0 + roi.width]);
        }
        Ok(Image::new(roi.width, roi.height, counts, self.pixel_pitch)?.with_meta(self.meta.clone()))
    }
}

/// Rectangular region of a parent image, in parent pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    /// Coarse feature position inside the parent frame (pixels).
    pub center: (f64, f64),
    /// Set when overlapping detections were merged into this region.
    pub merged: bool,
}

impl Roi {
    /// Square ROI of side `side` centered on `center`, or `None` if it would leave the frame.
    pub fn centered(center: (f64, f64), side: usize, width: usize, height: usize) -> Option<Roi> {
        let half = (side as f64 - 1.0) / 2.0;
        let x0 = (center.0 - half).round();
        let y0 = (center.1 - half).round();
        if x0 < 0.0 || y0 < 0.0 {
            return None;
        }
        let (x0, y0) = (x0 as usize, y0 as usize);
        if x0 + side > width || y0 + side > height {
            return None;
        }
        Some(Roi {
            x0,
            y0,
            width: side,
            height: side,
            center,
            merged: false,
        })
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 - 0.5
            && y >= self.y0 as f64 - 0.5
            && x <= (self.x0 + self.width) as f64 - 0.5
            && y <= (self.y0 + self.height) as f64 - 0.5
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *m;
    if values.len() % 2 == 1 {
        upper
    } else {
        let lower = values[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Median and median absolute deviation (unscaled).
pub(crate) fn median_mad(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    let med = median(&mut v);
    for x in &mut v {
        *x = (*x - med).abs();
    }
    (med, median(&mut v))
}
