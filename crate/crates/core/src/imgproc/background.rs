use serde::{Deserialize, Serialize};

use super::image::{median, median_mad, Image};
use crate::error::Error;
use crate::fitcore::{lm_fit, CurveFit, FitProblem, Gaussian2DFamily, Gaussian2DModel, ParametricModel};

/// Gaussian illumination envelope `amplitude·exp(−…) + offset`, in pixel units.
///
/// A fallback constant background is marked by infinite sigmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub amplitude: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub offset: f64,
}

impl BackgroundModel {
    pub fn constant(offset: f64) -> Self {
        Self {
            amplitude: 0.0,
            center_x: 0.0,
            center_y: 0.0,
            sigma_x: f64::INFINITY,
            sigma_y: f64::INFINITY,
            offset,
        }
    }

    /// True when the Gaussian fit failed and a constant median was used instead.
    pub fn is_fallback(&self) -> bool {
        self.sigma_x.is_infinite() || self.sigma_y.is_infinite()
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        if self.is_fallback() || self.amplitude == 0.0 {
            return self.offset;
        }
        let dx = (x - self.center_x) / self.sigma_x;
        let dy = (y - self.center_y) / self.sigma_y;
        self.amplitude * (-0.5 * (dx * dx + dy * dy)).exp() + self.offset
    }

    fn from_gaussian(g: &Gaussian2DModel) -> Self {
        Self {
            amplitude: g.amplitude,
            center_x: g.x0,
            center_y: g.y0,
            sigma_x: g.sigma_x,
            sigma_y: g.sigma_y,
            offset: g.offset,
        }
    }

    fn to_params(self) -> Vec<f64> {
        vec![
            self.amplitude,
            self.center_x,
            self.center_y,
            self.sigma_x,
            self.sigma_y,
            self.offset,
        ]
    }
}

/// Evaluates the model at every pixel.
pub fn render_background(model: &BackgroundModel, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(model.eval(x as f64, y as f64));
        }
    }
    out
}

/// Shadow features turned into positive peaks: `model − img + pedestal`, with
/// the pedestal chosen so that every count stays ≥ 0.
pub fn inverted_residual(img: &Image, model: &BackgroundModel) -> Image {
    let bg = render_background(model, img.width(), img.height());
    let mut diff: Vec<f64> = bg.iter().zip(img.counts()).map(|(b, c)| b - c).collect();
    let pedestal = diff.iter().cloned().fold(0.0_f64, |m, d| m.max(-d));
    for d in &mut diff {
        *d += pedestal;
    }
    Image::from_clamped(img.width(), img.height(), diff, img.pixel_pitch())
        .expect("dimensions unchanged")
        .with_meta(img.meta.clone())
}

/// Removes the Gaussian illumination envelope and returns `max(img − model, 0)`.
pub fn subtract_background(img: &Image) -> (Image, BackgroundModel) {
    let model = fit_background(img).unwrap_or_else(|| {
        let (med, _) = median_mad(img.counts());
        tracing::debug!("background fit failed; subtracting constant median {med}");
        BackgroundModel::constant(med)
    });
    let bg = render_background(&model, img.width(), img.height());
    let residual: Vec<f64> = img
        .counts()
        .iter()
        .zip(&bg)
        .map(|(c, b)| (c - b).max(0.0))
        .collect();
    let out = Image::new(img.width(), img.height(), residual, img.pixel_pitch())
        .expect("dimensions unchanged")
        .with_meta(img.meta.clone());
    (out, model)
}

struct Samples {
    coords: Vec<(f64, f64)>,
    values: Vec<f64>,
}

/// Block medians on a grid of roughly 64×64 blocks.
fn block_medians(img: &Image) -> Samples {
    let block = (img.width().min(img.height()) / 64).max(1);
    let mut s = Samples {
        coords: Vec::new(),
        values: Vec::new(),
    };
    let mut buf = Vec::with_capacity(block * block);
    for by in (0..img.height()).step_by(block) {
        for bx in (0..img.width()).step_by(block) {
            buf.clear();
            let x1 = (bx + block).min(img.width());
            let y1 = (by + block).min(img.height());
            for y in by..y1 {
                buf.extend_from_slice(&img.row(y)[bx..x1]);
            }
            s.coords.push((
                (bx + x1 - 1) as f64 / 2.0,
                (by + y1 - 1) as f64 / 2.0,
            ));
            s.values.push(median(&mut buf));
        }
    }
    s
}

fn moment_guess(s: &Samples, width: usize, height: usize) -> Option<Vec<f64>> {
    let base = s.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let peak = s.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(peak > base) {
        return None;
    }
    let (mut w0, mut wx, mut wy) = (0.0, 0.0, 0.0);
    for (&(x, y), &v) in s.coords.iter().zip(&s.values) {
        let w = v - base;
        w0 += w;
        wx += w * x;
        wy += w * y;
    }
    let (cx, cy) = (wx / w0, wy / w0);
    let (mut sxx, mut syy) = (0.0, 0.0);
    for (&(x, y), &v) in s.coords.iter().zip(&s.values) {
        let w = v - base;
        sxx += w * (x - cx).powi(2);
        syy += w * (y - cy).powi(2);
    }
    let sx = (sxx / w0).sqrt().clamp(1.0, 4.0 * width as f64);
    let sy = (syy / w0).sqrt().clamp(1.0, 4.0 * height as f64);
    Some(vec![peak - base, cx, cy, sx, sy, base])
}

fn fit_samples(s: &Samples, initial: Vec<f64>, width: usize, height: usize) -> Option<BackgroundModel> {
    let (w, h) = (width as f64, height as f64);
    let span = w.max(h);
    let lower = vec![0.0, -span, -span, 0.5, 0.5, f64::NEG_INFINITY];
    let upper = vec![f64::INFINITY, w + span, h + span, 10.0 * span, 10.0 * span, f64::INFINITY];
    let mut initial = initial;
    for i in 0..initial.len() {
        initial[i] = initial[i].clamp(lower[i], upper[i]);
    }
    let fit = FitProblem::new(initial)
        .with_bounds(lower, upper)
        .with_names(Gaussian2DFamily.param_names())
        .with_max_iterations(100);
    let res = lm_fit(&CurveFit::new(&Gaussian2DFamily, &s.coords, &s.values), &fit);
    match res {
        Ok(r) if r.converged => Some(BackgroundModel::from_gaussian(&Gaussian2DModel::from_params(&r.params))),
        Ok(_) => None,
        Err(Error::RankDeficient { parameter }) => {
            tracing::debug!("background fit degenerate in `{parameter}`");
            None
        }
        Err(_) => None,
    }
}

/// Fits the envelope in two passes: block medians give a robust first model;
/// then pixels whose residual is within 2 MAD of the median residual refine it
/// at full resolution (strided so that at most ~40k pixels are used).
fn fit_background(img: &Image) -> Option<BackgroundModel> {
    let (w, h) = (img.width(), img.height());
    let blocks = block_medians(img);
    let guess = moment_guess(&blocks, w, h)?;
    let coarse = fit_samples(&blocks, guess, w, h)?;

    let bg = render_background(&coarse, w, h);
    let residual: Vec<f64> = img.counts().iter().zip(&bg).map(|(c, b)| c - b).collect();
    let (med, mad) = median_mad(&residual);
    let floor = 1e-9 * (coarse.amplitude + coarse.offset.abs()).max(1.0);
    let threshold = (2.0 * mad).max(floor);

    let stride = ((w * h) as f64 / 40_000.0).sqrt().ceil().max(1.0) as usize;
    let mut fine = Samples {
        coords: Vec::new(),
        values: Vec::new(),
    };
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            let i = y * w + x;
            if (residual[i] - med).abs() <= threshold {
                fine.coords.push((x as f64, y as f64));
                fine.values.push(img.counts()[i]);
            }
        }
    }
    if fine.values.len() < 12 {
        return Some(coarse);
    }
    fit_samples(&fine, coarse.to_params(), w, h).or(Some(coarse))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope(w: usize, h: usize, m: &BackgroundModel) -> Image {
        Image::new(w, h, render_background(m, w, h), 59.0).unwrap()
    }

    const ENV: BackgroundModel = BackgroundModel {
        amplitude: 3000.0,
        center_x: 70.0,
        center_y: 60.0,
        sigma_x: 45.0,
        sigma_y: 38.0,
        offset: 200.0,
    };

    #[test]
    fn constant_image() {
        let img = Image::new(40, 30, vec![123.0; 1200], 59.0).unwrap();
        let (res, m) = subtract_background(&img);
        assert!(res.counts().iter().all(|&v| v == 0.0));
        assert_eq!(m.offset, 123.0);
    }

    #[test]
    fn pure_envelope_is_removed() {
        let img = envelope(128, 128, &ENV);
        let (res, m) = subtract_background(&img);
        assert!(res.max() <= 1e-3 * ENV.amplitude, "max residual {}", res.max());
        assert!((m.amplitude - ENV.amplitude).abs() < 1e-3 * ENV.amplitude);
        assert!(!m.is_fallback());
    }

    #[test]
    fn envelope_with_shadow() {
        let mut img = envelope(128, 128, &ENV).into_counts();
        for y in 40..80 {
            for x in 62..68 {
                img[y * 128 + x] = 0.0;
            }
        }
        for y in 57..63 {
            for x in 45..85 {
                img[y * 128 + x] = 0.0;
            }
        }
        let img = Image::new(128, 128, img, 59.0).unwrap();
        let (res, m) = subtract_background(&img);
        assert!((m.amplitude / ENV.amplitude - 1.0).abs() < 0.02, "{m:?}");
        assert!(res.counts().iter().all(|&v| v >= 0.0));
        let inv = inverted_residual(&img, &m);
        assert!(inv.min() >= 0.0);
        assert!(inv.get(65, 60) > inv.get(10, 10) + 2000.0);
    }
}
