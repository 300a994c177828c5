use rand_distr::{Distribution, Normal, Poisson};

use super::scene::{EmitterSpec, Orientation, PsfKind, Scene};
use crate::error::Result;
use crate::imgproc::{Image, ImageMeta};
use crate::rng::rng_from_seed;
use crate::special::{airy_intensity, erf, AIRY_TOTAL_POWER};

/// Relative intensity of an Airy pattern, `[2J₁(ρ)/ρ]²` with `ρ = r/scale`.
pub fn airy_psf(r: f64, scale: f64) -> f64 {
    assert!(scale > 0.0, "Airy scale must be positive");
    airy_intensity(r / scale)
}

/// Fraction of a Gaussian-blurred box `[a, b]` seen at `x`.
fn blurred_box(x: f64, a: f64, b: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return if x >= a && x <= b { 1.0 } else { 0.0 };
    }
    let k = 1.0 / (std::f64::consts::SQRT_2 * sigma);
    0.5 * (erf((b - x) * k) - erf((a - x) * k))
}

/// Maps between image pixels and the unrotated scene frame (both in pixels).
#[derive(Clone, Copy)]
struct Rotation {
    c: f64,
    s: f64,
    cx: f64,
    cy: f64,
}

impl Rotation {
    fn new(scene: &Scene) -> Self {
        let (s, c) = scene.rotation_deg.to_radians().sin_cos();
        Self {
            c,
            s,
            cx: (scene.frame.width as f64 - 1.0) / 2.0,
            cy: (scene.frame.height as f64 - 1.0) / 2.0,
        }
    }

    /// Scene → image.
    fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cx + self.c * dx - self.s * dy, self.cy + self.s * dx + self.c * dy)
    }

    /// Image → scene.
    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cx + self.c * dx + self.s * dy, self.cy - self.s * dx + self.c * dy)
    }

    /// Image-space pixel bounds of a scene-space box, clamped to the frame.
    fn pixel_bounds(&self, x0: f64, x1: f64, y0: f64, y1: f64, w: usize, h: usize) -> Option<(usize, usize, usize, usize)> {
        let corners = [
            self.forward(x0, y0),
            self.forward(x1, y0),
            self.forward(x0, y1),
            self.forward(x1, y1),
        ];
        let min_x = corners.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor();
        let max_x = corners.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil();
        let min_y = corners.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor();
        let max_y = corners.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
        if max_x < 0.0 || max_y < 0.0 || min_x > (w - 1) as f64 || min_y > (h - 1) as f64 {
            return None;
        }
        Some((
            min_x.max(0.0) as usize,
            (max_x as usize).min(w - 1),
            min_y.max(0.0) as usize,
            (max_y as usize).min(h - 1),
        ))
    }
}

/// A shadowing feature as a sum of blurred rectangles with signed weights
/// (scene pixel units).
struct Shadow {
    rects: Vec<(f64, f64, f64, f64, f64)>, // x0, x1, y0, y1, weight
    depth: f64,
    bounds: (f64, f64, f64, f64),
}

impl Shadow {
    fn mask(&self, x: f64, y: f64, sigma: f64) -> f64 {
        self.rects
            .iter()
            .map(|&(x0, x1, y0, y1, w)| w * blurred_box(x, x0, x1, sigma) * blurred_box(y, y0, y1, sigma))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }
}

fn shadows(scene: &Scene) -> Vec<Shadow> {
    let p = scene.frame.pitch_nm;
    let margin = 6.0 * scene.marker_blur_nm / p + 1.0;
    let mut out = Vec::new();
    for c in &scene.crosses {
        let (cx, cy) = (c.center_x_nm / p, c.center_y_nm / p);
        let l = c.arm_length_nm / p;
        let h = 0.5 * c.arm_width_nm / p;
        out.push(Shadow {
            // union of the two bars = H + V − H∩V
            rects: vec![
                (cx - l, cx + l, cy - h, cy + h, 1.0),
                (cx - h, cx + h, cy - l, cy + l, 1.0),
                (cx - h, cx + h, cy - h, cy + h, -1.0),
            ],
            depth: c.depth,
            bounds: (cx - l - margin, cx + l + margin, cy - l - margin, cy + l + margin),
        });
    }
    for lab in &scene.labels {
        for (rx, ry, hx, hy) in lab.rectangles() {
            let (rx, ry, hx, hy) = (rx / p, ry / p, hx / p, hy / p);
            out.push(Shadow {
                rects: vec![(rx - hx, rx + hx, ry - hy, ry + hy, 1.0)],
                depth: lab.depth,
                bounds: (rx - hx - margin, rx + hx + margin, ry - hy - margin, ry + hy + margin),
            });
        }
    }
    let (w, h) = (scene.frame.width as f64, scene.frame.height as f64);
    let big = 2.0 * w.max(h);
    for l in &scene.lines {
        let pos = l.position_nm / p;
        let half = 0.5 * l.width_nm / p;
        let (rect, bounds) = match l.orientation {
            Orientation::AlongX => (
                (-big, big, pos - half, pos + half, 1.0),
                (-big, big, pos - half - margin, pos + half + margin),
            ),
            Orientation::AlongY => (
                (pos - half, pos + half, -big, big, 1.0),
                (pos - half - margin, pos + half + margin, -big, big),
            ),
        };
        out.push(Shadow {
            rects: vec![rect],
            depth: l.depth,
            bounds,
        });
    }
    out
}

fn render_markers(scene: &Scene, counts: &mut [f64]) {
    let (w, h) = (scene.frame.width, scene.frame.height);
    let rot = Rotation::new(scene);
    let sigma = scene.marker_blur_nm / scene.frame.pitch_nm;
    let mut transmission = vec![1.0; w * h];
    for sh in shadows(scene) {
        let (x0, x1, y0, y1) = sh.bounds;
        let Some((px0, px1, py0, py1)) = rot.pixel_bounds(x0, x1, y0, y1, w, h) else {
            continue;
        };
        for py in py0..=py1 {
            for px in px0..=px1 {
                let (sx, sy) = rot.inverse(px as f64, py as f64);
                if sx < x0 || sx > x1 || sy < y0 || sy > y1 {
                    continue;
                }
                let m = sh.mask(sx, sy, sigma);
                transmission[py * w + px] *= 1.0 - sh.depth * m;
            }
        }
    }
    let brightness = if scene.mode.is_doped() {
        scene.doped_brightness
    } else {
        1.0
    };
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            let env = scene.background.eval(px as f64, py as f64);
            counts[i] = (env * brightness * transmission[i]).max(0.0);
        }
    }
}

fn add_waveguides(scene: &Scene, counts: &mut [f64]) {
    let (w, h) = (scene.frame.width, scene.frame.height);
    let p = scene.frame.pitch_nm;
    let rot = Rotation::new(scene);
    for g in &scene.waveguides {
        let s = g.blur_nm / p;
        let axis = g.axis_nm / p;
        let edges = [
            (axis + g.trench_edge_offsets_nm.0 / p, g.edge_brightness),
            (axis, g.core_brightness),
            (axis + g.trench_edge_offsets_nm.1 / p, g.edge_brightness),
        ];
        let extent = g.extent_nm.map(|(a, b)| (a / p, b / p));
        for py in 0..h {
            for px in 0..w {
                let (sx, sy) = rot.inverse(px as f64, py as f64);
                let (along, across) = g.orientation.split(sx, sy);
                let mut v = 0.0;
                for &(c, amp) in &edges {
                    let u = (across - c) / s;
                    v += amp * (-0.5 * u * u).exp();
                }
                if let Some((a, b)) = extent {
                    v *= blurred_box(along, a, b, s);
                }
                counts[py * w + px] += v;
            }
        }
    }
}

fn add_emitter(scene: &Scene, e: &EmitterSpec, counts: &mut [f64]) {
    let (w, h) = (scene.frame.width, scene.frame.height);
    let p = scene.frame.pitch_nm;
    let rot = Rotation::new(scene);
    let (ex, ey) = rot.forward(e.x_nm / p, e.y_nm / p);
    let orientation = e.orientation_deg + scene.rotation_deg;
    let minor = e.psf_scale_nm / p;
    let major = minor * e.ellipticity;
    match e.psf {
        PsfKind::Gaussian => {
            let reach = 8.0 * major + 2.0;
            let x0 = (ex - reach).floor().max(0.0) as usize;
            let x1 = ((ex + reach).ceil().max(0.0) as usize).min(w - 1);
            let y0 = (ey - reach).floor().max(0.0) as usize;
            let y1 = ((ey + reach).ceil().max(0.0) as usize).min(h - 1);
            let quarter = orientation.rem_euclid(90.0);
            let axis_aligned = e.ellipticity == 1.0 || quarter == 0.0;
            if axis_aligned {
                // exact pixel integration: product of 1D erf integrals
                let (sx, sy) = if e.ellipticity == 1.0 || orientation.rem_euclid(180.0) == 0.0 {
                    (major, minor)
                } else {
                    (minor, major)
                };
                let gx: Vec<f64> = (x0..=x1)
                    .map(|x| blurred_box(ex, x as f64 - 0.5, x as f64 + 0.5, sx))
                    .collect();
                for y in y0..=y1 {
                    let gy = blurred_box(ey, y as f64 - 0.5, y as f64 + 0.5, sy);
                    for (j, x) in (x0..=x1).enumerate() {
                        counts[y * w + x] += e.photons * gx[j] * gy;
                    }
                }
            } else {
                let (sn, cs) = orientation.to_radians().sin_cos();
                let norm = e.photons / (2.0 * std::f64::consts::PI * major * minor);
                const SUB: usize = 5;
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        let mut acc = 0.0;
                        for sy in 0..SUB {
                            for sx in 0..SUB {
                                let dx = x as f64 - 0.5 + (sx as f64 + 0.5) / SUB as f64 - ex;
                                let dy = y as f64 - 0.5 + (sy as f64 + 0.5) / SUB as f64 - ey;
                                let u = (dx * cs + dy * sn) / major;
                                let v = (-dx * sn + dy * cs) / minor;
                                acc += (-0.5 * (u * u + v * v)).exp();
                            }
                        }
                        counts[y * w + x] += norm * acc / (SUB * SUB) as f64;
                    }
                }
            }
        }
        PsfKind::Airy => {
            let (sn, cs) = orientation.to_radians().sin_cos();
            let norm = e.photons / (AIRY_TOTAL_POWER * major * minor);
            let reach = 60.0 * major;
            let x0 = (ex - reach).floor().max(0.0) as usize;
            let x1 = ((ex + reach).ceil().max(0.0) as usize).min(w - 1);
            let y0 = (ey - reach).floor().max(0.0) as usize;
            let y1 = ((ey + reach).ceil().max(0.0) as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = x as f64 - ex;
                    let dy = y as f64 - ey;
                    let u = (dx * cs + dy * sn) / major;
                    let v = (-dx * sn + dy * cs) / minor;
                    counts[y * w + x] += norm * airy_intensity((u * u + v * v).sqrt());
                }
            }
        }
    }
}

/// Noise-free expected counts of a scene (not validated).
pub fn expected_counts(scene: &Scene) -> Vec<f64> {
    let n = scene.frame.width * scene.frame.height;
    let mut counts = vec![0.0; n];
    if scene.mode.is_marker() {
        render_markers(scene, &mut counts);
    } else {
        counts.iter_mut().for_each(|c| *c = scene.emitter_background);
        add_waveguides(scene, &mut counts);
        for e in &scene.emitters {
            add_emitter(scene, e, &mut counts);
        }
    }
    counts
}

/// Renders a scene: marker modes show the illumination envelope with cross,
/// label and line shadows; emitter modes show PSF spots and waveguide peaks on
/// a flat background. Shot noise (Poisson) and then Gaussian read noise are
/// applied when enabled, after which counts are clamped at 0 and rounded.
/// The output depends only on the scene, including its seed.
pub fn render(scene: &Scene) -> Result<Image> {
    scene.validate()?;
    let mut counts = expected_counts(scene);
    let noisy = scene.shot_noise || scene.read_noise_sigma > 0.0;
    if noisy {
        let mut rng = rng_from_seed(scene.seed);
        let read = Normal::new(0.0, scene.read_noise_sigma.max(0.0)).expect("σ ≥ 0");
        for c in counts.iter_mut() {
            let mut v = *c;
            if scene.shot_noise && v > 0.0 {
                v = Poisson::new(v).expect("positive rate").sample(&mut rng);
            }
            if scene.read_noise_sigma > 0.0 {
                v += read.sample(&mut rng);
            }
            *c = v.max(0.0).round().min(65535.0);
        }
    }
    let meta = ImageMeta {
        exposure_s: None,
        mode: Some(scene.mode.as_str().to_string()),
    };
    Ok(Image::new(scene.frame.width, scene.frame.height, counts, scene.frame.pitch_nm)?.with_meta(meta))
}
