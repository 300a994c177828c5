use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::render;
use super::scene::{
    CrossSpec, EmitterSpec, Frame, ImagingMode, LabelSpec, Orientation, PsfKind, Scene, WaveguideSpec,
};
use crate::error::{Error, Result};
use crate::imgproc::{encode_pgm, BackgroundModel};
use crate::io::{csv_bytes, write_atomic, write_json};
use crate::markers::MarkerGrid;
use crate::rng::{derive_seed, rng_from_seed, RNG_ALGORITHM};

/// Intrinsic (undoped) or doped sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Intrinsic,
    Doped,
}

impl SampleKind {
    pub fn marker_mode(self) -> ImagingMode {
        match self {
            SampleKind::Intrinsic => ImagingMode::IntrinsicMarkers,
            SampleKind::Doped => ImagingMode::DopedMarkers,
        }
    }

    pub fn emitter_mode(self) -> ImagingMode {
        match self {
            SampleKind::Intrinsic => ImagingMode::IntrinsicEmitters,
            SampleKind::Doped => ImagingMode::DopedEmitters,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::Intrinsic => "intrinsic",
            SampleKind::Doped => "doped",
        }
    }
}

/// Post-fabrication device scenes: one waveguide image and one QD image per
/// device, with the QD displaced from the guide axis by a normally
/// distributed misalignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTemplate {
    pub sample: SampleKind,
    pub frame: Frame,
    pub orientation: Orientation,
    pub guide_width_nm: f64,
    pub trench_edge_offsets_nm: (f64, f64),
    pub edge_brightness: f64,
    pub core_brightness: f64,
    pub guide_blur_nm: f64,
    pub guide_background: f64,
    pub qd_photons: f64,
    /// Airy scale along the minor axis.
    pub qd_scale_nm: f64,
    pub qd_ellipticity: f64,
    pub qd_orientation_deg: f64,
    pub qd_background: f64,
    pub read_noise_sigma: f64,
    pub delta_mean_nm: f64,
    pub delta_std_nm: f64,
    /// Fraction of devices whose QD is missing after fabrication.
    pub dropout_fraction: f64,
    /// Spacing of devices in the global frame.
    pub device_spacing_nm: f64,
}

/// One grid square imaged twice: marker image and emitter image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareTemplate {
    pub sample: SampleKind,
    pub frame: Frame,
    pub grid: MarkerGrid,
    /// Global grid indices of the square's top-left node.
    pub row: u8,
    pub col: u8,
    /// Illumination envelope of the marker image (pixel units, before the doped brightness factor).
    pub envelope: BackgroundModel,
    pub doped_brightness: f64,
    pub marker_blur_nm: f64,
    pub marker_read_noise: f64,
    pub rotation_deg: f64,
    /// Uniform jitter of the square position in the image, nm.
    pub position_jitter_nm: f64,
    pub n_emitters: usize,
    pub emitter_photons: f64,
    pub emitter_sigma_nm: f64,
    pub emitter_background: f64,
    pub emitter_read_noise: f64,
    /// Keep-out margin from the square edges for emitters, nm.
    pub emitter_margin_nm: f64,
    pub min_emitter_separation_nm: f64,
}

/// Corpus description. Every scene derives its own seed from `(seed, index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub seed: u64,
    pub devices: usize,
    #[serde(default)]
    pub squares: usize,
    pub device: DeviceTemplate,
    pub square: SquareTemplate,
}

/// One row of `devices.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub orientation: Orientation,
    pub origin_x_nm: f64,
    pub origin_y_nm: f64,
    pub target_x_nm: f64,
    pub target_y_nm: f64,
    pub guide_image: String,
    pub qd_image: String,
}

/// Sidecar describing a rendered square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareRecord {
    pub square_id: String,
    pub sample: SampleKind,
    pub markers_image: String,
    pub emitters_image: String,
    pub grid: MarkerGrid,
    pub row: u8,
    pub col: u8,
    /// Approximate image position (nm) of the top-left node, good to ~1 µm.
    pub nominal_origin_nm: (f64, f64),
}

/// One row of `ground_truth.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub scene_id: String,
    pub feature_kind: String,
    pub true_x_nm: f64,
    pub true_y_nm: f64,
    pub params: String,
    pub rng: String,
}

pub const TRUTH_HEADER: [&str; 6] = ["scene_id", "feature_kind", "true_x_nm", "true_y_nm", "params", "rng"];
pub const DEVICE_HEADER: [&str; 8] = [
    "device_id",
    "orientation",
    "origin_x_nm",
    "origin_y_nm",
    "target_x_nm",
    "target_y_nm",
    "guide_image",
    "qd_image",
];

/// What [`emit_corpus`] wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub rng: String,
    pub devices: usize,
    pub squares: usize,
    pub files: Vec<String>,
}

/// A fully specified device: its two scenes plus bookkeeping.
#[derive(Debug, Clone)]
pub struct DeviceScenes {
    pub record: DeviceRecord,
    pub guide: Scene,
    pub qd: Scene,
    pub delta_nm: f64,
    pub qd_present: bool,
    pub truth: Vec<TruthRow>,
}

fn rng_tag(seed: u64) -> String {
    format!("{RNG_ALGORITHM}:{seed}")
}

/// Builds device `index` of a corpus (no rendering).
pub fn device_scenes(t: &DeviceTemplate, seed: u64, index: usize) -> Result<DeviceScenes> {
    let sub = derive_seed(seed, index as u64);
    let mut rng = rng_from_seed(sub);
    let p = t.frame.pitch_nm;
    let id = format!("device_{index:04}");
    let origin = (
        (index % 10) as f64 * t.device_spacing_nm,
        (index / 10) as f64 * t.device_spacing_nm,
    );
    let center = (
        (t.frame.width as f64 - 1.0) / 2.0 * p,
        (t.frame.height as f64 - 1.0) / 2.0 * p,
    );
    let along_jitter = rng.random_range(-3.0..3.0) * p;
    let across_jitter = rng.random_range(-1.0..1.0) * p;
    let delta = Normal::new(t.delta_mean_nm, t.delta_std_nm)
        .map_err(|e| Error::InvalidInput(format!("misalignment distribution: {e}")))?
        .sample(&mut rng);
    let present = rng.random::<f64>() >= t.dropout_fraction;

    let (qd_local, axis) = match t.orientation {
        Orientation::AlongX => {
            let q = (center.0 + along_jitter, center.1 + across_jitter);
            (q, q.1 - delta)
        }
        Orientation::AlongY => {
            let q = (center.0 + across_jitter, center.1 + along_jitter);
            (q, q.0 - delta)
        }
    };
    let mode = t.sample.emitter_mode();
    let mut guide = Scene::empty(mode, t.frame);
    guide.waveguides.push(WaveguideSpec {
        axis_nm: axis,
        orientation: t.orientation,
        width_nm: t.guide_width_nm,
        trench_edge_offsets_nm: t.trench_edge_offsets_nm,
        edge_brightness: t.edge_brightness,
        core_brightness: t.core_brightness,
        blur_nm: t.guide_blur_nm,
        extent_nm: None,
    });
    guide.emitter_background = t.guide_background;
    guide.read_noise_sigma = t.read_noise_sigma;
    guide.shot_noise = true;
    guide.seed = derive_seed(sub, 1);

    let mut qd = Scene::empty(mode, t.frame);
    if present {
        qd.emitters.push(EmitterSpec {
            x_nm: qd_local.0,
            y_nm: qd_local.1,
            photons: t.qd_photons,
            psf: PsfKind::Airy,
            psf_scale_nm: t.qd_scale_nm,
            ellipticity: t.qd_ellipticity,
            orientation_deg: t.qd_orientation_deg,
        });
    }
    qd.emitter_background = t.qd_background;
    qd.read_noise_sigma = t.read_noise_sigma;
    qd.shot_noise = true;
    qd.seed = derive_seed(sub, 2);

    let global = (origin.0 + qd_local.0, origin.1 + qd_local.1);
    let (wx, wy) = match t.orientation {
        Orientation::AlongX => (origin.0 + center.0, origin.1 + axis),
        Orientation::AlongY => (origin.0 + axis, origin.1 + center.1),
    };
    let truth = vec![
        TruthRow {
            scene_id: id.clone(),
            feature_kind: "waveguide".into(),
            true_x_nm: wx,
            true_y_nm: wy,
            params: format!("orientation={};delta_nm={delta}", t.orientation),
            rng: rng_tag(guide.seed),
        },
        TruthRow {
            scene_id: id.clone(),
            feature_kind: "emitter".into(),
            true_x_nm: global.0,
            true_y_nm: global.1,
            params: format!("psf=airy;photons={};present={}", t.qd_photons, present as u8),
            rng: rng_tag(qd.seed),
        },
    ];
    Ok(DeviceScenes {
        record: DeviceRecord {
            device_id: id.clone(),
            orientation: t.orientation,
            origin_x_nm: origin.0,
            origin_y_nm: origin.1,
            target_x_nm: global.0,
            target_y_nm: global.1,
            guide_image: format!("devices/{id}_guide.pgm"),
            qd_image: format!("devices/{id}_qd.pgm"),
        },
        guide,
        qd,
        delta_nm: delta,
        qd_present: present,
        truth,
    })
}

/// A fully specified grid square.
#[derive(Debug, Clone)]
pub struct SquareScenes {
    pub record: SquareRecord,
    pub markers: Scene,
    pub emitters: Scene,
    /// Image-frame (unrotated scene) positions of the four nodes, nm, in
    /// order (0,0), (0,1), (1,0), (1,1).
    pub nodes_image_nm: [(f64, f64); 4],
    pub truth: Vec<TruthRow>,
}

/// Builds square `index` of a corpus (no rendering). Square seeds are
/// derived from a separate stream so adding devices never changes squares.
pub fn square_scenes(t: &SquareTemplate, seed: u64, index: usize) -> Result<SquareScenes> {
    let sub = derive_seed(derive_seed(seed, u64::MAX), index as u64);
    let mut rng = rng_from_seed(sub);
    let g = &t.grid;
    let id = format!("square_{index:03}");
    let frame_center = (
        (t.frame.width as f64 - 1.0) / 2.0 * t.frame.pitch_nm,
        (t.frame.height as f64 - 1.0) / 2.0 * t.frame.pitch_nm,
    );
    let j = t.position_jitter_nm;
    let origin = (
        frame_center.0 - g.pitch_nm / 2.0 + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 },
        frame_center.1 - g.pitch_nm / 2.0 + if j > 0.0 { rng.random_range(-j..j) } else { 0.0 },
    );
    let mut markers = Scene::empty(t.sample.marker_mode(), t.frame);
    markers.background = t.envelope;
    markers.doped_brightness = t.doped_brightness;
    markers.marker_blur_nm = t.marker_blur_nm;
    markers.read_noise_sigma = t.marker_read_noise;
    markers.rotation_deg = t.rotation_deg;
    markers.shot_noise = true;
    markers.seed = derive_seed(sub, 1);

    let mut nodes = [(0.0, 0.0); 4];
    let mut truth = Vec::new();
    for (k, node) in nodes.iter_mut().enumerate() {
        let (di, dj) = (k / 2, k % 2);
        let pos = (origin.0 + dj as f64 * g.pitch_nm, origin.1 + di as f64 * g.pitch_nm);
        *node = pos;
        let (row, col) = (t.row + di as u8, t.col + dj as u8);
        markers.crosses.push(CrossSpec {
            center_x_nm: pos.0,
            center_y_nm: pos.1,
            arm_length_nm: g.arm_length_nm,
            arm_width_nm: g.arm_width_nm,
            depth: 1.0,
        });
        let lc = g.label_center(pos);
        markers.labels.push(LabelSpec::for_node(
            lc,
            row,
            col,
            g.label_rect_long_nm,
            g.label_rect_short_nm,
            g.label_cell_nm,
        ));
        let global = g.node_global(row, col);
        truth.push(TruthRow {
            scene_id: id.clone(),
            feature_kind: "cross".into(),
            true_x_nm: global.0,
            true_y_nm: global.1,
            params: format!("row={row};col={col};image_x_nm={};image_y_nm={}", pos.0, pos.1),
            rng: rng_tag(markers.seed),
        });
    }

    let mut emitters = Scene::empty(t.sample.emitter_mode(), t.frame);
    emitters.emitter_background = t.emitter_background;
    emitters.read_noise_sigma = t.emitter_read_noise;
    emitters.rotation_deg = t.rotation_deg;
    emitters.shot_noise = true;
    emitters.seed = derive_seed(sub, 2);
    let lo = t.emitter_margin_nm;
    let hi = g.pitch_nm - t.emitter_margin_nm;
    if !(hi > lo) && t.n_emitters > 0 {
        return Err(Error::InvalidInput("emitter margin leaves no room inside the square".into()));
    }
    let mut placed: Vec<(f64, f64)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < t.n_emitters {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidInput(format!(
                "cannot place {} emitters with separation {} nm",
                t.n_emitters, t.min_emitter_separation_nm
            )));
        }
        let p = (origin.0 + rng.random_range(lo..hi), origin.1 + rng.random_range(lo..hi));
        let sep2 = t.min_emitter_separation_nm.powi(2);
        if placed
            .iter()
            .all(|q| (q.0 - p.0).powi(2) + (q.1 - p.1).powi(2) >= sep2)
        {
            placed.push(p);
        }
    }
    let top_left = g.node_global(t.row, t.col);
    for (k, p) in placed.iter().enumerate() {
        emitters.emitters.push(EmitterSpec {
            x_nm: p.0,
            y_nm: p.1,
            photons: t.emitter_photons,
            psf: PsfKind::Gaussian,
            psf_scale_nm: t.emitter_sigma_nm,
            ellipticity: 1.0,
            orientation_deg: 0.0,
        });
        truth.push(TruthRow {
            scene_id: id.clone(),
            feature_kind: "emitter".into(),
            true_x_nm: top_left.0 + p.0 - origin.0,
            true_y_nm: top_left.1 + p.1 - origin.1,
            params: format!(
                "index={k};psf=gaussian;photons={};image_x_nm={};image_y_nm={}",
                t.emitter_photons, p.0, p.1
            ),
            rng: rng_tag(emitters.seed),
        });
    }
    let round = |v: f64| (v / 1000.0).round() * 1000.0;
    Ok(SquareScenes {
        record: SquareRecord {
            square_id: id.clone(),
            sample: t.sample,
            markers_image: format!("squares/{id}_markers.pgm"),
            emitters_image: format!("squares/{id}_emitters.pgm"),
            grid: g.clone(),
            row: t.row,
            col: t.col,
            nominal_origin_nm: (round(origin.0), round(origin.1)),
        },
        markers,
        emitters,
        nodes_image_nm: nodes,
        truth,
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Renders a corpus into `out`: `devices/*.pgm`, `devices.csv`,
/// `squares/*.pgm` with JSON sidecars, `ground_truth.csv` and `corpus.json`.
/// Scenes render in parallel; the bytes written depend only on the config.
pub fn emit_corpus(cfg: &CorpusConfig, out: &Path) -> Result<CorpusManifest> {
    ensure_dir(out)?;
    let devices: Vec<DeviceScenes> = (0..cfg.devices)
        .map(|i| device_scenes(&cfg.device, cfg.seed, i))
        .collect::<Result<_>>()?;
    let squares: Vec<SquareScenes> = (0..cfg.squares)
        .map(|i| square_scenes(&cfg.square, cfg.seed, i))
        .collect::<Result<_>>()?;

    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    if !devices.is_empty() {
        ensure_dir(&out.join("devices"))?;
    }
    if !squares.is_empty() {
        ensure_dir(&out.join("squares"))?;
    }
    let device_images: Vec<(Vec<u8>, Vec<u8>)> = devices
        .par_iter()
        .map(|d| Ok((encode_pgm(&render(&d.guide)?), encode_pgm(&render(&d.qd)?))))
        .collect::<Result<_>>()?;
    for (d, (g, q)) in devices.iter().zip(device_images) {
        files.push((out.join(&d.record.guide_image), g));
        files.push((out.join(&d.record.qd_image), q));
    }
    let square_images: Vec<(Vec<u8>, Vec<u8>)> = squares
        .par_iter()
        .map(|s| Ok((encode_pgm(&render(&s.markers)?), encode_pgm(&render(&s.emitters)?))))
        .collect::<Result<_>>()?;
    for (s, (m, e)) in squares.iter().zip(square_images) {
        files.push((out.join(&s.record.markers_image), m));
        files.push((out.join(&s.record.emitters_image), e));
        let mut json = serde_json::to_vec_pretty(&s.record)?;
        json.push(b'\n');
        files.push((out.join(format!("squares/{}.json", s.record.square_id)), json));
    }

    let records: Vec<&DeviceRecord> = devices.iter().map(|d| &d.record).collect();
    files.push((out.join("devices.csv"), csv_bytes(&records, &DEVICE_HEADER, &[])?));
    let truth: Vec<&TruthRow> = devices
        .iter()
        .flat_map(|d| d.truth.iter())
        .chain(squares.iter().flat_map(|s| s.truth.iter()))
        .collect();
    files.push((out.join("ground_truth.csv"), csv_bytes(&truth, &TRUTH_HEADER, &[])?));

    let mut written = Vec::with_capacity(files.len() + 1);
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
        written.push(
            path.strip_prefix(out)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/"),
        );
    }
    write_json(&out.join("corpus.json"), cfg)?;
    written.push("corpus.json".into());
    Ok(CorpusManifest {
        rng: RNG_ALGORITHM.to_string(),
        devices: cfg.devices,
        squares: cfg.squares,
        files: written,
    })
}
