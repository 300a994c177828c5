//! File-driven runs: corpus generation, square localization, device
//! misalignment and spectroscopy, each reading and writing flat files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emitters::{EmitterRow, SpotDetection, EMITTER_HEADER};
use crate::error::{Error, Result};
use crate::imgproc::{load_image, Image};
use crate::io::{csv_bytes, read_csv, read_json, write_atomic, write_csv, write_json};
use crate::markers::{CrossRow, CROSS_HEADER};
use crate::pipeline::{
    analyze_map, compare_maps, locate_square, measure_device, AtStage, LocateConfig, SquareResult, Stage,
    StageError, StageResult, TraceComparison, TraceModel,
};
use crate::presets::{self, Preset};
use crate::registration::{correlate_devices, Correlation, FrameTransform, GlobalPoint, PointSource};
use crate::rng::derive_seed;
use crate::stark::{
    read_plateau_map, shift_stats, spectral_shift, write_plateau_map, FieldConfig, GroupStats, Grouping,
    PlateauConfig, ShiftRecord, Spectrum, Structure,
};
use crate::synth::{emit_corpus, plateau_map, shift_corpus, CorpusConfig, DeviceRecord, SquareRecord};
use crate::waveguides::{
    histogram, histogram_svg, misalign_stats, DeviceRow, GuideFitConfig, MisalignStats, DELTA_SIGN_NOTE,
    DEVICE_ROW_HEADER,
};

/// Run settings shared by every command. Any field may be omitted from the
/// JSON file; command-line flags override what the file says.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: u64,
    /// Devices (image presets), spectrum pairs per group (`fig3`) or dots (`fig5`).
    pub n: Option<usize>,
    pub squares: Option<usize>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Pre-fabrication `qd_global.csv` to match devices against.
    pub prefab: Option<PathBuf>,
    /// Full corpus description; replaces the preset's when given.
    pub corpus: Option<CorpusConfig>,
    pub locate: LocateConfig,
    pub guide: GuideFitConfig,
    pub device_spots: SpotDetection,
    pub plateau: PlateauConfig,
    pub field: FieldConfig,
    pub grouping: Grouping,
    pub match_radius_nm: f64,
    pub histogram_bin_nm: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            n: None,
            squares: None,
            input: None,
            out: None,
            prefab: None,
            corpus: None,
            locate: LocateConfig::default(),
            guide: GuideFitConfig::default(),
            device_spots: SpotDetection::default(),
            plateau: PlateauConfig::default(),
            field: FieldConfig::default(),
            grouping: Grouping::default(),
            match_radius_nm: 150.0,
            histogram_bin_nm: 20.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> StageResult<Self> {
        read_json(path).at_config(Stage::Config)
    }
}

const DEFAULT_DEVICES: usize = 50;
const DEFAULT_PAIRS_PER_GROUP: usize = 20;
const DEFAULT_DOTS: usize = 1;

fn ensure_dir(dir: &Path, stage: Stage) -> StageResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::io(dir, e))
        .at_config(stage)
}

fn require_file(path: &Path, stage: Stage) -> StageResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(StageError::config(
            stage,
            Error::InvalidInput(format!("{} does not exist", path.display())),
        ))
    }
}

/// What a simulate run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub files: Vec<String>,
}

/// Writes a synthetic corpus for the configured preset (default `fig2b`).
pub fn simulate(cfg: &RunConfig, out: &Path) -> StageResult<SimulateSummary> {
    ensure_dir(out, Stage::Output)?;
    let preset = cfg.preset.unwrap_or(Preset::Fig2b);
    let files = match (preset, &cfg.corpus) {
        (_, Some(corpus)) => {
            let mut c = corpus.clone();
            c.seed = cfg.seed;
            if let Some(n) = cfg.n {
                c.devices = n;
            }
            if let Some(s) = cfg.squares {
                c.squares = s;
            }
            emit_corpus(&c, out).at(Stage::Output)?.files
        }
        (Preset::Fig2b | Preset::Fig2c, None) => {
            let c = presets::corpus(
                preset,
                cfg.seed,
                cfg.n.unwrap_or(DEFAULT_DEVICES),
                cfg.squares.unwrap_or(0),
            )
            .at_config(Stage::Config)?;
            emit_corpus(&c, out).at(Stage::Output)?.files
        }
        (Preset::Fig3, None) => simulate_spectra(cfg.seed, cfg.n.unwrap_or(DEFAULT_PAIRS_PER_GROUP), out)?,
        (Preset::Fig5, None) => simulate_maps(cfg.seed, cfg.n.unwrap_or(DEFAULT_DOTS), out)?,
    };
    Ok(SimulateSummary {
        preset: if cfg.corpus.is_some() { None } else { Some(preset) },
        seed: cfg.seed,
        files,
    })
}

/// One row of `spectra.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPairRow {
    pub qd_id: String,
    pub structure: Structure,
    pub group: String,
    pub before: String,
    pub after: String,
}

pub const SPECTRUM_PAIR_HEADER: [&str; 5] = ["qd_id", "structure", "group", "before", "after"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpectrumSample {
    wavelength_nm: f64,
    intensity: f64,
}

pub fn write_spectrum(path: &Path, s: &Spectrum) -> Result<()> {
    let rows: Vec<SpectrumSample> = s
        .wavelengths()
        .iter()
        .zip(s.intensities())
        .map(|(&wavelength_nm, &intensity)| SpectrumSample {
            wavelength_nm,
            intensity,
        })
        .collect();
    write_csv(path, &rows, &["wavelength_nm", "intensity"], &[])
}

pub fn read_spectrum(path: &Path) -> Result<Spectrum> {
    let rows: Vec<SpectrumSample> = read_csv(path)?;
    Spectrum::new(
        rows.iter().map(|r| r.wavelength_nm).collect(),
        rows.iter().map(|r| r.intensity).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftTruthRow {
    qd_id: String,
    true_shift_nm: f64,
}

fn simulate_spectra(seed: u64, per_group: usize, out: &Path) -> StageResult<Vec<String>> {
    let pairs = shift_corpus(&presets::shift_survey(per_group), seed).at(Stage::Output)?;
    let mut files = Vec::new();
    let mut index = Vec::new();
    let mut truth = Vec::new();
    if !pairs.is_empty() {
        ensure_dir(&out.join("spectra"), Stage::Output)?;
    }
    for p in &pairs {
        let before = format!("spectra/{}_before.csv", p.qd_id);
        let after = format!("spectra/{}_after.csv", p.qd_id);
        write_spectrum(&out.join(&before), &p.before).at(Stage::Output)?;
        write_spectrum(&out.join(&after), &p.after).at(Stage::Output)?;
        files.push(before.clone());
        files.push(after.clone());
        index.push(SpectrumPairRow {
            qd_id: p.qd_id.clone(),
            structure: p.structure,
            group: p.group.clone(),
            before,
            after,
        });
        truth.push(ShiftTruthRow {
            qd_id: p.qd_id.clone(),
            true_shift_nm: p.true_shift_nm,
        });
    }
    write_csv(&out.join("spectra.csv"), &index, &SPECTRUM_PAIR_HEADER, &[]).at(Stage::Output)?;
    write_csv(&out.join("spectra_truth.csv"), &truth, &["qd_id", "true_shift_nm"], &[]).at(Stage::Output)?;
    files.push("spectra.csv".into());
    files.push("spectra_truth.csv".into());
    Ok(files)
}

/// One row of `maps.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPairRow {
    pub map_id: String,
    pub before: String,
    pub after: String,
}

pub const MAP_PAIR_HEADER: [&str; 3] = ["map_id", "before", "after"];

fn simulate_maps(seed: u64, dots: usize, out: &Path) -> StageResult<Vec<String>> {
    let (before_spec, after_spec) = presets::stark_maps();
    let mut files = Vec::new();
    let mut index = Vec::new();
    if dots > 0 {
        ensure_dir(&out.join("maps"), Stage::Output)?;
    }
    for k in 0..dots {
        let id = format!("dot_{k:02}");
        let sub = derive_seed(seed, k as u64);
        for (tag, spec, stream) in [("before", &before_spec, 1), ("after", &after_spec, 2)] {
            let map = plateau_map(spec, derive_seed(sub, stream)).at(Stage::Output)?;
            let rel = format!("maps/{id}_{tag}.csv");
            write_plateau_map(&out.join(&rel), &map).at(Stage::Output)?;
            files.push(rel);
        }
        index.push(MapPairRow {
            map_id: id.clone(),
            before: format!("maps/{id}_before.csv"),
            after: format!("maps/{id}_after.csv"),
        });
    }
    write_csv(&out.join("maps.csv"), &index, &MAP_PAIR_HEADER, &[]).at(Stage::Output)?;
    write_json(&out.join("maps_truth.json"), &[before_spec, after_spec]).at(Stage::Output)?;
    files.push("maps.csv".into());
    files.push("maps_truth.json".into());
    Ok(files)
}

/// One row of `qd_global.csv`: an emitter in the grid frame with its
/// combined positional uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QdGlobalRow {
    pub emitter_id: String,
    pub square_id: String,
    pub x_nm: f64,
    pub y_nm: f64,
    pub delta_nm: f64,
    pub image_x_nm: f64,
    pub image_y_nm: f64,
}

pub const QD_GLOBAL_HEADER: [&str; 7] =
    ["emitter_id", "square_id", "x_nm", "y_nm", "delta_nm", "image_x_nm", "image_y_nm"];

/// Per-square registration summary written to `transform.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareTransform {
    pub transform: FrameTransform,
    pub rotation_deg: f64,
    pub rotation_unc_deg: f64,
    pub rotation_corrected: bool,
    pub marker_unc_nm: f64,
    pub crosses: usize,
    pub labels_read: usize,
    pub emitters: usize,
    pub skipped_merged: usize,
    pub failed_fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocateSummary {
    pub squares: usize,
    pub crosses: usize,
    pub emitters: usize,
    pub mean_delta_nm: Option<f64>,
}

fn square_records(input: &Path) -> StageResult<Vec<SquareRecord>> {
    let dir = input.join("squares");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))
        .at_config(Stage::Input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p).at_config(Stage::Input)).collect()
}

fn load(path: &Path, stage: Stage) -> StageResult<Image> {
    load_image(path).at_config(stage)
}

/// Locates the emitters of every square under `input/squares/`.
pub fn locate(cfg: &RunConfig, input: &Path, out: &Path) -> StageResult<LocateSummary> {
    let records = square_records(input)?;
    for r in &records {
        require_file(&input.join(&r.markers_image), Stage::Markers)?;
        require_file(&input.join(&r.emitters_image), Stage::Emitters)?;
    }
    ensure_dir(out, Stage::Output)?;
    let results: Vec<SquareResult> = records
        .par_iter()
        .map(|r| {
            let markers = load(&input.join(&r.markers_image), Stage::Markers)?;
            let emitters = load(&input.join(&r.emitters_image), Stage::Emitters)?;
            locate_square(&markers, &emitters, r, &cfg.locate)
        })
        .collect::<StageResult<_>>()?;

    let mut cross_rows = Vec::new();
    let mut emitter_rows = Vec::new();
    let mut global_rows = Vec::new();
    let mut transforms = BTreeMap::new();
    for res in &results {
        for c in &res.crosses {
            cross_rows.push(CrossRow::new(format!("{}_r{}c{}", res.square_id, c.row, c.col), &c.fit));
        }
        for e in &res.emitters {
            emitter_rows.push(EmitterRow::new(
                e.global.id.clone(),
                e.global.x_nm,
                e.global.y_nm,
                e.fit.unc_x_nm,
                e.fit.unc_y_nm,
                &e.fit,
            ));
            global_rows.push(QdGlobalRow {
                emitter_id: e.global.id.clone(),
                square_id: res.square_id.clone(),
                x_nm: e.global.x_nm,
                y_nm: e.global.y_nm,
                delta_nm: e.global.unc_nm,
                image_x_nm: e.image_x_nm,
                image_y_nm: e.image_y_nm,
            });
        }
        transforms.insert(
            res.square_id.clone(),
            SquareTransform {
                transform: res.transform.clone(),
                rotation_deg: res.rotation_deg,
                rotation_unc_deg: res.rotation_unc_deg,
                rotation_corrected: res.rotation_corrected,
                marker_unc_nm: res.marker_unc_nm,
                crosses: res.crosses.len(),
                labels_read: res.crosses.iter().filter(|c| c.label.is_some()).count(),
                emitters: res.emitters.len(),
                skipped_merged: res.skipped_merged,
                failed_fits: res.failed_fits,
            },
        );
    }
    write_csv(
        &out.join("markers.csv"),
        &cross_rows,
        &CROSS_HEADER,
        &["cross centers in the rotation-corrected image frame"],
    )
    .at(Stage::Output)?;
    write_csv(
        &out.join("emitters.csv"),
        &emitter_rows,
        &EMITTER_HEADER,
        &["positions in the grid frame; uncertainties of the image fit"],
    )
    .at(Stage::Output)?;
    write_csv(&out.join("qd_global.csv"), &global_rows, &QD_GLOBAL_HEADER, &[]).at(Stage::Output)?;
    write_json(&out.join("transform.json"), &transforms).at(Stage::Output)?;
    let mean_delta_nm =
        (!global_rows.is_empty()).then(|| global_rows.iter().map(|r| r.delta_nm).sum::<f64>() / global_rows.len() as f64);
    Ok(LocateSummary {
        squares: results.len(),
        crosses: cross_rows.len(),
        emitters: emitter_rows.len(),
        mean_delta_nm,
    })
}

/// A device that could not be measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unmatched {
    pub device_id: String,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MisalignSummary {
    pub devices: usize,
    pub measured: usize,
    pub stats: Option<MisalignStats>,
    pub unmatched: Vec<Unmatched>,
    /// Matching of measured dots against the pre-fabrication positions.
    pub correlation: Option<Correlation>,
}

/// Measures every device listed in `input/devices.csv`.
pub fn misalign_devices(cfg: &RunConfig, input: &Path, out: &Path) -> StageResult<MisalignSummary> {
    let index = input.join("devices.csv");
    let records: Vec<DeviceRecord> = if index.is_file() {
        read_csv(&index).at_config(Stage::Input)?
    } else {
        return Err(StageError::config(
            Stage::Input,
            Error::InvalidInput(format!("{} does not exist", index.display())),
        ));
    };
    for r in &records {
        require_file(&input.join(&r.guide_image), Stage::Waveguides)?;
        require_file(&input.join(&r.qd_image), Stage::Emitters)?;
    }
    let prefab: Option<Vec<QdGlobalRow>> = match &cfg.prefab {
        Some(p) => Some(read_csv(p).at_config(Stage::Input)?),
        None => None,
    };
    ensure_dir(out, Stage::Output)?;
    let outcomes: Vec<StageResult<crate::pipeline::DeviceResult>> = records
        .par_iter()
        .map(|r| {
            let guide = load(&input.join(&r.guide_image), Stage::Waveguides)?;
            let qd = load(&input.join(&r.qd_image), Stage::Emitters)?;
            measure_device(&r.device_id, &guide, &qd, r.orientation, &cfg.guide, &cfg.device_spots)
        })
        .collect();

    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    let mut post = Vec::new();
    for (r, o) in records.iter().zip(outcomes) {
        match o {
            Ok(d) => {
                let qd_nm = match d.orientation {
                    crate::synth::Orientation::AlongX => d.qd.y_nm,
                    crate::synth::Orientation::AlongY => d.qd.x_nm,
                };
                rows.push(DeviceRow {
                    device_id: d.device_id.clone(),
                    orientation: d.orientation,
                    axis_nm: d.axis.axis_nm,
                    axis_unc_nm: d.axis.unc_nm,
                    qd_nm,
                    delta_nm: d.misalignment.delta_nm,
                    delta_unc_nm: d.misalignment.unc_nm,
                });
                post.push(GlobalPoint {
                    id: d.device_id.clone(),
                    x_nm: r.origin_x_nm + d.qd.x_nm,
                    y_nm: r.origin_y_nm + d.qd.y_nm,
                    unc_nm: d.qd.unc_x_nm.hypot(d.qd.unc_y_nm),
                    source: PointSource::Emitter,
                });
            }
            Err(e) if e.kind == crate::pipeline::FailureKind::Runtime => {
                tracing::warn!("{}: {}", r.device_id, e);
                unmatched.push(Unmatched {
                    device_id: r.device_id.clone(),
                    stage: e.stage,
                    reason: e.source.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let deltas: Vec<f64> = rows.iter().map(|r| r.delta_nm).collect();
    let stats = if deltas.len() >= 5 {
        Some(misalign_stats(&deltas).at(Stage::Waveguides)?)
    } else {
        if !deltas.is_empty() {
            tracing::warn!("{} measured devices are too few for statistics", deltas.len());
        }
        None
    };
    let bins = histogram(&deltas, cfg.histogram_bin_nm);
    #[derive(Serialize)]
    struct Bin {
        bin_center_nm: f64,
        count: usize,
    }
    let bin_rows: Vec<Bin> = bins
        .iter()
        .map(|&(bin_center_nm, count)| Bin { bin_center_nm, count })
        .collect();
    let correlation = match prefab {
        Some(pre) => {
            let pre: Vec<GlobalPoint> = pre
                .iter()
                .map(|r| GlobalPoint {
                    id: r.emitter_id.clone(),
                    x_nm: r.x_nm,
                    y_nm: r.y_nm,
                    unc_nm: r.delta_nm,
                    source: PointSource::Emitter,
                })
                .collect();
            Some(correlate_devices(&pre, &post, cfg.match_radius_nm).at_config(Stage::Config)?)
        }
        None => None,
    };

    write_csv(&out.join("misalignment.csv"), &rows, &DEVICE_ROW_HEADER, &[DELTA_SIGN_NOTE]).at(Stage::Output)?;
    write_csv(&out.join("histogram.csv"), &bin_rows, &["bin_center_nm", "count"], &[]).at(Stage::Output)?;
    let svg = histogram_svg(&bins, cfg.histogram_bin_nm, stats.as_ref(), "Misalignment Δ (nm)");
    write_atomic(&out.join("histogram.svg"), svg.as_bytes()).at(Stage::Output)?;
    let summary = MisalignSummary {
        devices: records.len(),
        measured: rows.len(),
        stats,
        unmatched,
        correlation,
    };
    write_json(&out.join("misalignment.json"), &summary).at(Stage::Output)?;
    Ok(summary)
}

/// One row of `shifts.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub qd_id: String,
    pub structure: Structure,
    pub group: String,
    pub delta_nm: f64,
    pub unc_nm: f64,
}

pub const SHIFT_HEADER: [&str; 5] = ["qd_id", "structure", "group", "delta_nm", "unc_nm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatsRow {
    pub group: String,
    pub n: usize,
    pub mean_nm: f64,
    pub std_nm: Option<f64>,
}

pub const GROUP_STATS_HEADER: [&str; 4] = ["group", "n", "mean_nm", "std_nm"];

/// Stark results of one map pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub map_id: String,
    pub before: Vec<TraceModel>,
    pub after: Vec<TraceModel>,
    pub comparisons: Vec<TraceComparison>,
}

/// An input that could not be analyzed; the run continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarkSummary {
    pub maps: Vec<MapResult>,
    pub shift_stats: Vec<GroupStats>,
    pub failures: Vec<ItemFailure>,
}

fn analyze_pair(cfg: &RunConfig, input: &Path, row: &MapPairRow) -> Result<MapResult> {
    let before = read_plateau_map(&input.join(&row.before))?;
    let after = read_plateau_map(&input.join(&row.after))?;
    let b = analyze_map(&before, &cfg.plateau, &cfg.field)?;
    let a = analyze_map(&after, &cfg.plateau, &cfg.field)?;
    let comparisons = compare_maps(&b, &a)?;
    Ok(MapResult {
        map_id: row.map_id.clone(),
        before: b,
        after: a,
        comparisons,
    })
}

/// Stark fits of the maps in `input/maps.csv` and line shifts of the
/// spectrum pairs in `input/spectra.csv`.
pub fn stark_run(cfg: &RunConfig, input: &Path, out: &Path) -> StageResult<StarkSummary> {
    let maps_index = input.join("maps.csv");
    let spectra_index = input.join("spectra.csv");
    if !maps_index.is_file() && !spectra_index.is_file() {
        return Err(StageError::config(
            Stage::Input,
            Error::InvalidInput(format!("{} has neither maps.csv nor spectra.csv", input.display())),
        ));
    }
    let map_rows: Vec<MapPairRow> = if maps_index.is_file() {
        read_csv(&maps_index).at_config(Stage::Input)?
    } else {
        Vec::new()
    };
    let pair_rows: Vec<SpectrumPairRow> = if spectra_index.is_file() {
        read_csv(&spectra_index).at_config(Stage::Input)?
    } else {
        Vec::new()
    };
    ensure_dir(out, Stage::Output)?;

    let mut failures = Vec::new();
    let outcomes: Vec<Result<MapResult>> = map_rows.par_iter().map(|r| analyze_pair(cfg, input, r)).collect();
    let mut maps = Vec::new();
    for (r, o) in map_rows.iter().zip(outcomes) {
        match o {
            Ok(m) => maps.push(m),
            Err(e) => {
                tracing::warn!("map {}: {e}", r.map_id);
                failures.push(ItemFailure {
                    id: r.map_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let shifts: Vec<Result<ShiftRow>> = pair_rows
        .par_iter()
        .map(|r| {
            let b = read_spectrum(&input.join(&r.before))?;
            let a = read_spectrum(&input.join(&r.after))?;
            let s = spectral_shift(&b, &a)?;
            Ok(ShiftRow {
                qd_id: r.qd_id.clone(),
                structure: r.structure,
                group: r.group.clone(),
                delta_nm: s.delta_nm,
                unc_nm: s.unc_nm,
            })
        })
        .collect();
    let mut shift_rows = Vec::new();
    for (r, s) in pair_rows.iter().zip(shifts) {
        match s {
            Ok(row) => shift_rows.push(row),
            Err(e) => {
                tracing::warn!("spectrum pair {}: {e}", r.qd_id);
                failures.push(ItemFailure {
                    id: r.qd_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    let records: Vec<ShiftRecord> = shift_rows
        .iter()
        .map(|r| ShiftRecord {
            qd_id: r.qd_id.clone(),
            structure: r.structure,
            group: r.group.clone(),
            delta_nm: r.delta_nm,
        })
        .collect();
    let stats = shift_stats(&records, cfg.grouping).at(Stage::Stark)?;
    let stat_rows: Vec<GroupStatsRow> = stats
        .iter()
        .map(|g| GroupStatsRow {
            group: g.group.clone(),
            n: g.n,
            mean_nm: g.mean_nm,
            std_nm: g.std_nm,
        })
        .collect();
    write_csv(&out.join("shifts.csv"), &shift_rows, &SHIFT_HEADER, &[]).at(Stage::Output)?;
    write_csv(&out.join("shift_stats.csv"), &stat_rows, &GROUP_STATS_HEADER, &[]).at(Stage::Output)?;
    let summary = StarkSummary {
        maps,
        shift_stats: stats,
        failures,
    };
    write_json(&out.join("stark.json"), &summary).at(Stage::Output)?;
    Ok(summary)
}

/// Bytes of a CSV table, for callers that need the exact artifact content.
pub fn table_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>> {
    csv_bytes(rows, header, &[])
}
