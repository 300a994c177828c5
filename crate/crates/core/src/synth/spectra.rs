//! Synthetic emission spectra and voltage–wavelength maps.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::stark::{field, stark_wavelength_nm, FieldConfig, PlateauMap, ShiftRecord, Spectrum, Structure};

/// Uniform wavelength grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    pub start_nm: f64,
    pub step_nm: f64,
    pub len: usize,
}

impl WavelengthGrid {
    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.start_nm + self.step_nm * i as f64).collect()
    }
}

/// Noise applied to every synthetic spectrum sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralNoise {
    pub shot_noise: bool,
    pub read_noise: f64,
}

fn noisy(mean: f64, noise: &SpectralNoise, rng: &mut SimRng) -> f64 {
    let mut v = mean.max(0.0);
    if noise.shot_noise && v > 0.0 {
        v = Poisson::new(v).map(|d| d.sample(rng)).unwrap_or(v);
    }
    if noise.read_noise > 0.0 {
        v += noise.read_noise * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    v.max(0.0)
}

/// One Gaussian emission line on a sloped background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionLine {
    pub center_nm: f64,
    pub width_nm: f64,
    pub amplitude: f64,
    pub background: f64,
    /// Background slope per nm, measured from the grid start.
    pub slope: f64,
}

pub fn line_spectrum(grid: &WavelengthGrid, line: &EmissionLine, noise: &SpectralNoise, seed: u64) -> Result<Spectrum> {
    let mut rng = rng_from_seed(seed);
    let wl = grid.values();
    let y = wl
        .iter()
        .map(|&l| {
            let u = (l - line.center_nm) / line.width_nm;
            let mean = line.amplitude * (-0.5 * u * u).exp() + line.background + line.slope * (l - grid.start_nm);
            noisy(mean, noise, &mut rng)
        })
        .collect();
    Spectrum::new(wl, y)
}

/// Population of emitters whose line shifts between two measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftPopulation {
    pub structure: Structure,
    pub group: String,
    pub count: usize,
    pub shift_mean_nm: f64,
    pub shift_std_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftCorpusConfig {
    pub grid: WavelengthGrid,
    pub noise: SpectralNoise,
    pub line_width_nm: f64,
    pub amplitude: f64,
    pub background: f64,
    /// Emission wavelengths before processing are drawn uniformly from this range.
    pub center_range_nm: (f64, f64),
    pub populations: Vec<ShiftPopulation>,
}

/// A before/after spectrum pair with its injected shift.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPair {
    pub qd_id: String,
    pub structure: Structure,
    pub group: String,
    pub before: Spectrum,
    pub after: Spectrum,
    pub true_shift_nm: f64,
}

impl SpectrumPair {
    pub fn record(&self, delta_nm: f64) -> ShiftRecord {
        ShiftRecord {
            qd_id: self.qd_id.clone(),
            structure: self.structure,
            group: self.group.clone(),
            delta_nm,
        }
    }
}

pub fn shift_corpus(cfg: &ShiftCorpusConfig, seed: u64) -> Result<Vec<SpectrumPair>> {
    let mut out = Vec::new();
    let span = cfg.grid.step_nm * (cfg.grid.len as f64 - 1.0);
    let (lo, hi) = cfg.center_range_nm;
    if !(hi > lo) || lo < cfg.grid.start_nm || hi > cfg.grid.start_nm + span {
        return Err(Error::InvalidInput("emission range must lie inside the wavelength grid".into()));
    }
    let mut index = 0u64;
    for (g, pop) in cfg.populations.iter().enumerate() {
        let dist = Normal::new(pop.shift_mean_nm, pop.shift_std_nm)
            .map_err(|e| Error::InvalidInput(format!("shift distribution: {e}")))?;
        for k in 0..pop.count {
            let sub = derive_seed(seed, index);
            index += 1;
            let mut rng = rng_from_seed(sub);
            let c0 = rng.random_range(lo..hi);
            let shift = dist.sample(&mut rng);
            let line = |center_nm| EmissionLine {
                center_nm,
                width_nm: cfg.line_width_nm,
                amplitude: cfg.amplitude,
                background: cfg.background,
                slope: 0.0,
            };
            out.push(SpectrumPair {
                qd_id: format!("qd_{g:02}_{k:04}"),
                structure: pop.structure,
                group: pop.group.clone(),
                before: line_spectrum(&cfg.grid, &line(c0), &cfg.noise, derive_seed(sub, 1))?,
                after: line_spectrum(&cfg.grid, &line(c0 + shift), &cfg.noise, derive_seed(sub, 2))?,
                true_shift_nm: shift,
            });
        }
    }
    Ok(out)
}

/// One exciton line following a quadratic Stark model over a voltage window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauLine {
    pub lambda0_nm: f64,
    pub p_z: f64,
    pub alpha: f64,
    pub voltage_range: (f64, f64),
    pub amplitude: f64,
    pub width_nm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauMapSpec {
    /// Start, end and count of the voltage axis.
    pub voltages: (f64, f64, usize),
    pub grid: WavelengthGrid,
    pub field: FieldConfig,
    pub background: f64,
    pub noise: SpectralNoise,
    pub lines: Vec<PlateauLine>,
}

pub fn plateau_map(spec: &PlateauMapSpec, seed: u64) -> Result<PlateauMap> {
    let (v0, v1, nv) = spec.voltages;
    if nv < 2 || !(v1 > v0) {
        return Err(Error::InvalidInput("voltage axis needs two or more increasing values".into()));
    }
    let voltages: Vec<f64> = (0..nv).map(|i| v0 + (v1 - v0) * i as f64 / (nv - 1) as f64).collect();
    let wl = spec.grid.values();
    let mut rng = rng_from_seed(seed);
    let intensity = voltages
        .iter()
        .map(|&v| {
            let f = field(v, &spec.field);
            let centers: Vec<(f64, &PlateauLine)> = spec
                .lines
                .iter()
                .filter(|l| v >= l.voltage_range.0 && v <= l.voltage_range.1)
                .map(|l| (stark_wavelength_nm(l.lambda0_nm, l.p_z, l.alpha, f), l))
                .collect();
            wl.iter()
                .map(|&x| {
                    let mean = spec.background
                        + centers
                            .iter()
                            .map(|(c, l)| l.amplitude * (-0.5 * ((x - c) / l.width_nm).powi(2)).exp())
                            .sum::<f64>();
                    noisy(mean, &spec.noise, &mut rng)
                })
                .collect()
        })
        .collect();
    PlateauMap::new(voltages, wl, intensity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectra_are_deterministic() {
        let grid = WavelengthGrid {
            start_nm: 930.0,
            step_nm: 0.02,
            len: 300,
        };
        let noise = SpectralNoise {
            shot_noise: true,
            read_noise: 2.0,
        };
        let line = EmissionLine {
            center_nm: 932.0,
            width_nm: 0.05,
            amplitude: 500.0,
            background: 10.0,
            slope: 0.0,
        };
        let a = line_spectrum(&grid, &line, &noise, 3).unwrap();
        let b = line_spectrum(&grid, &line, &noise, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, line_spectrum(&grid, &line, &noise, 4).unwrap());
    }
}
