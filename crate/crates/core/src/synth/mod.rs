//! Ground-truth generators: marker, emitter and waveguide images, emission
//! spectra and voltage–wavelength maps.

mod corpus;
mod render;
mod scene;
mod spectra;

pub use corpus::{
    device_scenes, emit_corpus, square_scenes, CorpusConfig, CorpusManifest, DeviceRecord, DeviceScenes,
    DeviceTemplate, SampleKind, SquareRecord, SquareScenes, SquareTemplate, TruthRow, DEVICE_HEADER,
    TRUTH_HEADER,
};
pub use render::{airy_psf, expected_counts, render};
pub use scene::{
    CrossSpec, EmitterSpec, Frame, ImagingMode, LabelSpec, LineSpec, Orientation, PsfKind, Scene,
    WaveguideSpec, LABEL_COLS, LABEL_ROWS,
};
pub use spectra::{
    line_spectrum, plateau_map, shift_corpus, EmissionLine, PlateauLine, PlateauMapSpec, ShiftCorpusConfig,
    ShiftPopulation, SpectralNoise, SpectrumPair, WavelengthGrid,
};
