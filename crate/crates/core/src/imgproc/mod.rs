//! Image container, PGM I/O and the two preprocessing corrections applied to
//! marker images: rotation alignment and envelope subtraction.

mod background;
mod image;
mod pgm;
mod rotation;

pub use background::{inverted_residual, render_background, subtract_background, BackgroundModel};
pub use image::{Image, ImageMeta, Roi, DEFAULT_PIXEL_PITCH_NM};
pub use pgm::{decode_pgm, encode_pgm, load_image, save_image};
pub use rotation::{estimate_rotation, estimate_rotation_with, rotate, RotationEstimate, RotationSearch};

pub(crate) use image::{median, median_mad};
