//! Sub-pixel localization and registration toolkit for deterministic
//! quantum-dot positioning in nanophotonic waveguides.
//!
//! The crate covers the full synthetic pipeline: rendering of marker and
//! emitter images ([`synth`]), preprocessing ([`imgproc`]), cross, emitter and
//! waveguide fits ([`markers`], [`emitters`], [`waveguides`]) built on a
//! bounded Levenberg–Marquardt engine ([`fitcore`]), registration into the
//! marker frame ([`registration`]) and Stark-shift analysis ([`stark`]).
//! [`pipeline`] chains them; [`presets`] holds calibrated corpus settings.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod emitters;
pub mod error;
pub mod fitcore;
pub mod imgproc;
pub mod io;
pub mod markers;
pub mod pipeline;
pub mod presets;
pub mod registration;
pub mod report;
pub mod rng;
pub mod special;
pub mod stark;
pub mod synth;
pub mod workflow;
pub mod waveguides;

pub use error::{Error, Result};
