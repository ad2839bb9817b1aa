//! Silent piano video to piano-roll, MIDI and audio.
//!
//! Three trainable stages are chained: [`video2roll`] classifies which keys are
//! pressed in each video frame, [`roll2midi`] cleans the resulting probability
//! roll with an adversarially trained U-Net, and [`synth`] turns the roll into
//! audio either with an additive synthesizer or through a learned spectrogram
//! model followed by Griffin-Lim.

pub mod config;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod midi;
pub mod nn;
pub mod pipeline;
pub mod roll;
pub mod roll2midi;
pub mod synth;
pub mod synthetic;
pub mod video2roll;

pub use error::{Error, Result};
pub use roll::{NoteEvent, PianoRoll, ProbRoll};
