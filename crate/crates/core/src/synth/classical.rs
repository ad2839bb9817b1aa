//! Additive note synthesizer and an adapter for an external SoundFont renderer.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::dsp::{AudioClip, SAMPLE_RATE};
use super::wav::read_wav;
use crate::error::{Error, Result};
use crate::midi::{write_midi_file, MidiDocument};
use crate::roll::{NoteEvent, FPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassicalParams {
    /// Harmonics per note including the fundamental; partial `k` has amplitude `1/k`.
    pub harmonics: usize,
    pub attack_secs: f64,
    /// Time constant of the exponential fall from peak toward the sustain level.
    pub decay_secs: f64,
    pub sustain_level: f64,
    /// Time constant of the exponential fade after note-off; the tail lasts five of these.
    pub release_secs: f64,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        ClassicalParams {
            harmonics: 4,
            attack_secs: 0.01,
            decay_secs: 0.4,
            sustain_level: 0.35,
            release_secs: 0.04,
        }
    }
}

impl ClassicalParams {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.harmonics == 0 {
            return Err(Error::config(format!("{field}.harmonics"), "must be positive"));
        }
        for (name, v) in [
            ("attack_secs", self.attack_secs),
            ("decay_secs", self.decay_secs),
            ("release_secs", self.release_secs),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{field}.{name}"), "must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&self.sustain_level) {
            return Err(Error::config(format!("{field}.sustain_level"), "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Envelope `secs` after onset of a note held for `held` seconds.
    fn envelope(&self, secs: f64, held: f64) -> f64 {
        let ads = |t: f64| {
            if t < self.attack_secs {
                t / self.attack_secs
            } else {
                let d = (t - self.attack_secs) / self.decay_secs;
                self.sustain_level + (1.0 - self.sustain_level) * (-d).exp()
            }
        };
        if secs < held {
            ads(secs)
        } else {
            ads(held) * (-(secs - held) / self.release_secs).exp()
        }
    }
}

/// Equal-temperament frequency of a MIDI pitch.
pub fn pitch_frequency(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

/// Samples spanned by `frames` roll frames.
pub fn frames_to_samples(frames: usize) -> usize {
    frames * SAMPLE_RATE as usize / FPS as usize
}

/// Sum of enveloped harmonic notes over `duration_frames`, peak-normalized.
/// Partials at or above Nyquist are dropped; release tails are cut at the clip end.
pub fn classical_synth(events: &[NoteEvent], duration_frames: usize, params: &ClassicalParams) -> Result<AudioClip> {
    params.validate("classical")?;
    let len = frames_to_samples(duration_frames);
    let mut out = vec![0.0f64; len];
    let sr = f64::from(SAMPLE_RATE);
    for e in events {
        e.validate()?;
        let start = frames_to_samples(e.onset_frame as usize);
        if start >= len {
            continue;
        }
        let held = f64::from(e.duration_frames()) / FPS;
        let tail = (held + 5.0 * params.release_secs) * sr;
        let end = (start + tail.ceil() as usize).min(len);
        let f0 = pitch_frequency(e.pitch);
        let amp = f64::from(e.velocity) / 127.0;
        let partials: Vec<(f64, f64)> = (1..=params.harmonics)
            .map(|k| (f0 * k as f64, 1.0 / k as f64))
            .take_while(|&(f, _)| f < sr / 2.0)
            .collect();
        for (i, o) in out[start..end].iter_mut().enumerate() {
            let secs = i as f64 / sr;
            let tone: f64 = partials.iter().map(|&(f, a)| a * (TAU * f * secs).sin()).sum();
            *o += amp * params.envelope(secs, held) * tone;
        }
    }
    let mut clip = AudioClip::new(out.iter().map(|&v| v as f32).collect());
    clip.normalize_peak();
    Ok(clip)
}

/// Renders through an external SoundFont synthesizer (fluidsynth command-line conventions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalSynth {
    pub program: PathBuf,
    pub soundfont: PathBuf,
}

static SCRATCH_COUNTER: AtomicUsize = AtomicUsize::new(0);

impl ExternalSynth {
    pub fn render(&self, doc: &MidiDocument) -> Result<AudioClip> {
        let id = SCRATCH_COUNTER.fetch_add(1, Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("pianovis-synth-{}-{id}", std::process::id()));
        std::fs::create_dir_all(&dir)?;
        let result = self.render_in(doc, &dir);
        let _ = std::fs::remove_dir_all(&dir);
        result
    }

    fn render_in(&self, doc: &MidiDocument, dir: &std::path::Path) -> Result<AudioClip> {
        let midi_path = dir.join("in.mid");
        let wav_path = dir.join("out.wav");
        std::fs::write(&midi_path, write_midi_file(doc)?)?;
        let output = Command::new(&self.program)
            .arg("-ni")
            .arg("-g")
            .arg("1.0")
            .arg("-r")
            .arg(SAMPLE_RATE.to_string())
            .arg("-F")
            .arg(&wav_path)
            .arg(&self.soundfont)
            .arg(&midi_path)
            .output()
            .map_err(|e| Error::External(format!("cannot run {}: {e}", self.program.display())))?;
        if !output.status.success() {
            return Err(Error::External(format!(
                "{} exited with {}: {}",
                self.program.display(),
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let mut clip = read_wav(&wav_path)?;
        clip.normalize_peak();
        Ok(clip)
    }
}
