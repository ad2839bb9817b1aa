//! Piano-roll and note-event data model.
//!
//! A [`PianoRoll`] is a binary key-by-frame matrix: entry `(k, t)` is 1 when key
//! `k` (MIDI pitch `key_base + k`) sounds during frame `t`. A [`ProbRoll`] has the
//! same layout but holds per-key press probabilities. Frame offsets of
//! [`NoteEvent`]s are exclusive throughout.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// MIDI pitch of row 0 (A0).
pub const KEY_BASE: u8 = 21;
/// Highest representable MIDI pitch (C8).
pub const KEY_TOP: u8 = 108;
/// Number of piano keys, A0..=C8.
pub const NUM_KEYS: usize = 88;
/// Frame rate shared by video, rolls and MIDI frame indices.
pub const FPS: f64 = 25.0;
/// Velocity assigned to every emitted note.
pub const DEFAULT_VELOCITY: u8 = 100;

/// One key press.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_frame: u32,
    /// Exclusive.
    pub offset_frame: u32,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset_frame: u32, offset_frame: u32, velocity: u8) -> Result<Self> {
        let ev = NoteEvent {
            pitch,
            onset_frame,
            offset_frame,
            velocity,
        };
        ev.validate()?;
        Ok(ev)
    }

    pub fn validate(&self) -> Result<()> {
        if !(KEY_BASE..=KEY_TOP).contains(&self.pitch) {
            return Err(Error::domain(format!(
                "pitch {} outside piano range {KEY_BASE}..={KEY_TOP}",
                self.pitch
            )));
        }
        if self.onset_frame >= self.offset_frame {
            return Err(Error::domain(format!(
                "onset {} not before offset {}",
                self.onset_frame, self.offset_frame
            )));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(Error::domain(format!("velocity {} outside 1..=127", self.velocity)));
        }
        Ok(())
    }

    pub fn duration_frames(&self) -> u32 {
        self.offset_frame - self.onset_frame
    }
}

/// Binary key-by-frame matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRoll {
    data: Array2<u8>,
    fps: f64,
    key_base: u8,
}

impl PianoRoll {
    pub fn zeros(num_keys: usize, num_frames: usize) -> Self {
        PianoRoll {
            data: Array2::zeros((num_keys, num_frames)),
            fps: FPS,
            key_base: KEY_BASE,
        }
    }

    /// Wraps a matrix at 25 fps; rejects entries other than 0 and 1.
    pub fn from_array(data: Array2<u8>) -> Result<Self> {
        Self::with_rate(data, FPS)
    }

    pub fn with_rate(data: Array2<u8>, fps: f64) -> Result<Self> {
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::domain(format!("piano roll entry {v} is not binary")));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::domain(format!("frame rate {fps} must be positive")));
        }
        Ok(PianoRoll {
            data,
            fps,
            key_base: KEY_BASE,
        })
    }

    pub fn data(&self) -> ArrayView2<'_, u8> {
        self.data.view()
    }

    pub fn num_keys(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn key_base(&self) -> u8 {
        self.key_base
    }

    pub fn is_active(&self, key: usize, frame: usize) -> bool {
        self.data[(key, frame)] == 1
    }

    pub fn set(&mut self, key: usize, frame: usize, active: bool) {
        self.data[(key, frame)] = u8::from(active);
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_silent(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Frames `start..end` as a new roll.
    pub fn slice_frames(&self, start: usize, end: usize) -> PianoRoll {
        let end = end.min(self.num_frames());
        let start = start.min(end);
        PianoRoll {
            data: self.data.slice(s![.., start..end]).to_owned(),
            fps: self.fps,
            key_base: self.key_base,
        }
    }

    /// Extends with silent frames up to `frames`; never shortens.
    pub fn pad_frames(&self, frames: usize) -> PianoRoll {
        let mut data = Array2::zeros((self.num_keys(), frames.max(self.num_frames())));
        data.slice_mut(s![.., ..self.num_frames()]).assign(&self.data);
        PianoRoll {
            data,
            fps: self.fps,
            key_base: self.key_base,
        }
    }

    /// Values as a 0.0/1.0 probability roll.
    pub fn to_prob(&self) -> ProbRoll {
        ProbRoll {
            data: self.data.mapv(f32::from),
            fps: self.fps,
        }
    }
}

/// Key-by-frame matrix of press probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbRoll {
    data: Array2<f32>,
    fps: f64,
}

impl ProbRoll {
    pub fn zeros(num_keys: usize, num_frames: usize) -> Self {
        ProbRoll {
            data: Array2::zeros((num_keys, num_frames)),
            fps: FPS,
        }
    }

    pub fn from_array(data: Array2<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbRoll { data, fps: FPS })
    }

    pub fn data(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn num_keys(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> ProbRoll {
        let end = end.min(self.num_frames());
        let start = start.min(end);
        ProbRoll {
            data: self.data.slice(s![.., start..end]).to_owned(),
            fps: self.fps,
        }
    }
}

/// Builds the binary roll covered by `events` with the default 88 keys.
///
/// Overlapping or adjacent presses of the same pitch merge into one run.
pub fn roll_from_events(events: &[NoteEvent], num_frames: usize) -> Result<PianoRoll> {
    let mut roll = PianoRoll::zeros(NUM_KEYS, num_frames);
    for ev in events {
        ev.validate()?;
        if ev.offset_frame as usize > num_frames {
            return Err(Error::range(format!(
                "event offset {} beyond roll length {num_frames}",
                ev.offset_frame
            )));
        }
        let key = usize::from(ev.pitch - KEY_BASE);
        roll.data
            .slice_mut(s![key, ev.onset_frame as usize..ev.offset_frame as usize])
            .fill(1);
    }
    Ok(roll)
}

/// Splits every row into maximal runs of ones, one event per run, sorted by
/// `(onset, pitch)`.
pub fn events_from_roll(roll: &PianoRoll, velocity: u8) -> Vec<NoteEvent> {
    let mut events = Vec::new();
    for (key, row) in roll.data.axis_iter(Axis(0)).enumerate() {
        let pitch = roll.key_base + key as u8;
        let mut start = None;
        for (t, &v) in row.iter().enumerate() {
            match (v, start) {
                (1, None) => start = Some(t),
                (0, Some(on)) => {
                    events.push(run_event(pitch, on, t, velocity));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(on) = start {
            events.push(run_event(pitch, on, row.len(), velocity));
        }
    }
    events.sort_by_key(|e| (e.onset_frame, e.pitch));
    events
}

fn run_event(pitch: u8, onset: usize, offset: usize, velocity: u8) -> NoteEvent {
    NoteEvent {
        pitch,
        onset_frame: onset as u32,
        offset_frame: offset as u32,
        velocity,
    }
}

/// Entry is 1 iff probability ≥ `threshold`.
pub fn binarize(roll: &ProbRoll, threshold: f64) -> Result<PianoRoll> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::domain(format!("threshold {threshold} outside (0, 1)")));
    }
    let ts = threshold as f32;
    Ok(PianoRoll {
        data: roll.data.mapv(|p| u8::from(p >= ts)),
        fps: roll.fps,
        key_base: KEY_BASE,
    })
}

/// Resamples in time by max-pooling every source frame that overlaps an output frame.
pub fn resample_roll(roll: &PianoRoll, src_fps: f64, dst_fps: f64) -> Result<PianoRoll> {
    if !(src_fps > 0.0 && dst_fps > 0.0 && src_fps.is_finite() && dst_fps.is_finite()) {
        return Err(Error::domain(format!(
            "frame rates must be positive, got {src_fps} -> {dst_fps}"
        )));
    }
    let t_src = roll.num_frames();
    let ratio = src_fps / dst_fps;
    let t_dst = ((t_src as f64) / ratio - 1e-9).ceil().max(0.0) as usize;
    let mut out = Array2::zeros((roll.num_keys(), t_dst));
    const EPS: f64 = 1e-9;
    for f in 0..t_dst {
        let lo = ((f as f64) * ratio + EPS).floor() as usize;
        let hi = ((((f + 1) as f64) * ratio - EPS).ceil() as usize).clamp(lo + 1, t_src);
        if lo >= t_src {
            continue;
        }
        for key in 0..roll.num_keys() {
            if roll.data.slice(s![key, lo..hi]).iter().any(|&v| v == 1) {
                out[(key, f)] = 1;
            }
        }
    }
    Ok(PianoRoll {
        data: out,
        fps: dst_fps,
        key_base: roll.key_base,
    })
}

/// Result of [`trim_leading_silence`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrimmedRoll {
    pub roll: PianoRoll,
    /// Number of leading frames removed.
    pub offset: usize,
    /// Set when the input contained no pressed key at all; the roll is then empty.
    pub all_silent: bool,
}

/// Drops the all-zero columns before the first pressed key; interior silence is kept.
pub fn trim_leading_silence(roll: &PianoRoll) -> TrimmedRoll {
    let first = (0..roll.num_frames()).find(|&t| roll.data.column(t).iter().any(|&v| v == 1));
    match first {
        Some(offset) => TrimmedRoll {
            roll: roll.slice_frames(offset, roll.num_frames()),
            offset,
            all_silent: false,
        },
        None => {
            tracing::warn!(frames = roll.num_frames(), "roll contains no pressed key");
            TrimmedRoll {
                roll: roll.slice_frames(0, 0),
                offset: roll.num_frames(),
                all_silent: true,
            }
        }
    }
}
