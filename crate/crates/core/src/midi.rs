//! Standard MIDI File reading (formats 0 and 1) and writing (format 0).
//!
//! Note times are exchanged as frame indices at 25 fps. Tick/frame conversion
//! uses integer rational arithmetic, so any file produced by
//! [`write_midi_file`] reads back to the identical event list.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::{events_from_roll, roll_from_events, NoteEvent, PianoRoll, DEFAULT_VELOCITY, KEY_BASE, KEY_TOP};

pub const WRITE_TICKS_PER_QUARTER: u16 = 480;
pub const DEFAULT_TEMPO_BPM: f64 = 80.0;
/// Tempo assumed by readers when a file carries no tempo meta-event.
pub const SMF_DEFAULT_TEMPO_BPM: f64 = 120.0;

const US_PER_FRAME: u128 = 40_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidiDocument {
    pub events: Vec<NoteEvent>,
    pub tempo_bpm: f64,
    /// Zero when the file used SMPTE time division.
    pub ticks_per_quarter: u16,
    /// Nominal length in frames: the end-of-track time, never less than the last offset.
    pub length_frames: u32,
}

impl MidiDocument {
    /// Document at tempo 80 and 480 ticks per quarter.
    pub fn new(events: Vec<NoteEvent>) -> Self {
        let length_frames = events.iter().map(|e| e.offset_frame).max().unwrap_or(0);
        MidiDocument {
            events,
            tempo_bpm: DEFAULT_TEMPO_BPM,
            ticks_per_quarter: WRITE_TICKS_PER_QUARTER,
            length_frames,
        }
    }

    /// One event per run of the roll, all at velocity 100.
    pub fn from_roll(roll: &PianoRoll) -> Self {
        let mut doc = Self::new(events_from_roll(roll, DEFAULT_VELOCITY));
        doc.length_frames = roll.num_frames() as u32;
        doc
    }

    /// Binary roll spanning the nominal length.
    pub fn to_roll(&self) -> Result<PianoRoll> {
        let frames = self
            .events
            .iter()
            .map(|e| e.offset_frame)
            .max()
            .unwrap_or(0)
            .max(self.length_frames);
        roll_from_events(&self.events, frames as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tempo_bpm > 0.0 && self.tempo_bpm.is_finite()) {
            return Err(Error::domain(format!("tempo {} must be positive", self.tempo_bpm)));
        }
        self.events.iter().try_for_each(NoteEvent::validate)
    }
}

/// A parsed file plus any non-fatal problems found while reading it.
#[derive(Clone, Debug, PartialEq)]
pub struct MidiRead {
    pub document: MidiDocument,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
enum Division {
    Metrical(u16),
    /// Ticks per second as the rational `num / den`.
    Smpte {
        num: u128,
        den: u128,
    },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::parse(
                self.pos,
                format!("need {n} bytes, {} left", self.remaining()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Result<u8> {
        self.bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::parse(self.pos, "unexpected end of data"))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::parse(start, "variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Default)]
struct TrackData {
    notes: Vec<RawNote>,
    tempos: Vec<(u64, u32)>,
    end_tick: u64,
}

struct RawNote {
    on: u64,
    off: u64,
    pitch: u8,
    velocity: u8,
}

pub fn read_midi_file(bytes: &[u8]) -> Result<MidiRead> {
    let mut cur = Cursor::new(bytes);
    let mut warnings = Vec::new();

    let magic_at = cur.pos;
    if cur.take(4)? != b"MThd" {
        return Err(Error::parse(magic_at, "missing MThd header"));
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(Error::parse(cur.pos, format!("header length {header_len} < 6")));
    }
    let header_at = cur.pos;
    let header = cur.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let ntracks = u16::from_be_bytes([header[2], header[3]]);
    let raw_div = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(Error::parse(header_at, format!("unsupported SMF format {format}")));
    }
    let division = if raw_div & 0x8000 == 0 {
        if raw_div == 0 {
            return Err(Error::parse(header_at + 4, "zero ticks per quarter"));
        }
        Division::Metrical(raw_div)
    } else {
        let fps = 256 - u32::from(raw_div >> 8);
        let tpf = u128::from(raw_div & 0xff);
        let (num, den) = match fps {
            24 | 25 | 30 => (u128::from(fps) * tpf, 1),
            29 => (2997 * tpf, 100),
            _ => return Err(Error::parse(header_at + 4, format!("invalid SMPTE rate {fps}"))),
        };
        if tpf == 0 {
            return Err(Error::parse(header_at + 4, "zero ticks per SMPTE frame"));
        }
        Division::Smpte { num, den }
    };

    let mut tracks = Vec::with_capacity(usize::from(ntracks));
    for _ in 0..ntracks {
        let at = cur.pos;
        let id = cur.take(4)?;
        let len = cur.u32()? as usize;
        let body = cur.take(len)?;
        if id != b"MTrk" {
            // Unknown chunks must be skipped per SMF.
            warnings.push(format!("skipped unknown chunk at byte {at}"));
            continue;
        }
        tracks.push(parse_track(body, cur.pos - len, &mut warnings)?);
    }

    let mut tempos: Vec<(u64, u32)> = tracks.iter().flat_map(|t| t.tempos.iter().copied()).collect();
    tempos.sort_by_key(|&(tick, _)| tick);
    let timing = TickClock::new(division, &tempos);

    let mut events = Vec::new();
    let mut length_frames = 0u32;
    for track in &tracks {
        length_frames = length_frames.max(timing.frame(track.end_tick));
        for n in &track.notes {
            if !(KEY_BASE..=KEY_TOP).contains(&n.pitch) {
                warnings.push(format!("dropped note with pitch {} outside the piano range", n.pitch));
                continue;
            }
            let onset = timing.frame(n.on);
            let offset = timing.frame(n.off).max(onset + 1);
            events.push(NoteEvent::new(n.pitch, onset, offset, n.velocity.max(1))?);
            length_frames = length_frames.max(offset);
        }
    }
    events.sort_by_key(|e| (e.onset_frame, e.pitch, e.offset_frame));

    for w in &warnings {
        tracing::warn!("{w}");
    }
    let tempo_bpm = tempos
        .first()
        .map(|&(_, us)| 60_000_000.0 / f64::from(us))
        .unwrap_or(SMF_DEFAULT_TEMPO_BPM);
    Ok(MidiRead {
        document: MidiDocument {
            events,
            tempo_bpm,
            ticks_per_quarter: match division {
                Division::Metrical(t) => t,
                Division::Smpte { .. } => 0,
            },
            length_frames,
        },
        warnings,
    })
}

fn parse_track(body: &[u8], base: usize, warnings: &mut Vec<String>) -> Result<TrackData> {
    let mut cur = Cursor::new(body);
    let rebase = |e: Error| match e {
        Error::Parse { offset, message } => Error::parse(base + offset, message),
        other => other,
    };
    let mut data = TrackData::default();
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut ended = false;

    while cur.remaining() > 0 {
        tick += u64::from(cur.vlq().map_err(rebase)?);
        let at = cur.pos;
        let first = cur.peek().map_err(rebase)?;
        let status = if first & 0x80 != 0 {
            cur.pos += 1;
            first
        } else {
            running.ok_or_else(|| Error::parse(base + at, "data byte without running status"))?
        };
        match status {
            0xff => {
                let kind = cur.u8().map_err(rebase)?;
                let len = cur.vlq().map_err(rebase)? as usize;
                let payload = cur.take(len).map_err(rebase)?;
                match kind {
                    0x2f => {
                        ended = true;
                        break;
                    }
                    0x51 => {
                        if len != 3 {
                            return Err(Error::parse(base + at, "tempo meta-event length != 3"));
                        }
                        let us = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if us == 0 {
                            return Err(Error::parse(base + at, "zero tempo"));
                        }
                        data.tempos.push((tick, us));
                    }
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = cur.vlq().map_err(rebase)? as usize;
                cur.take(len).map_err(rebase)?;
                running = None;
            }
            0xf1..=0xfe => {
                return Err(Error::parse(
                    base + at,
                    format!("unexpected system message {status:#04x}"),
                ));
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                let kind = status >> 4;
                let len = if matches!(kind, 0xc | 0xd) { 1 } else { 2 };
                let msg = cur.take(len).map_err(rebase)?;
                if msg.iter().any(|b| b & 0x80 != 0) {
                    return Err(Error::parse(base + at, "status byte inside channel message"));
                }
                match (kind, msg) {
                    (0x9, &[pitch, vel]) if vel > 0 => {
                        open.entry((channel, pitch)).or_default().push_back((tick, vel));
                    }
                    (0x8, &[pitch, _]) | (0x9, &[pitch, _]) => {
                        match open.get_mut(&(channel, pitch)).and_then(VecDeque::pop_front) {
                            Some((on, velocity)) => data.notes.push(RawNote {
                                on,
                                off: tick,
                                pitch,
                                velocity,
                            }),
                            None => warnings.push(format!(
                                "note-off for pitch {pitch} at tick {tick} without matching note-on"
                            )),
                        }
                    }
                    _ => {}
                }
            }
        }
    }
    if !ended {
        warnings.push(format!("track at byte {base} has no end-of-track event"));
    }
    data.end_tick = tick;
    let mut dangling: Vec<_> = open
        .into_iter()
        .flat_map(|((_, pitch), q)| q.into_iter().map(move |(on, velocity)| (on, pitch, velocity)))
        .collect();
    dangling.sort_unstable();
    for (on, pitch, velocity) in dangling {
        warnings.push(format!(
            "note-on for pitch {pitch} at tick {on} never released; closed at track end"
        ));
        data.notes.push(RawNote {
            on,
            off: tick,
            pitch,
            velocity,
        });
    }
    Ok(data)
}

/// Converts absolute ticks to 25 fps frame indices through a tempo map.
struct TickClock {
    division: Division,
    /// `(tick, microseconds-per-quarter numerator at that tick, tempo)`.
    segments: Vec<(u64, u128, u32)>,
}

impl TickClock {
    fn new(division: Division, tempos: &[(u64, u32)]) -> Self {
        let mut segments = vec![(0u64, 0u128, 500_000u32)];
        for &(tick, us) in tempos {
            let &(t0, acc, tempo) = segments.last().unwrap();
            let acc = acc + u128::from(tick - t0) * u128::from(tempo);
            if tick == t0 {
                segments.last_mut().unwrap().2 = us;
            } else {
                segments.push((tick, acc, us));
            }
        }
        TickClock { division, segments }
    }

    fn frame(&self, tick: u64) -> u32 {
        let (num, den) = match self.division {
            Division::Metrical(tpq) => {
                let idx = self.segments.partition_point(|&(t, _, _)| t <= tick) - 1;
                let (t0, acc, tempo) = self.segments[idx];
                // elapsed microseconds = num_us / tpq
                let num_us = acc + u128::from(tick - t0) * u128::from(tempo);
                (num_us, u128::from(tpq) * US_PER_FRAME)
            }
            // frames = tick * 25 / (num / den)
            Division::Smpte { num, den } => (u128::from(tick) * 25 * den, num),
        };
        u32::try_from((2 * num + den) / (2 * den)).unwrap_or(u32::MAX)
    }
}

/// Serializes as a single-track format-0 file at 480 ticks per quarter.
pub fn write_midi_file(doc: &MidiDocument) -> Result<Vec<u8>> {
    doc.validate()?;
    let us_per_quarter = (60_000_000.0 / doc.tempo_bpm).round();
    if !(1.0..=f64::from(0x00ff_ffff)).contains(&us_per_quarter) {
        return Err(Error::domain(format!("tempo {} bpm not encodable", doc.tempo_bpm)));
    }
    let us_per_quarter = us_per_quarter as u128;
    let tpq = u128::from(WRITE_TICKS_PER_QUARTER);
    if tpq * US_PER_FRAME < us_per_quarter {
        return Err(Error::domain(format!(
            "tempo {} bpm leaves less than one tick per frame",
            doc.tempo_bpm
        )));
    }
    let to_tick = |frame: u32| -> u64 {
        ((2 * u128::from(frame) * tpq * US_PER_FRAME + us_per_quarter) / (2 * us_per_quarter)) as u64
    };

    // (tick, 0 = off / 1 = on, pitch, velocity): releases sort before presses at the same tick.
    let mut messages: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(2 * doc.events.len());
    for ev in &doc.events {
        messages.push((to_tick(ev.onset_frame), 1, ev.pitch, ev.velocity));
        messages.push((to_tick(ev.offset_frame), 0, ev.pitch, 0));
    }
    messages.sort_unstable();

    let mut track = Vec::new();
    track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03]);
    track.extend_from_slice(&(us_per_quarter as u32).to_be_bytes()[1..]);
    let mut last = 0u64;
    for &(tick, on, pitch, velocity) in &messages {
        push_vlq(&mut track, tick - last);
        last = tick;
        if on == 1 {
            track.extend_from_slice(&[0x90, pitch, velocity]);
        } else {
            track.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    let end = to_tick(doc.length_frames).max(last);
    push_vlq(&mut track, end - last);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

fn push_vlq(out: &mut Vec<u8>, value: u64) {
    let value = value.min(0x0fff_ffff) as u32;
    let mut buf = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}
