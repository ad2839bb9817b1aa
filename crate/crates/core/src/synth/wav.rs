//! 16-bit PCM mono WAV output and tolerant WAV input.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::dsp::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Writes 16-bit PCM mono; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * f32::from(i16::MAX)).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads integer or float WAV at 16 kHz, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut r = WavReader::open(path)?;
    let spec = r.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::domain(format!(
            "{} is {} Hz, expected {SAMPLE_RATE} Hz",
            path.display(),
            spec.sample_rate
        )));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => r.samples::<f32>().collect::<std::result::Result<_, _>>()?,
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    let ch = usize::from(spec.channels.max(1));
    let samples = interleaved
        .chunks(ch)
        .map(|c| c.iter().sum::<f32>() / ch as f32)
        .collect();
    Ok(AudioClip::new(samples))
}
