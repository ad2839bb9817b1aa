//! Centered STFT, least-squares inverse STFT, log spectrograms and
//! Griffin-Lim phase retrieval.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 2048;
pub const HOP: usize = 256;
/// `N_FFT / 2 + 1`.
pub const NUM_BINS: usize = N_FFT / 2 + 1;
pub const DEFAULT_GL_ITERATIONS: usize = 60;

/// Mono audio; samples are nominally within `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>) -> Self {
        AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn silence(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scales to unit peak; silence stays silent.
    pub fn normalize_peak(&mut self) {
        let p = self.peak();
        if p > 0.0 {
            self.samples.iter_mut().for_each(|s| *s /= p);
        }
    }
}

/// `F x T` log1p magnitudes, bins on rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    data: Array2<f32>,
}

impl Spectrogram {
    pub fn from_array(data: Array2<f32>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::domain(format!(
                "spectrogram entry {v} is not a finite value >= 0"
            )));
        }
        Ok(Spectrogram { data })
    }

    pub fn data(&self) -> ndarray::ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn num_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.data.ncols()
    }

    /// First `bins` rows.
    pub fn crop_bins(&self, bins: usize) -> Result<Spectrogram> {
        if bins > self.num_bins() {
            return Err(Error::domain(format!("cannot crop {} bins to {bins}", self.num_bins())));
        }
        Ok(Spectrogram {
            data: self.data.slice(ndarray::s![..bins, ..]).to_owned(),
        })
    }

    /// Zero rows appended up to `bins`.
    pub fn pad_bins(&self, bins: usize) -> Result<Spectrogram> {
        if bins < self.num_bins() {
            return Err(Error::domain(format!("cannot pad {} bins to {bins}", self.num_bins())));
        }
        let mut data = Array2::zeros((bins, self.num_frames()));
        data.slice_mut(ndarray::s![..self.num_bins(), ..]).assign(&self.data);
        Ok(Spectrogram { data })
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Spectrogram {
        Spectrogram {
            data: self.data.slice(ndarray::s![.., start..end]).to_owned(),
        }
    }
}

/// Frames of a centered STFT over `n` samples.
pub fn num_stft_frames(n: usize) -> usize {
    1 + n / HOP
}

/// Periodic Hann window.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (TAU * i as f64 / n as f64).cos()).collect()
}

/// STFT engine with cached FFT plans and window.
pub struct Stft {
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let mut planner = FftPlanner::new();
        Stft {
            window: hann_window(N_FFT),
            forward: planner.plan_fft_forward(N_FFT),
            inverse: planner.plan_fft_inverse(N_FFT),
        }
    }

    /// Centered STFT: the signal is zero-padded by `N_FFT / 2` on both sides
    /// and frame `t` starts at padded sample `t * HOP`. Returns `NUM_BINS x T`.
    pub fn forward(&self, x: &[f64]) -> Array2<Complex64> {
        let frames = num_stft_frames(x.len());
        let half = N_FFT / 2;
        let mut out = Array2::zeros((NUM_BINS, frames));
        let mut buf = vec![Complex64::default(); N_FFT];
        let mut scratch = vec![Complex64::default(); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                let n = (t * HOP + i) as isize - half as isize;
                let s = if n >= 0 && (n as usize) < x.len() {
                    x[n as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(s * self.window[i], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (f, v) in buf[..NUM_BINS].iter().enumerate() {
                out[(f, t)] = *v;
            }
        }
        out
    }

    /// Least-squares signal of length `len` whose STFT is closest to `spec`:
    /// windowed overlap-add divided by the summed squared window.
    pub fn inverse(&self, spec: &Array2<Complex64>, len: usize) -> Vec<f64> {
        let frames = spec.ncols();
        let half = N_FFT / 2;
        let padded_len = (frames.saturating_sub(1)) * HOP + N_FFT;
        let mut acc = vec![0.0; padded_len];
        let mut wss = vec![0.0; padded_len];
        let mut buf = vec![Complex64::default(); N_FFT];
        let mut scratch = vec![Complex64::default(); self.inverse.get_inplace_scratch_len()];
        for t in 0..frames {
            for f in 0..NUM_BINS {
                buf[f] = spec[(f, t)];
            }
            // imaginary parts of the self-conjugate bins are not representable by a real signal
            buf[0].im = 0.0;
            buf[N_FFT / 2].im = 0.0;
            for f in 1..N_FFT / 2 {
                buf[N_FFT - f] = spec[(f, t)].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for (i, v) in buf.iter().enumerate() {
                let w = self.window[i];
                acc[t * HOP + i] += v.re / N_FFT as f64 * w;
                wss[t * HOP + i] += w * w;
            }
        }
        (0..len)
            .map(|n| {
                let p = n + half;
                if p < padded_len && wss[p] > 1e-10 {
                    acc[p] / wss[p]
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn magnitude(&self, x: &[f64]) -> Array2<f64> {
        self.forward(x).mapv(|c| c.norm())
    }
}

/// `log1p(|STFT|)` of the clip.
pub fn log_spectrogram(audio: &AudioClip) -> Result<Spectrogram> {
    if audio.is_empty() {
        return Err(Error::domain("cannot take the spectrogram of empty audio"));
    }
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::domain(format!(
            "expected {SAMPLE_RATE} Hz audio, got {} Hz",
            audio.sample_rate
        )));
    }
    let x: Vec<f64> = audio.samples.iter().map(|&s| f64::from(s)).collect();
    let mag = Stft::new().magnitude(&x);
    Spectrogram::from_array(mag.mapv(|m| m.ln_1p() as f32))
}

/// `‖|STFT(x)| − A‖ / ‖A‖`.
pub fn spectral_convergence(stft: &Stft, x: &[f64], target: &Array2<f64>) -> f64 {
    let mag = stft.magnitude(x);
    let num: f64 = mag.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = target.iter().map(|a| a * a).sum();
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct GriffinLimResult {
    pub audio: AudioClip,
    /// Spectral convergence of each iterate before peak normalization.
    pub convergence: Vec<f64>,
}

/// Starting phase for Griffin-Lim.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum PhaseInit {
    /// Phase-locked vocoder estimate: every spectral peak's frequency is
    /// refined by parabolic interpolation, its phase advances by that
    /// frequency from frame to frame, and the bins around it follow with the
    /// alternating sign of a window centred mid-frame.
    #[default]
    PeakLocked,
    /// Independent uniform phases from a seeded generator.
    Random(u64),
}

/// Griffin-Lim inversion of a full-band log spectrogram.
pub fn griffin_lim(spec: &Spectrogram, iterations: usize) -> Result<AudioClip> {
    Ok(griffin_lim_traced(spec, iterations, PhaseInit::default())?.audio)
}

pub fn griffin_lim_traced(spec: &Spectrogram, iterations: usize, init: PhaseInit) -> Result<GriffinLimResult> {
    if spec.num_bins() != NUM_BINS {
        return Err(Error::domain(format!(
            "griffin-lim needs {NUM_BINS} bins, got {}; pad first",
            spec.num_bins()
        )));
    }
    if iterations == 0 {
        return Err(Error::domain("griffin-lim needs at least one iteration"));
    }
    if spec.num_frames() == 0 {
        return Err(Error::domain("griffin-lim needs at least one frame"));
    }
    let target = spec.data.mapv(|v| f64::from(v).exp_m1());
    Ok(griffin_lim_magnitude(&target, iterations, init))
}

fn peak_locked_phase(target: &Array2<f64>) -> Array2<f64> {
    let (bins, frames) = target.dim();
    let mut phase = Array2::zeros((bins, frames));
    let ln = |v: f64| (v + 1e-12).ln();
    for t in 0..frames {
        let col = target.column(t);
        let peaks: Vec<usize> = (1..bins - 1)
            .filter(|&f| col[f] > col[f - 1] && col[f] >= col[f + 1])
            .collect();
        if peaks.is_empty() {
            continue;
        }
        let mut owner_start = 0;
        for (i, &p) in peaks.iter().enumerate() {
            let (a, b, c) = (ln(col[p - 1]), ln(col[p]), ln(col[p + 1]));
            let den = a - 2.0 * b + c;
            let delta = if den.abs() > 1e-12 {
                (0.5 * (a - c) / den).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            let advance = TAU * (p as f64 + delta) * HOP as f64 / N_FFT as f64;
            let base = if t == 0 { 0.0 } else { phase[(p, t - 1)] + advance };
            let owner_end = peaks.get(i + 1).map_or(bins, |&q| (p + q).div_ceil(2));
            for f in owner_start..owner_end {
                phase[(f, t)] = base + PI * (f as f64 - p as f64);
            }
            owner_start = owner_end;
        }
    }
    phase
}

/// Griffin-Lim on a linear magnitude; output length is `HOP * (T - 1)`.
pub fn griffin_lim_magnitude(target: &Array2<f64>, iterations: usize, init: PhaseInit) -> GriffinLimResult {
    let len = HOP * (target.ncols() - 1);
    if target.iter().all(|&a| a == 0.0) {
        return GriffinLimResult {
            audio: AudioClip::silence(len),
            convergence: vec![0.0; iterations],
        };
    }
    let stft = Stft::new();
    let phase = match init {
        PhaseInit::PeakLocked => peak_locked_phase(target),
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            target.mapv(|_| rng.random_range(-PI..PI))
        }
    };
    let mut spec = Array2::from_shape_fn(target.dim(), |i| Complex64::from_polar(target[i], phase[i]));
    let mut convergence = Vec::with_capacity(iterations);
    let mut x = Vec::new();
    for _ in 0..iterations {
        x = stft.inverse(&spec, len);
        let rebuilt = stft.forward(&x);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((s, r), &a) in spec.iter_mut().zip(&rebuilt).zip(target) {
            let m = r.norm();
            num += (m - a).powi(2);
            den += a * a;
            *s = if m > 0.0 { r * (a / m) } else { Complex64::new(a, 0.0) };
        }
        convergence.push((num / den).sqrt());
    }
    let mut audio = AudioClip::new(x.iter().map(|&v| v as f32).collect());
    audio.normalize_peak();
    GriffinLimResult { audio, convergence }
}
