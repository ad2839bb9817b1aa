//! Learned midi-to-spectrogram path: a 1-D convolutional encoder-decoder
//! (PerfNet) maps 2 s roll windows to log spectrogram windows, and a residual
//! U-Net refiner cleans them before Griffin-Lim inversion.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classical::{classical_synth, ClassicalParams};
use super::dsp::{
    griffin_lim, log_spectrogram, AudioClip, Spectrogram, DEFAULT_GL_ITERATIONS, HOP, NUM_BINS, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::nn::layers::{l1, leaky_relu, mse, softplus, Conv1d};
use crate::nn::{check_finite, load_checkpoint, save_checkpoint, scalar, tensor_from_f32, to_f32_vec};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore, UNet, UNetConfig};
use crate::roll::{events_from_roll, PianoRoll, ProbRoll, DEFAULT_VELOCITY, NUM_KEYS};
use crate::video2roll::TrainSchedule;

pub const CHECKPOINT_KIND: &str = "synth";
/// Roll frames per synthesis window (2 s).
pub const MIDI_WINDOW: usize = 50;
/// Spectrogram columns per synthesis window.
pub const SPEC_WINDOW: usize = 126;
/// Hops per window; consecutive windows share one boundary column.
pub const SPEC_STRIDE: usize = 125;
/// Bins modelled by the networks; higher bins are zero-filled before inversion.
pub const TRAIN_BINS: usize = 576;

/// Source frame of upsampled column `f_out`.
pub fn upsample_index(f_out: usize) -> usize {
    f_out * MIDI_WINDOW / SPEC_WINDOW
}

/// Nearest-neighbour stretch of an `88 x 50` window to `88 x 126`.
pub fn upsample_midi_window(window: &PianoRoll) -> Result<PianoRoll> {
    if window.num_frames() != MIDI_WINDOW {
        return Err(Error::domain(format!(
            "synthesis window must be {MIDI_WINDOW} frames, got {}",
            window.num_frames()
        )));
    }
    let src = window.data();
    let data = Array2::from_shape_fn((window.num_keys(), SPEC_WINDOW), |(k, f)| src[(k, upsample_index(f))]);
    PianoRoll::with_rate(data, f64::from(SAMPLE_RATE) / HOP as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfNetConfig {
    pub channels: usize,
    pub bottleneck_channels: usize,
    pub kernel: usize,
}

impl Default for PerfNetConfig {
    fn default() -> Self {
        PerfNetConfig {
            channels: 64,
            bottleneck_channels: 128,
            kernel: 5,
        }
    }
}

impl PerfNetConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::config(format!("{field}.channels"), "must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{field}.kernel"), "must be odd"));
        }
        Ok(())
    }
}

/// Encoder-decoder over time with keys as channels. One strided stage halves
/// time; the decoder sees the upsampled bottleneck next to the encoder
/// features, and the output layer sees the decoder output next to the raw roll.
pub struct PerfNet {
    encode: Conv1d,
    down: Conv1d,
    middle: Conv1d,
    decode: Conv1d,
    head: Conv1d,
}

impl PerfNet {
    pub fn new(store: &mut ParamStore, cfg: &PerfNetConfig, keys: usize, bins: usize) -> Result<Self> {
        cfg.validate("perfnet")?;
        let (c, b, k) = (cfg.channels, cfg.bottleneck_channels, cfg.kernel);
        Ok(PerfNet {
            encode: Conv1d::new(store, "encode", keys, c, k, 1, k / 2)?,
            down: Conv1d::new(store, "down", c, b, 4, 2, 1)?,
            middle: Conv1d::new(store, "middle", b, b, 3, 1, 1)?,
            decode: Conv1d::new(store, "decode", b + c, c, 3, 1, 1)?,
            head: Conv1d::new(store, "head", c + keys, bins, 3, 1, 1)?,
        })
    }

    /// `(B, keys, W)` rolls with even `W` to non-negative `(B, bins, W)` log magnitudes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = x.dim(2)?;
        if w % 2 != 0 {
            return Err(Error::domain(format!("perfnet needs an even window length, got {w}")));
        }
        let h1 = leaky_relu(&self.encode.forward(x)?)?;
        let h2 = leaky_relu(&self.down.forward(&h1)?)?;
        let h3 = leaky_relu(&self.middle.forward(&h2)?)?;
        let up = h3.upsample_nearest1d(w)?;
        let d = leaky_relu(&self.decode.forward(&Tensor::cat(&[&up, &h1], 1)?)?)?;
        softplus(&self.head.forward(&Tensor::cat(&[&d, x], 1)?)?)
    }
}

/// `relu(S + scale * U(S))`; `scale` starts at zero so the untrained refiner is the identity.
pub struct Refiner {
    unet: UNet,
    scale: Tensor,
}

impl Refiner {
    pub fn new(store: &mut ParamStore, cfg: &UNetConfig) -> Result<Self> {
        Ok(Refiner {
            unet: UNet::new(store, "unet", cfg)?,
            scale: store.constant("scale", &[1], 0.0)?,
        })
    }

    /// `(B, 1, F, W)` to the same shape.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        let u = self.unet.forward(s)?.broadcast_mul(&self.scale)?;
        Ok((s + u)?.relu()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_keys: usize,
    pub bins: usize,
    pub perfnet: PerfNetConfig,
    pub refiner: UNetConfig,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub griffin_lim_iterations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_keys: NUM_KEYS,
            bins: TRAIN_BINS,
            perfnet: PerfNetConfig::default(),
            refiner: UNetConfig {
                base_channels: 4,
                max_channels: 32,
                convs_per_level: 1,
                ..UNetConfig::default()
            },
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            griffin_lim_iterations: DEFAULT_GL_ITERATIONS,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        self.perfnet.validate(&format!("{field}.perfnet"))?;
        self.refiner.validate(&format!("{field}.refiner"))?;
        if self.refiner.in_channels != 1 || self.refiner.out_channels != 1 {
            return Err(Error::config(
                format!("{field}.refiner"),
                "must map one channel to one channel",
            ));
        }
        if self.bins == 0 || self.bins > NUM_BINS {
            return Err(Error::config(
                format!("{field}.bins"),
                format!("must lie in 1..={NUM_BINS}"),
            ));
        }
        if self.num_keys == 0 {
            return Err(Error::config(format!("{field}.num_keys"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
        }
        if self.griffin_lim_iterations == 0 {
            return Err(Error::config(
                format!("{field}.griffin_lim_iterations"),
                "must be positive",
            ));
        }
        self.optimizer.validate(&format!("{field}.optimizer"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    #[default]
    Classical,
    Deep,
}

pub struct SynthModels {
    config: SynthConfig,
    perf_store: ParamStore,
    perfnet: PerfNet,
    refiner_store: ParamStore,
    refiner: Refiner,
}

impl SynthModels {
    pub fn new(config: &SynthConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, DType::F32, seed)
    }

    pub fn with_dtype(config: &SynthConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate("synth")?;
        let mut perf_store = ParamStore::new(dtype, seed);
        let perfnet = PerfNet::new(&mut perf_store, &config.perfnet, config.num_keys, config.bins)?;
        let mut refiner_store = ParamStore::new(dtype, seed.wrapping_add(1));
        let refiner = Refiner::new(&mut refiner_store, &config.refiner)?;
        Ok(SynthModels {
            config: config.clone(),
            perf_store,
            perfnet,
            refiner_store,
            refiner,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn perfnet(&self) -> &PerfNet {
        &self.perfnet
    }

    pub fn refiner(&self) -> &Refiner {
        &self.refiner
    }

    pub fn perfnet_store(&self) -> &ParamStore {
        &self.perf_store
    }

    pub fn refiner_store(&self) -> &ParamStore {
        &self.refiner_store
    }

    pub fn save(&self, path: &Path, history: &SynthHistory) -> Result<()> {
        save_checkpoint(
            path,
            CHECKPOINT_KIND,
            &self.config,
            history,
            &[("perfnet", &self.perf_store), ("refiner", &self.refiner_store)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let models = Self::new(&ck.config_as()?, 0)?;
        models.perf_store.load_values(&ck.subset("perfnet"))?;
        models.refiner_store.load_values(&ck.subset("refiner"))?;
        Ok(models)
    }

    fn dtype(&self) -> DType {
        self.perf_store.dtype()
    }

    fn stack(&self, windows: &[ndarray::ArrayView2<'_, f32>]) -> Result<Tensor> {
        let (r, c) = windows.first().map_or((0, 0), |w| w.dim());
        let data: Vec<f32> = windows.iter().flat_map(|w| w.iter().copied()).collect();
        tensor_from_f32(data, &[windows.len(), r, c], self.dtype())
    }

    fn perfnet_batch(&self, rolls: &[ndarray::ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
        let out = to_f32_vec(&self.perfnet.forward(&self.stack(rolls)?)?)?;
        Ok(split(out, rolls.len(), self.config.bins, SPEC_WINDOW))
    }

    fn refiner_batch(&self, specs: &[ndarray::ArrayView2<'_, f32>]) -> Result<Vec<Array2<f32>>> {
        let x = self.stack(specs)?.unsqueeze(1)?;
        let out = to_f32_vec(&self.refiner.forward(&x)?)?;
        Ok(split(out, specs.len(), self.config.bins, SPEC_WINDOW))
    }
}

fn split(flat: Vec<f32>, n: usize, rows: usize, cols: usize) -> Vec<Array2<f32>> {
    flat.chunks(rows * cols)
        .take(n)
        .map(|c| Array2::from_shape_vec((rows, cols), c.to_vec()).expect("chunk size"))
        .collect()
}

/// Initial spectrogram estimate for an upsampled `K x 126` window.
pub fn perfnet_forward(models: &SynthModels, window: &ProbRoll) -> Result<Spectrogram> {
    if (window.num_keys(), window.num_frames()) != (models.config.num_keys, SPEC_WINDOW) {
        return Err(Error::domain(format!(
            "perfnet expects a {}x{SPEC_WINDOW} window, got {}x{}",
            models.config.num_keys,
            window.num_keys(),
            window.num_frames()
        )));
    }
    let out = models.perfnet_batch(&[window.data()])?;
    Spectrogram::from_array(out.into_iter().next().expect("one window"))
}

pub fn refine_spectrogram(models: &SynthModels, spec: &Spectrogram) -> Result<Spectrogram> {
    if (spec.num_bins(), spec.num_frames()) != (models.config.bins, SPEC_WINDOW) {
        return Err(Error::domain(format!(
            "refiner expects a {}x{SPEC_WINDOW} window, got {}x{}",
            models.config.bins,
            spec.num_bins(),
            spec.num_frames()
        )));
    }
    let out = models.refiner_batch(&[spec.data()])?;
    Spectrogram::from_array(out.into_iter().next().expect("one window"))
}

/// A 2 s roll window and the matching band-limited target spectrogram window.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    pub midi: PianoRoll,
    pub target: Spectrogram,
}

/// Cuts a roll and its aligned audio into training pairs. Window `w` covers
/// frames `[50w, 50w + 50)` and spectrogram columns `[125w, 125w + 126)`;
/// a trailing partial window is dropped.
pub fn synth_pairs(roll: &PianoRoll, audio: &AudioClip, bins: usize) -> Result<Vec<SynthPair>> {
    let spec = log_spectrogram(audio)?;
    let windows = roll.num_frames() / MIDI_WINDOW;
    let needed = windows * SPEC_STRIDE + 1;
    if windows > 0 && spec.num_frames() < needed {
        return Err(Error::Alignment(format!(
            "audio gives {} spectrogram columns, {windows} windows need {needed}",
            spec.num_frames()
        )));
    }
    let spec = spec.crop_bins(bins)?;
    (0..windows)
        .map(|w| {
            Ok(SynthPair {
                midi: roll.slice_frames(w * MIDI_WINDOW, (w + 1) * MIDI_WINDOW),
                target: spec.slice_frames(w * SPEC_STRIDE, w * SPEC_STRIDE + SPEC_WINDOW),
            })
        })
        .collect()
}

/// Synth pairs for a roll rendered by the classical synthesizer.
pub fn classical_pairs(roll: &PianoRoll, params: &ClassicalParams, bins: usize) -> Result<Vec<SynthPair>> {
    let audio = classical_synth(&events_from_roll(roll, DEFAULT_VELOCITY), roll.num_frames(), params)?;
    synth_pairs(roll, &audio, bins)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthLog {
    pub epochs: Vec<SynthEpoch>,
    pub best_epoch: usize,
    /// Validation loss before the first update.
    pub initial_val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthHistory {
    pub perfnet: Option<SynthLog>,
    pub refiner: Option<SynthLog>,
}

enum Stage {
    PerfNet,
    Refiner,
}

struct Prepared {
    inputs: Vec<Array2<f32>>,
    targets: Vec<Array2<f32>>,
}

impl SynthModels {
    fn check_pairs(&self, pairs: &[SynthPair]) -> Result<()> {
        for (i, p) in pairs.iter().enumerate() {
            if (p.midi.num_keys(), p.midi.num_frames()) != (self.config.num_keys, MIDI_WINDOW) {
                return Err(Error::domain(format!(
                    "pair {i}: midi window is not {}x{MIDI_WINDOW}",
                    self.config.num_keys
                )));
            }
            if (p.target.num_bins(), p.target.num_frames()) != (self.config.bins, SPEC_WINDOW) {
                return Err(Error::domain(format!(
                    "pair {i}: target is not {}x{SPEC_WINDOW}",
                    self.config.bins
                )));
            }
        }
        Ok(())
    }

    fn prepare(&self, pairs: &[SynthPair], stage: &Stage) -> Result<Prepared> {
        self.check_pairs(pairs)?;
        let rolls = pairs
            .iter()
            .map(|p| Ok(upsample_midi_window(&p.midi)?.to_prob().into_data()))
            .collect::<Result<Vec<_>>>()?;
        let inputs = match stage {
            Stage::PerfNet => rolls,
            Stage::Refiner => {
                let mut out = Vec::with_capacity(rolls.len());
                for chunk in rolls.chunks(self.config.batch_size) {
                    let views: Vec<_> = chunk.iter().map(|r| r.view()).collect();
                    out.extend(self.perfnet_batch(&views)?);
                }
                out
            }
        };
        let targets = pairs.iter().map(|p| p.target.data().to_owned()).collect();
        Ok(Prepared { inputs, targets })
    }

    fn stage_loss(&self, stage: &Stage, inputs: &[&Array2<f32>], targets: &[&Array2<f32>]) -> Result<Tensor> {
        let x = self.stack(&inputs.iter().map(|a| a.view()).collect::<Vec<_>>())?;
        let y = self.stack(&targets.iter().map(|a| a.view()).collect::<Vec<_>>())?;
        match stage {
            Stage::PerfNet => mse(&self.perfnet.forward(&x)?, &y),
            Stage::Refiner => l1(&self.refiner.forward(&x.unsqueeze(1)?)?.squeeze(1)?, &y),
        }
    }

    fn mean_loss(&self, stage: &Stage, data: &Prepared) -> Result<f64> {
        let mut total = 0.0;
        let n = data.inputs.len();
        for start in (0..n).step_by(self.config.batch_size) {
            let end = (start + self.config.batch_size).min(n);
            let xs: Vec<_> = data.inputs[start..end].iter().collect();
            let ys: Vec<_> = data.targets[start..end].iter().collect();
            total += scalar(&self.stage_loss(stage, &xs, &ys)?)? * (end - start) as f64;
        }
        Ok(total / n as f64)
    }

    fn train_stage(
        &mut self,
        stage: Stage,
        train: &[SynthPair],
        val: &[SynthPair],
        schedule: &TrainSchedule,
    ) -> Result<SynthLog> {
        schedule.validate("schedule")?;
        if train.is_empty() {
            return Err(Error::domain("no synth training pairs"));
        }
        let train_data = self.prepare(train, &stage)?;
        let val_data = if val.is_empty() {
            None
        } else {
            Some(self.prepare(val, &stage)?)
        };
        let store = match stage {
            Stage::PerfNet => &self.perf_store,
            Stage::Refiner => &self.refiner_store,
        };
        let mut opt = Optimizer::new(store.vars(), &self.config.optimizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let bs = self.config.batch_size.min(train.len());
        let steps = schedule.steps_per_epoch.unwrap_or_else(|| train.len().div_ceil(bs));
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut cursor = order.len();
        let mut log = SynthLog {
            initial_val_loss: val_data.as_ref().map(|v| self.mean_loss(&stage, v)).transpose()?,
            ..SynthLog::default()
        };
        let mut best: Option<(f64, _)> = None;
        let mut step_no = 0;
        for epoch in 0..schedule.epochs {
            let lr = opt.lr();
            let mut train_loss = 0.0;
            for _ in 0..steps {
                let mut batch = Vec::with_capacity(bs);
                while batch.len() < bs {
                    if cursor == order.len() {
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    batch.push(order[cursor]);
                    cursor += 1;
                }
                let xs: Vec<_> = batch.iter().map(|&i| &train_data.inputs[i]).collect();
                let ys: Vec<_> = batch.iter().map(|&i| &train_data.targets[i]).collect();
                let loss = self.stage_loss(&stage, &xs, &ys)?;
                let value = scalar(&loss)?;
                check_finite(value, "synth loss", step_no)?;
                opt.step(&loss)?;
                train_loss += value;
                step_no += 1;
            }
            train_loss /= steps as f64;
            let val_loss = val_data.as_ref().map(|v| self.mean_loss(&stage, v)).transpose()?;
            let score = val_loss.unwrap_or(train_loss);
            opt.end_epoch(score);
            tracing::info!(epoch, train_loss, ?val_loss, lr, "synth epoch");
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                let store = match stage {
                    Stage::PerfNet => &self.perf_store,
                    Stage::Refiner => &self.refiner_store,
                };
                best = Some((score, store.snapshot()?));
                log.best_epoch = epoch;
            }
            log.epochs.push(SynthEpoch {
                epoch,
                train_loss,
                val_loss,
                lr,
            });
        }
        if let Some((_, snap)) = best {
            match stage {
                Stage::PerfNet => self.perf_store.restore(&snap)?,
                Stage::Refiner => self.refiner_store.restore(&snap)?,
            }
        }
        Ok(log)
    }
}

/// Fits PerfNet by MSE against target windows, keeping the epoch with the
/// lowest validation loss (training loss when `val` is empty).
pub fn train_perfnet(
    models: &mut SynthModels,
    train: &[SynthPair],
    val: &[SynthPair],
    schedule: &TrainSchedule,
) -> Result<SynthLog> {
    models.train_stage(Stage::PerfNet, train, val, schedule)
}

/// Fits the refiner by L1 between refined PerfNet estimates and targets,
/// with PerfNet frozen.
pub fn train_refiner(
    models: &mut SynthModels,
    train: &[SynthPair],
    val: &[SynthPair],
    schedule: &TrainSchedule,
) -> Result<SynthLog> {
    models.train_stage(Stage::Refiner, train, val, schedule)
}

/// Band-limited spectrogram of a whole roll from the deep path, before bin padding.
///
/// The roll is zero-padded to whole 2 s windows. Window `w` fills columns
/// `[125w, 125w + 126)`; the column shared by neighbouring windows is the mean
/// of both estimates. The result is cropped to `floor(2.5 T) + 1` columns,
/// the centered-STFT frame count of `T / 25` seconds of audio.
pub fn deep_spectrogram(models: &SynthModels, roll: &PianoRoll) -> Result<Spectrogram> {
    if roll.num_keys() != models.config.num_keys {
        return Err(Error::domain(format!(
            "roll has {} keys, synth models expect {}",
            roll.num_keys(),
            models.config.num_keys
        )));
    }
    let t = roll.num_frames();
    if t == 0 {
        return Err(Error::domain("cannot synthesize an empty roll"));
    }
    let windows = t.div_ceil(MIDI_WINDOW);
    let mut padded = Array2::<u8>::zeros((roll.num_keys(), windows * MIDI_WINDOW));
    padded.slice_mut(s![.., ..t]).assign(&roll.data());
    let padded = PianoRoll::from_array(padded)?;
    let bins = models.config.bins;
    let total = windows * SPEC_STRIDE + 1;
    let mut sum = Array2::<f32>::zeros((bins, total));
    let mut count = vec![0.0f32; total];
    let ids: Vec<usize> = (0..windows).collect();
    for chunk in ids.chunks(models.config.batch_size) {
        let rolls = chunk
            .iter()
            .map(|&w| {
                Ok(
                    upsample_midi_window(&padded.slice_frames(w * MIDI_WINDOW, (w + 1) * MIDI_WINDOW))?
                        .to_prob()
                        .into_data(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let initial = models.perfnet_batch(&rolls.iter().map(|r| r.view()).collect::<Vec<_>>())?;
        let refined = models.refiner_batch(&initial.iter().map(|r| r.view()).collect::<Vec<_>>())?;
        for (&w, spec) in chunk.iter().zip(&refined) {
            let c0 = w * SPEC_STRIDE;
            let mut target = sum.slice_mut(s![.., c0..c0 + SPEC_WINDOW]);
            target += spec;
            for c in &mut count[c0..c0 + SPEC_WINDOW] {
                *c += 1.0;
            }
        }
    }
    for (mut col, c) in sum.columns_mut().into_iter().zip(&count) {
        col /= *c;
    }
    let cols = 5 * t / 2 + 1;
    Spectrogram::from_array(sum.slice(s![.., ..cols]).to_owned())
}

/// Renders a roll to audio, either with the classical synthesizer or via the
/// deep path and Griffin-Lim.
pub fn synthesize(
    roll: &PianoRoll,
    mode: SynthMode,
    models: Option<&SynthModels>,
    params: &ClassicalParams,
) -> Result<AudioClip> {
    match mode {
        SynthMode::Classical => classical_synth(&events_from_roll(roll, DEFAULT_VELOCITY), roll.num_frames(), params),
        SynthMode::Deep => {
            let models =
                models.ok_or_else(|| Error::config("synth.mode", "deep synthesis needs trained synth models"))?;
            let spec = deep_spectrogram(models, roll)?.pad_bins(NUM_BINS)?;
            griffin_lim(&spec, models.config.griffin_lim_iterations)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthConfig {
        SynthConfig {
            perfnet: PerfNetConfig {
                channels: 4,
                bottleneck_channels: 4,
                kernel: 3,
            },
            refiner: UNetConfig {
                base_channels: 2,
                max_channels: 2,
                convs_per_level: 1,
                ..UNetConfig::default()
            },
            batch_size: 4,
            griffin_lim_iterations: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn upsample_index_map() {
        let mut roll = PianoRoll::zeros(88, 50);
        for t in 0..50 {
            roll.set(t, t, true);
        }
        let up = upsample_midi_window(&roll).unwrap();
        assert_eq!((up.num_keys(), up.num_frames()), (88, 126));
        for f in 0..126 {
            assert!(up.is_active(f * 50 / 126, f));
        }
        assert_eq!(upsample_index(125), 49);
        assert!(upsample_midi_window(&PianoRoll::zeros(88, 49)).is_err());
    }

    #[test]
    fn forward_shapes() {
        let models = SynthModels::new(&tiny(), 1).unwrap();
        let roll = upsample_midi_window(&PianoRoll::zeros(88, 50)).unwrap().to_prob();
        let spec = perfnet_forward(&models, &roll).unwrap();
        assert_eq!((spec.num_bins(), spec.num_frames()), (576, 126));
        assert!(spec.data().iter().all(|&v| v >= 0.0));
        let refined = refine_spectrogram(&models, &spec).unwrap();
        assert_eq!(refined, spec, "untrained refiner is the identity");
        assert!(perfnet_forward(&models, &ProbRoll::zeros(88, 50)).is_err());
        assert!(refine_spectrogram(&models, &spec.crop_bins(100).unwrap()).is_err());
    }

    #[test]
    fn deep_length_arithmetic() {
        let models = SynthModels::new(&tiny(), 2).unwrap();
        for t in [1usize, 49, 50, 51, 137] {
            let roll = PianoRoll::zeros(88, t);
            let spec = deep_spectrogram(&models, &roll).unwrap();
            assert_eq!(spec.num_frames(), 5 * t / 2 + 1);
            let audio = synthesize(&roll, SynthMode::Deep, Some(&models), &ClassicalParams::default()).unwrap();
            let expected = t as f64 * 640.0;
            assert!(
                (audio.len() as f64 - expected).abs() <= HOP as f64,
                "{t}: {}",
                audio.len()
            );
        }
        let err = synthesize(
            &PianoRoll::zeros(88, 5),
            SynthMode::Deep,
            None,
            &ClassicalParams::default(),
        );
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn shared_boundary_column_is_averaged() {
        let models = SynthModels::new(&tiny(), 3).unwrap();
        let mut roll = PianoRoll::zeros(88, 100);
        for t in 10..80 {
            roll.set(40, t, true);
        }
        let full = deep_spectrogram(&models, &roll).unwrap();
        let first = perfnet_forward(
            &models,
            &upsample_midi_window(&roll.slice_frames(0, 50)).unwrap().to_prob(),
        )
        .unwrap();
        let second = perfnet_forward(
            &models,
            &upsample_midi_window(&roll.slice_frames(50, 100)).unwrap().to_prob(),
        )
        .unwrap();
        for f in [0, 100, 575] {
            let mean = (first.data()[(f, 125)] + second.data()[(f, 0)]) / 2.0;
            assert!((full.data()[(f, 125)] - mean).abs() < 1e-5);
            assert!((full.data()[(f, 130)] - second.data()[(f, 5)]).abs() < 1e-5);
        }
    }

    #[test]
    fn pairs_follow_window_grid() {
        let mut roll = PianoRoll::zeros(88, 120);
        roll.set(48, 60, true);
        let pairs = classical_pairs(&roll, &ClassicalParams::default(), 576).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].midi, roll.slice_frames(50, 100));
        let audio = classical_synth(
            &events_from_roll(&roll, DEFAULT_VELOCITY),
            120,
            &ClassicalParams::default(),
        )
        .unwrap();
        let spec = log_spectrogram(&audio).unwrap();
        assert_eq!(pairs[1].target.data()[(30, 0)], spec.data()[(30, 125)]);
        assert!(synth_pairs(&roll, &AudioClip::silence(16000), 576).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.safetensors");
        let models = SynthModels::new(&tiny(), 4).unwrap();
        models.save(&path, &SynthHistory::default()).unwrap();
        let back = SynthModels::load(&path).unwrap();
        let roll = upsample_midi_window(&PianoRoll::zeros(88, 50)).unwrap().to_prob();
        assert_eq!(
            perfnet_forward(&models, &roll).unwrap(),
            perfnet_forward(&back, &roll).unwrap()
        );
    }
}
