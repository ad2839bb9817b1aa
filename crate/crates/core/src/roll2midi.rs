//! Adversarial roll refiner: a U-Net generator maps a noisy probability roll
//! window to a cleaned one, and a five-layer convolutional discriminator
//! scores windows as real (ground truth) or generated, both trained with
//! least-squares objectives.

use std::path::Path;

use candle_core::{DType, Tensor};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{leaky_relu, mse, mse_to, sigmoid, Conv2d};
use crate::nn::{check_finite, load_checkpoint, save_checkpoint, scalar, tensor_from_f32, to_f32_vec};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore, UNet, UNetConfig};
use crate::roll::{PianoRoll, ProbRoll, NUM_KEYS};
use crate::video2roll::TrainSchedule;

pub const CHECKPOINT_KIND: &str = "roll2midi";
/// Window length in frames (4 s).
pub const WINDOW: usize = 100;
/// Window stride in frames, used for training windows and inference stitching.
pub const STRIDE: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Roll2MidiConfig {
    pub num_keys: usize,
    pub generator: UNetConfig,
    /// Widths of the four strided discriminator layers; a fifth layer maps to one channel.
    pub discriminator_channels: Vec<usize>,
    /// Weight of the reconstruction term in the generator loss; 0 leaves the pure adversarial objective.
    pub lambda: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Roll2MidiConfig {
    fn default() -> Self {
        Roll2MidiConfig {
            num_keys: NUM_KEYS,
            generator: UNetConfig {
                base_channels: 8,
                max_channels: 32,
                convs_per_level: 1,
                ..UNetConfig::default()
            },
            discriminator_channels: vec![8, 16, 32, 32],
            lambda: 100.0,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl Roll2MidiConfig {
    pub fn full_scale() -> Self {
        Roll2MidiConfig {
            generator: UNetConfig {
                base_channels: 32,
                max_channels: 512,
                ..UNetConfig::default()
            },
            discriminator_channels: vec![64, 128, 256, 512],
            batch_size: 64,
            ..Roll2MidiConfig::default()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        self.generator.validate(&format!("{field}.generator"))?;
        if self.generator.in_channels != 1 || self.generator.out_channels != 1 {
            return Err(Error::config(
                format!("{field}.generator"),
                "must map one channel to one channel",
            ));
        }
        if self.discriminator_channels.len() != 4 || self.discriminator_channels.contains(&0) {
            return Err(Error::config(
                format!("{field}.discriminator_channels"),
                "needs four positive widths",
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("{field}.lambda"), "must be a finite value >= 0"));
        }
        if self.num_keys == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "sizes must be positive"));
        }
        self.optimizer.validate(&format!("{field}.optimizer"))
    }
}

/// Input probabilities are clamped this far from 0 and 1 before taking logits.
const LOGIT_EPS: f64 = 1e-3;

/// U-Net correction added to the input's logits. `scale` starts at 0, so an
/// untrained generator passes its input through unchanged.
pub struct Generator {
    unet: UNet,
    scale: Tensor,
}

impl Generator {
    pub fn new(store: &mut ParamStore, config: &UNetConfig) -> Result<Self> {
        Ok(Generator {
            unet: UNet::new(store, "unet", config)?,
            scale: store.constant("scale", &[1], 0.0)?,
        })
    }

    /// `(B, 1, K, W)` probabilities to refined probabilities of the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = x.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS)?;
        let logit = (p.log()? - (1.0 - &p)?.log()?)?;
        let delta = self.unet.forward(x)?.broadcast_mul(&self.scale)?;
        sigmoid(&(logit + delta)?)
    }
}

pub struct Discriminator {
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, channels: &[usize]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c_in = 1;
        for (i, &c) in channels.iter().enumerate() {
            layers.push(Conv2d::new(store, &format!("conv{i}"), c_in, c, 3, 2, 1, true)?);
            c_in = c;
        }
        layers.push(Conv2d::new(
            store,
            &format!("conv{}", channels.len()),
            c_in,
            1,
            3,
            1,
            1,
            true,
        )?);
        Ok(Discriminator { layers })
    }

    /// One realness score per window of a `(B, 1, K, W)` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (last, hidden) = self.layers.split_last().expect("five layers");
        let h = hidden.iter().try_fold(x.clone(), |h, c| leaky_relu(&c.forward(&h)?))?;
        Ok(last.forward(&h)?.flatten_from(1)?.mean(1)?)
    }
}

pub struct Roll2MidiModel {
    config: Roll2MidiConfig,
    gen_store: ParamStore,
    generator: Generator,
    disc_store: ParamStore,
    discriminator: Discriminator,
}

impl Roll2MidiModel {
    pub fn new(config: &Roll2MidiConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, DType::F32, seed)
    }

    pub fn with_dtype(config: &Roll2MidiConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate("roll2midi")?;
        let mut gen_store = ParamStore::new(dtype, seed);
        let generator = Generator::new(&mut gen_store, &config.generator)?;
        let mut disc_store = ParamStore::new(dtype, seed.wrapping_add(1));
        let discriminator = Discriminator::new(&mut disc_store, &config.discriminator_channels)?;
        Ok(Roll2MidiModel {
            config: config.clone(),
            gen_store,
            generator,
            disc_store,
            discriminator,
        })
    }

    pub fn config(&self) -> &Roll2MidiConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn generator_store(&self) -> &ParamStore {
        &self.gen_store
    }

    pub fn discriminator_store(&self) -> &ParamStore {
        &self.disc_store
    }

    pub fn save(&self, path: &Path, history: &GanLog) -> Result<()> {
        save_checkpoint(
            path,
            CHECKPOINT_KIND,
            &self.config,
            history,
            &[("generator", &self.gen_store), ("discriminator", &self.disc_store)],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(&ck.config_as()?, 0)?;
        model.gen_store.load_values(&ck.subset("generator"))?;
        model.disc_store.load_values(&ck.subset("discriminator"))?;
        Ok(model)
    }

    fn check_window(&self, window: &ProbRoll) -> Result<()> {
        if (window.num_keys(), window.num_frames()) != (self.config.num_keys, WINDOW) {
            return Err(Error::domain(format!(
                "expected a {}x{WINDOW} window, got {}x{}",
                self.config.num_keys,
                window.num_keys(),
                window.num_frames()
            )));
        }
        Ok(())
    }

    fn batch_tensor(&self, windows: &[ArrayRef<'_>]) -> Result<Tensor> {
        let k = self.config.num_keys;
        let mut data = Vec::with_capacity(windows.len() * k * WINDOW);
        for w in windows {
            data.extend(w.iter().copied());
        }
        tensor_from_f32(data, &[windows.len(), 1, k, WINDOW], self.gen_store.dtype())
    }
}

type ArrayRef<'a> = ndarray::ArrayView2<'a, f32>;

/// Refined `K x 100` window.
pub fn generator_forward(model: &Roll2MidiModel, window: &ProbRoll) -> Result<ProbRoll> {
    model.check_window(window)?;
    let x = model.batch_tensor(&[window.data()])?;
    let out = to_f32_vec(&model.generator.forward(&x)?)?;
    ProbRoll::from_array(Array2::from_shape_vec((model.config.num_keys, WINDOW), out).expect("window size"))
}

/// Realness score of a `K x 100` window.
pub fn discriminator_forward(model: &Roll2MidiModel, window: &ProbRoll) -> Result<f64> {
    model.check_window(window)?;
    let x = model.batch_tensor(&[window.data()])?;
    scalar(&model.discriminator.forward(&x)?.squeeze(0)?)
}

/// Window start frames covering `t` frames: `0, 50, 100, ...` until the last window reaches the end.
pub fn window_starts(t: usize) -> Vec<usize> {
    let n = if t <= WINDOW {
        1
    } else {
        (t - WINDOW).div_ceil(STRIDE) + 1
    };
    (0..n).map(|i| i * STRIDE).collect()
}

fn padded(data: ndarray::ArrayView2<'_, f32>, len: usize) -> Array2<f32> {
    let mut out = Array2::zeros((data.nrows(), len));
    let n = data.ncols().min(len);
    out.slice_mut(s![.., ..n]).assign(&data.slice(s![.., ..n]));
    out
}

/// Refines a roll of any length by overlapping 100-frame windows with stride
/// 50; frames covered by two windows get the mean of both outputs. The tail
/// is zero-padded to a full window and cropped afterwards.
pub fn refine_sequence(model: &Roll2MidiModel, roll: &ProbRoll) -> Result<ProbRoll> {
    let k = model.config.num_keys;
    if roll.num_keys() != k {
        return Err(Error::domain(format!("expected {k} keys, got {}", roll.num_keys())));
    }
    let t = roll.num_frames();
    let starts = window_starts(t);
    let total = starts.last().copied().unwrap_or(0) + WINDOW;
    let input = padded(roll.data(), total);
    let mut sum = Array2::<f32>::zeros((k, total));
    let mut count = vec![0.0f32; total];
    for chunk in starts.chunks(model.config.batch_size) {
        let views: Vec<_> = chunk.iter().map(|&s0| input.slice(s![.., s0..s0 + WINDOW])).collect();
        let out = to_f32_vec(&model.generator.forward(&model.batch_tensor(&views)?)?)?;
        for (i, &s0) in chunk.iter().enumerate() {
            let w = ndarray::ArrayView2::from_shape((k, WINDOW), &out[i * k * WINDOW..(i + 1) * k * WINDOW])
                .expect("window size");
            let mut target = sum.slice_mut(s![.., s0..s0 + WINDOW]);
            target += &w;
            for c in &mut count[s0..s0 + WINDOW] {
                *c += 1.0;
            }
        }
    }
    for (mut col, c) in sum.columns_mut().into_iter().zip(&count) {
        col /= *c;
    }
    ProbRoll::from_array(sum.slice(s![.., ..t]).to_owned())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adversarial: f64,
    pub g_reconstruction: f64,
    /// Mean discriminator score on ground truth and on generated windows.
    pub d_real: f64,
    pub d_fake: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanLog {
    pub epochs: Vec<GanEpoch>,
    /// `(d_loss, g_loss)` of every step of the first epoch.
    pub first_epoch_steps: Vec<(f64, f64)>,
    pub num_windows: usize,
}

/// Training windows (input, target) cut from paired rolls with stride 50.
fn training_windows(
    prob_rolls: &[ProbRoll],
    gt_rolls: &[PianoRoll],
    k: usize,
) -> Result<Vec<(Array2<f32>, Array2<f32>)>> {
    if prob_rolls.len() != gt_rolls.len() {
        return Err(Error::domain(format!(
            "{} probability rolls but {} ground-truth rolls",
            prob_rolls.len(),
            gt_rolls.len()
        )));
    }
    let mut out = Vec::new();
    for (i, (p, g)) in prob_rolls.iter().zip(gt_rolls).enumerate() {
        if (p.num_keys(), p.num_frames()) != (g.num_keys(), g.num_frames()) || p.num_keys() != k {
            return Err(Error::domain(format!(
                "pair {i}: shapes differ or key count is not {k}"
            )));
        }
        let g = g.to_prob();
        let starts = window_starts(p.num_frames());
        let total = starts.last().copied().unwrap_or(0) + WINDOW;
        let (pp, gp) = (padded(p.data(), total), padded(g.data(), total));
        for s0 in starts {
            out.push((
                pp.slice(s![.., s0..s0 + WINDOW]).to_owned(),
                gp.slice(s![.., s0..s0 + WINDOW]).to_owned(),
            ));
        }
    }
    if out.is_empty() {
        return Err(Error::domain("no training windows"));
    }
    Ok(out)
}

/// Alternating least-squares GAN updates: the discriminator pushes ground
/// truth toward 1 and generated windows toward 0; the generator pushes its
/// outputs' scores toward 1 plus `lambda` times the MSE to ground truth.
pub fn train_gan(
    prob_rolls: &[ProbRoll],
    gt_rolls: &[PianoRoll],
    config: &Roll2MidiConfig,
    schedule: &TrainSchedule,
) -> Result<(Roll2MidiModel, GanLog)> {
    schedule.validate("schedule")?;
    let model = Roll2MidiModel::new(config, schedule.seed)?;
    let windows = training_windows(prob_rolls, gt_rolls, config.num_keys)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x6a6e);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let bs = config.batch_size.min(windows.len());
    let steps = schedule.steps_per_epoch.unwrap_or_else(|| windows.len().div_ceil(bs));
    let mut g_opt = Optimizer::new(model.gen_store.vars(), &config.optimizer)?;
    let mut d_opt = Optimizer::new(model.disc_store.vars(), &config.optimizer)?;
    let mut log = GanLog {
        num_windows: windows.len(),
        ..GanLog::default()
    };
    let mut cursor = order.len();
    let mut step_no = 0;
    for epoch in 0..schedule.epochs {
        let mut acc = GanEpoch {
            epoch,
            lr: g_opt.lr(),
            ..GanEpoch::default()
        };
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
            let inputs: Vec<_> = batch.iter().map(|&i| windows[i].0.view()).collect();
            let targets: Vec<_> = batch.iter().map(|&i| windows[i].1.view()).collect();
            let x = model.batch_tensor(&inputs)?;
            let m = model.batch_tensor(&targets)?;

            let fake = model.generator.forward(&x)?;
            let d_real = model.discriminator.forward(&m)?;
            let d_fake = model.discriminator.forward(&fake.detach())?;
            let d_loss = (mse_to(&d_real, 1.0)? + mse_to(&d_fake, 0.0)?)?;
            let d_value = scalar(&d_loss)?;
            check_finite(d_value, "discriminator loss", step_no)?;
            d_opt.step(&d_loss)?;

            let g_adv = mse_to(&model.discriminator.forward(&fake)?, 1.0)?;
            let g_rec = mse(&fake, &m)?;
            let g_loss = (&g_adv + (&g_rec * config.lambda)?)?;
            let g_value = scalar(&g_loss)?;
            check_finite(g_value, "generator loss", step_no)?;
            g_opt.step(&g_loss)?;

            if epoch == 0 {
                log.first_epoch_steps.push((d_value, g_value));
            }
            acc.d_loss += d_value;
            acc.g_adversarial += scalar(&g_adv)?;
            acc.g_reconstruction += scalar(&g_rec)?;
            acc.d_real += scalar(&d_real.mean_all()?)?;
            acc.d_fake += scalar(&d_fake.mean_all()?)?;
            step_no += 1;
        }
        let n = steps as f64;
        acc.d_loss /= n;
        acc.g_adversarial /= n;
        acc.g_reconstruction /= n;
        acc.d_real /= n;
        acc.d_fake /= n;
        g_opt.end_epoch(acc.g_reconstruction);
        tracing::info!(
            epoch,
            d_loss = acc.d_loss,
            g_rec = acc.g_reconstruction,
            d_real = acc.d_real,
            d_fake = acc.d_fake,
            "roll2midi epoch"
        );
        log.epochs.push(acc);
    }
    Ok((model, log))
}
