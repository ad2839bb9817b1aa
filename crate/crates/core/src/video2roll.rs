//! Frame-stack to key-press classifier.
//!
//! Five stacked grayscale frames enter a residual backbone as five channels.
//! Features from the selected backbone stages are projected to a common width
//! and recalibrated by a channel gate, fused top-down from coarse to fine,
//! passed through one spatial self-attention layer, averaged over height and
//! mapped to one logit per key by a linear head.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{balanced_batches, DatasetIndex, FrameSource, FrameStack, STACK_DEPTH};
use crate::metrics::frame_metrics;
use crate::nn::layers::{bce_with_logits, leaky_relu, sigmoid, softmax_last, Conv2d, Linear};
use crate::nn::{check_finite, load_checkpoint, save_checkpoint, scalar, tensor_from_f32, to_f32_vec};
use crate::nn::{Optimizer, OptimizerConfig, ParamStore};
use crate::roll::{binarize, PianoRoll, ProbRoll, NUM_KEYS};

pub const CHECKPOINT_KIND: &str = "video2roll";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Video2RollConfig {
    pub num_keys: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Output width of backbone stages 1 to 4.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Backbone stages (2 to 4) whose features enter the refinement.
    pub scales_used: Vec<usize>,
    /// Channel width shared by all transformed scales.
    pub common_width: usize,
    /// Bottleneck ratio of the channel gate.
    pub gate_reduction: usize,
    /// Query/key width of the attention layer.
    pub attention_dim: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for Video2RollConfig {
    fn default() -> Self {
        Video2RollConfig::toy()
    }
}

impl Video2RollConfig {
    /// Small network that trains on one CPU core.
    pub fn toy() -> Self {
        Video2RollConfig {
            num_keys: NUM_KEYS,
            input_height: 100,
            input_width: 900,
            stem_kernel: 8,
            stem_stride: 8,
            stage_channels: vec![16, 24, 32, 32],
            blocks_per_stage: 1,
            scales_used: vec![2, 3, 4],
            common_width: 32,
            gate_reduction: 4,
            attention_dim: 16,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
        }
    }

    /// ResNet18-sized backbone; meant for a GPU-class budget.
    pub fn full_scale() -> Self {
        Video2RollConfig {
            stem_kernel: 4,
            stem_stride: 4,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            common_width: 256,
            gate_reduction: 16,
            attention_dim: 64,
            batch_size: 64,
            ..Video2RollConfig::toy()
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let cfg = |name: &str, msg: &str| Err(Error::config(format!("{field}.{name}"), msg));
        if self.stage_channels.len() != 4 || self.stage_channels.contains(&0) {
            return cfg("stage_channels", "needs four positive widths");
        }
        if self.scales_used.is_empty() || self.scales_used.iter().any(|s| !(2..=4).contains(s)) {
            return cfg(
                "scales_used",
                "must list stages among 2, 3, 4 (stage 1 is never refined)",
            );
        }
        let mut sorted = self.scales_used.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.scales_used.len() {
            return cfg("scales_used", "must not repeat a stage");
        }
        for (name, v) in [
            ("num_keys", self.num_keys),
            ("stem_kernel", self.stem_kernel),
            ("stem_stride", self.stem_stride),
            ("blocks_per_stage", self.blocks_per_stage),
            ("common_width", self.common_width),
            ("gate_reduction", self.gate_reduction),
            ("attention_dim", self.attention_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return cfg(name, "must be positive");
            }
        }
        if self.input_height < self.stem_kernel || self.input_width < self.stem_kernel {
            return cfg("stem_kernel", "larger than the input frame");
        }
        self.optimizer.validate(&format!("{field}.optimizer"))
    }

    fn stem_padding(&self) -> usize {
        (self.stem_kernel + 1).saturating_sub(self.stem_stride) / 2
    }

    /// Spatial size of every backbone stage output.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let p = self.stem_padding();
        let stem = |n: usize| (n + 2 * p - self.stem_kernel) / self.stem_stride + 1;
        let mut size = (stem(self.input_height), stem(self.input_width));
        let mut out = vec![size];
        for _ in 1..4 {
            size = (size.0.div_ceil(2), size.1.div_ceil(2));
            out.push(size);
        }
        out
    }
}

/// `x -> leaky(conv2(leaky(conv1(x))) + shortcut(x))`.
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || c_in != c_out {
            Some(Conv2d::new(
                store,
                &format!("{name}.short"),
                c_in,
                c_out,
                1,
                stride,
                0,
                false,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, 1, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, true)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv2.forward(&leaky_relu(&self.conv1.forward(x)?)?)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        leaky_relu(&(h + s)?)
    }
}

/// 1x1 projection to the common width followed by a squeeze-excitation gate.
pub struct FeatureTransform {
    project: Conv2d,
    squeeze: Linear,
    excite: Linear,
}

impl FeatureTransform {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, width: usize, reduction: usize) -> Result<Self> {
        let hidden = (width / reduction).max(1);
        Ok(FeatureTransform {
            project: Conv2d::new(store, &format!("{name}.project"), c_in, width, 1, 1, 0, false)?,
            squeeze: Linear::new(store, &format!("{name}.squeeze"), width, hidden, None)?,
            excite: Linear::new(store, &format!("{name}.excite"), hidden, width, None)?,
        })
    }

    /// Recalibrated features `(B, width, H, W)` and the gate `(B, width)`, every gate value in (0, 1).
    pub fn forward_with_gate(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let y = self.project.forward(x)?;
        let pooled = y.mean(D::Minus1)?.mean(D::Minus1)?;
        let gate = sigmoid(&self.excite.forward(&leaky_relu(&self.squeeze.forward(&pooled)?)?)?)?;
        let (b, c) = gate.dims2()?;
        let out = y.broadcast_mul(&gate.reshape((b, c, 1, 1))?)?;
        Ok((out, gate))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_gate(x)?.0)
    }
}

/// Top-down fusion of maps ordered coarse to fine: each running sum is
/// nearest-upsampled to the next finer map's size (a factor of two, rounded
/// for odd sizes) and added to it. Returns the finest fused map.
pub fn feature_refine(features: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::domain("feature_refine needs at least one map"))?;
    let width = first.dim(1)?;
    let mut fused = first.clone();
    for f in rest {
        let (_, c, h, w) = f.dims4()?;
        if c != width {
            return Err(Error::domain(format!("scale widths differ: {width} vs {c}")));
        }
        fused = (f + upsample_nearest(&fused, h, w)?)?;
    }
    Ok(fused)
}

/// Nearest-neighbour resize of a `(B, C, h, w)` map to `(B, C, out_h, out_w)`:
/// output index `i` reads input index `floor(i * in / out)`.
fn upsample_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let index = |n_in: usize, n_out: usize| {
        let idx: Vec<u32> = (0..n_out).map(|i| (i * n_in / n_out) as u32).collect();
        Tensor::new(idx, x.device())
    };
    Ok(x.index_select(&index(h, out_h)?, 2)?
        .index_select(&index(w, out_w)?, 3)?)
}

/// Single-head scaled dot-product self-attention over spatial positions, with a residual add.
pub struct Correlation {
    query: Tensor,
    key: Tensor,
    value: Tensor,
    dim: usize,
}

impl Correlation {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, dim: usize) -> Result<Self> {
        let std = (1.0 / width as f64).sqrt();
        Ok(Correlation {
            query: store.normal(&format!("{name}.query"), &[width, dim], std)?,
            key: store.normal(&format!("{name}.key"), &[width, dim], std)?,
            value: store.normal(&format!("{name}.value"), &[width, width], std)?,
            dim,
        })
    }

    /// Attended features (shape of `x`) and the attention matrix `(B, N, N)`,
    /// `N = H * W`, whose rows each sum to one.
    pub fn forward_with_attention(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let xt = x.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let q = xt.broadcast_matmul(&self.query)?;
        let k = xt.broadcast_matmul(&self.key)?;
        let v = xt.broadcast_matmul(&self.value)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = (xt + attn.matmul(&v)?)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        Ok((out, attn))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_attention(x)?.0)
    }
}

pub struct Video2RollModel {
    config: Video2RollConfig,
    store: ParamStore,
    stem: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    /// Stage number and transform, ordered coarse to fine.
    transforms: Vec<(usize, FeatureTransform)>,
    correlation: Correlation,
    head: Linear,
}

impl Video2RollModel {
    pub fn new(config: &Video2RollConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, DType::F32, seed)
    }

    pub fn with_dtype(config: &Video2RollConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate("video2roll")?;
        let mut store = ParamStore::new(dtype, seed);
        let s = &mut store;
        let ch = &config.stage_channels;
        let stem = Conv2d::new(
            s,
            "stem",
            STACK_DEPTH,
            ch[0],
            config.stem_kernel,
            config.stem_stride,
            config.stem_padding(),
            true,
        )?;
        let mut stages = Vec::new();
        let mut c_in = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for j in 0..config.blocks_per_stage {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(s, &format!("stage{}.{j}", i + 1), c_in, c, stride)?);
                c_in = c;
            }
            stages.push(blocks);
        }
        let mut scales = config.scales_used.clone();
        scales.sort_unstable_by(|a, b| b.cmp(a));
        let transforms = scales
            .iter()
            .map(|&st| {
                let t = FeatureTransform::new(
                    s,
                    &format!("transform{st}"),
                    ch[st - 1],
                    config.common_width,
                    config.gate_reduction,
                )?;
                Ok((st, t))
            })
            .collect::<Result<Vec<_>>>()?;
        let correlation = Correlation::new(s, "correlation", config.common_width, config.attention_dim)?;
        let finest = *scales.last().expect("validated non-empty");
        let (_, fine_w) = config.stage_sizes()[finest - 1];
        let head = Linear::new(s, "head", config.common_width * fine_w, config.num_keys, None)?;
        tracing::debug!(params = store.num_params(), "video2roll model built");
        Ok(Video2RollModel {
            config: config.clone(),
            store,
            stem,
            stages,
            transforms,
            correlation,
            head,
        })
    }

    pub fn config(&self) -> &Video2RollConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Outputs of backbone stages 1 to 4 for a `(B, 5, H, W)` batch.
    pub fn backbone(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = leaky_relu(&self.stem.forward(&(x - 0.5)?)?)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Transformed features of the used stages, coarse to fine.
    pub fn feature_transform(&self, stage_features: &[Tensor]) -> Result<Vec<Tensor>> {
        self.transforms
            .iter()
            .map(|(st, t)| t.forward(&stage_features[st - 1]))
            .collect()
    }

    pub fn transforms(&self) -> impl Iterator<Item = (usize, &FeatureTransform)> {
        self.transforms.iter().map(|(s, t)| (*s, t))
    }

    pub fn correlation(&self) -> &Correlation {
        &self.correlation
    }

    /// Logits `(B, K)` for a `(B, 5, H, W)` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (STACK_DEPTH, self.config.input_height, self.config.input_width) {
            return Err(Error::domain(format!(
                "expected stacks of {STACK_DEPTH}x{}x{}, got {c}x{h}x{w}",
                self.config.input_height, self.config.input_width
            )));
        }
        let feats = self.backbone(x)?;
        let fused = feature_refine(&self.feature_transform(&feats)?)?;
        let attended = self.correlation.forward(&fused)?;
        let pooled = attended.mean(2)?.flatten_from(1)?;
        self.head.forward(&pooled)
    }

    /// Raw logits for one frame stack.
    pub fn forward(&self, stack: &FrameStack) -> Result<Vec<f32>> {
        let (d, h, w) = stack.data.dim();
        let x = tensor_from_f32(stack.data.iter().copied().collect(), &[1, d, h, w], self.store.dtype())?;
        to_f32_vec(&self.forward_batch(&x)?)
    }

    pub fn save(&self, path: &Path, history: &Video2RollLog) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, history, &[("model", &self.store)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let model = Self::new(&ck.config_as()?, 0)?;
        model.store.load_values(&ck.subset("model"))?;
        Ok(model)
    }
}

/// Frames `t - 2 ..= t + 2` for every `t` in `range`, each source frame fetched once.
fn stack_batch<S: FrameSource + ?Sized>(frames: &S, centers: &[usize], dtype: DType) -> Result<Tensor> {
    let n = frames.len();
    let mut cache: HashMap<usize, crate::ingest::GrayFrame> = HashMap::new();
    let first = frames.frame(0);
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(centers.len() * STACK_DEPTH * h * w);
    for &t in centers {
        for delta in 0..STACK_DEPTH {
            let idx = (t + delta).saturating_sub(STACK_DEPTH / 2).min(n - 1);
            let f = cache.entry(idx).or_insert_with(|| frames.frame(idx));
            data.extend(f.iter().copied());
        }
    }
    tensor_from_f32(data, &[centers.len(), STACK_DEPTH, h, w], dtype)
}

/// Per-frame key probabilities for a whole frame sequence.
pub fn predict_roll<S: FrameSource + ?Sized>(model: &Video2RollModel, frames: &S) -> Result<ProbRoll> {
    let t_total = frames.len();
    let k = model.config.num_keys;
    let mut data = ndarray::Array2::<f32>::zeros((k, t_total));
    let chunk = model.config.batch_size.max(1);
    let mut start = 0;
    while start < t_total {
        let centers: Vec<usize> = (start..(start + chunk).min(t_total)).collect();
        let x = stack_batch(frames, &centers, model.store.dtype())?;
        let probs = to_f32_vec(&sigmoid(&model.forward_batch(&x)?)?)?;
        for (i, &t) in centers.iter().enumerate() {
            for key in 0..k {
                data[(key, t)] = probs[i * k + key];
            }
        }
        start += chunk;
    }
    ProbRoll::from_array(data)
}

/// A frame sequence with its aligned label roll.
pub struct LabeledClip<'a> {
    pub id: String,
    pub frames: &'a dyn FrameSource,
    pub roll: PianoRoll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Batches per epoch; by default one pass worth of samples.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config(format!("{field}.epochs"), "must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config(format!("{field}.steps_per_epoch"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Video2RollLog {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step of the first epoch.
    pub first_epoch_steps: Vec<f64>,
    /// Epoch whose parameters were kept (highest validation F1).
    pub best_epoch: usize,
    pub num_params: usize,
}

/// Threshold at which validation F1 is measured.
pub const VALIDATION_THRESHOLD: f64 = 0.4;

fn validation_f1(model: &Video2RollModel, clips: &[LabeledClip<'_>]) -> Result<f64> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for clip in clips {
        let pred = binarize(&predict_roll(model, clip.frames)?, VALIDATION_THRESHOLD)?;
        let m = frame_metrics(&pred, &clip.roll)?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
    }
    Ok(crate::metrics::MetricsReport::from_counts(tp, fp, fn_).f1)
}

/// Minimizes binary cross-entropy over class-balanced batches with Adam.
/// With validation clips, the learning rate decays when validation F1 stalls
/// and the parameters of the best-F1 epoch are returned.
pub fn train_video2roll(
    train: &[LabeledClip<'_>],
    val: &[LabeledClip<'_>],
    config: &Video2RollConfig,
    schedule: &TrainSchedule,
) -> Result<(Video2RollModel, Video2RollLog)> {
    schedule.validate("schedule")?;
    let model = Video2RollModel::new(config, schedule.seed)?;
    let mut index = DatasetIndex::empty(config.num_keys);
    let mut clip_of: HashMap<String, usize> = HashMap::new();
    for (i, clip) in train.iter().enumerate() {
        if clip.frames.len() != clip.roll.num_frames() {
            return Err(Error::Alignment(format!(
                "clip {} has {} frames but {} label columns",
                clip.id,
                clip.frames.len(),
                clip.roll.num_frames()
            )));
        }
        if clip_of.insert(clip.id.clone(), i).is_some() {
            return Err(Error::domain(format!("duplicate clip id {}", clip.id)));
        }
        index.add_video(&clip.id, &clip.roll)?;
    }
    let steps = schedule
        .steps_per_epoch
        .unwrap_or_else(|| index.len().div_ceil(config.batch_size));
    let mut batches = balanced_batches(&index, config.batch_size, schedule.seed ^ 0x5eed)?;
    let mut opt = Optimizer::new(model.store.vars(), &config.optimizer)?;
    let mut log = Video2RollLog {
        num_params: model.num_params(),
        ..Video2RollLog::default()
    };
    let mut best: Option<(f64, _)> = None;
    let mut step_no = 0;
    for epoch in 0..schedule.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = batches.next().expect("balanced stream is endless");
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            let mut labels = Vec::with_capacity(batch.len() * config.num_keys);
            for &s in &batch {
                let sample = &index.samples()[s];
                groups.push((clip_of[&sample.video_id], vec![sample.frame_index]));
                labels.extend(index.label_vector(s));
            }
            let mut parts = Vec::with_capacity(groups.len());
            for (clip, centers) in &groups {
                parts.push(stack_batch(train[*clip].frames, centers, model.store.dtype())?);
            }
            let x = Tensor::cat(&parts, 0)?;
            let y = tensor_from_f32(labels, &[batch.len(), config.num_keys], model.store.dtype())?;
            let loss = bce_with_logits(&model.forward_batch(&x)?, &y)?;
            let value = scalar(&loss)?;
            check_finite(value, "video2roll BCE loss", step_no)?;
            opt.step(&loss)?;
            if epoch == 0 {
                log.first_epoch_steps.push(value);
            }
            total += value;
            step_no += 1;
        }
        let train_loss = total / steps as f64;
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(validation_f1(&model, val)?)
        };
        let lr = opt.lr();
        opt.end_epoch(val_f1.map_or(train_loss, |f| -f));
        tracing::info!(epoch, train_loss, ?val_f1, lr, "video2roll epoch");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_f1,
            lr,
        });
        let score = val_f1.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.store.snapshot()?));
            log.best_epoch = epoch;
        }
    }
    if let Some((_, snap)) = best {
        model.store.restore(&snap)?;
    }
    Ok((model, log))
}
