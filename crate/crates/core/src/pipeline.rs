//! End-to-end composition of the three stages, plus the file-based run
//! steps (ingest, per-stage training, synthetic data) that the command line drives.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, VideoEntry};
use crate::error::{Error, Result};
use crate::ingest::{
    align_dataset, decode_video_frames, write_raw_video, DatasetIndex, FrameSequence, FrameSource, FrameWindow,
};
use crate::midi::{read_midi_file, write_midi_file, MidiDocument};
use crate::roll::{binarize, events_from_roll, PianoRoll, ProbRoll, DEFAULT_VELOCITY};
use crate::roll2midi::{refine_sequence, train_gan, GanLog, Roll2MidiModel};
use crate::synth::{
    classical_pairs, classical_synth, log_spectrogram, synth_pairs, synthesize, train_perfnet, train_refiner,
    AudioClip, ClassicalParams, ExternalSynth, Spectrogram, SynthHistory, SynthMode, SynthModels, SynthPair,
};
use crate::synthetic::{pick_pitches, random_performance, PerformanceParams};
use crate::video2roll::{predict_roll, train_video2roll, LabeledClip, Video2RollLog, Video2RollModel};

pub const VIDEO2ROLL_CHECKPOINT: &str = "video2roll.safetensors";
pub const ROLL2MIDI_CHECKPOINT: &str = "roll2midi.safetensors";
pub const SYNTH_CHECKPOINT: &str = "synth.safetensors";
pub const DATASET_INDEX: &str = "dataset.json";

fn checkpoint_path(dir: &Path, file: &str, field: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::config(field, format!("no checkpoint at {}", path.display())))
    }
}

pub struct PipelineModels {
    pub video2roll: Video2RollModel,
    pub roll2midi: Roll2MidiModel,
    pub synth: Option<SynthModels>,
}

impl PipelineModels {
    /// Loads the stage checkpoints from `dir`; synth models only when `with_synth`.
    pub fn load(dir: &Path, with_synth: bool) -> Result<Self> {
        let video2roll = Video2RollModel::load(&checkpoint_path(dir, VIDEO2ROLL_CHECKPOINT, "checkpoint.video2roll")?)?;
        let roll2midi = Roll2MidiModel::load(&checkpoint_path(dir, ROLL2MIDI_CHECKPOINT, "checkpoint.roll2midi")?)?;
        let synth = if with_synth {
            Some(SynthModels::load(&checkpoint_path(
                dir,
                SYNTH_CHECKPOINT,
                "checkpoint.synth",
            )?)?)
        } else {
            None
        };
        Ok(PipelineModels {
            video2roll,
            roll2midi,
            synth,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOptions {
    pub threshold: f64,
    pub synth_mode: SynthMode,
    pub classical: ClassicalParams,
    pub external: Option<ExternalSynth>,
    /// Directory for PNG dumps of intermediate rolls and the output spectrogram.
    pub dump_dir: Option<PathBuf>,
}

pub struct PipelineOutput {
    pub prob: ProbRoll,
    pub refined: ProbRoll,
    pub roll: PianoRoll,
    pub midi: MidiDocument,
    pub audio: AudioClip,
}

/// Frames to key probabilities, adversarial refinement, thresholding, midi and audio.
pub fn full_pipeline<S: FrameSource + ?Sized>(
    frames: &S,
    models: &PipelineModels,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    if frames.is_empty() {
        return Err(Error::domain("video has no frames"));
    }
    let prob = predict_roll(&models.video2roll, frames)?;
    let refined = refine_sequence(&models.roll2midi, &prob)?;
    let roll = binarize(&refined, opts.threshold)?;
    let midi = MidiDocument::from_roll(&roll);
    let audio = render_audio(
        &roll,
        &midi,
        opts.synth_mode,
        models.synth.as_ref(),
        &opts.classical,
        opts.external.as_ref(),
    )?;
    if let Some(dir) = &opts.dump_dir {
        std::fs::create_dir_all(dir)?;
        save_roll_png(&dir.join("prob_roll.png"), prob.data())?;
        save_roll_png(&dir.join("refined_roll.png"), refined.data())?;
        save_roll_png(&dir.join("roll.png"), roll.to_prob().data())?;
        if !audio.is_empty() {
            save_spectrogram_png(&dir.join("spectrogram.png"), &log_spectrogram(&audio)?)?;
        }
    }
    Ok(PipelineOutput {
        prob,
        refined,
        roll,
        midi,
        audio,
    })
}

/// Audio for a roll; classical rendering goes through `external` when given.
pub fn render_audio(
    roll: &PianoRoll,
    midi: &MidiDocument,
    mode: SynthMode,
    models: Option<&SynthModels>,
    classical: &ClassicalParams,
    external: Option<&ExternalSynth>,
) -> Result<AudioClip> {
    match (mode, external) {
        (SynthMode::Classical, Some(ext)) => ext.render(midi),
        _ => synthesize(roll, mode, models, classical),
    }
}

/// Keys on rows with the highest pitch at the top; white is 1.
pub fn save_roll_png(path: &Path, roll: ArrayView2<'_, f32>) -> Result<()> {
    let (k, t) = roll.dim();
    let img = GrayImage::from_fn(t.max(1) as u32, k.max(1) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if x < t && y < k {
            Luma([(roll[(k - 1 - y, x)].clamp(0.0, 1.0) * 255.0).round() as u8])
        } else {
            Luma([0])
        }
    });
    img.save(path)?;
    Ok(())
}

/// Low frequencies at the bottom; brightness scaled to the largest entry.
pub fn save_spectrogram_png(path: &Path, spec: &Spectrogram) -> Result<()> {
    let data = spec.data();
    let (f, t) = data.dim();
    let max = data.iter().cloned().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let img = GrayImage::from_fn(t.max(1) as u32, f.max(1) as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if x < t && y < f {
            Luma([(data[(f - 1 - y, x)] * scale).round() as u8])
        } else {
            Luma([0])
        }
    });
    img.save(path)?;
    Ok(())
}

pub fn read_midi_path(path: &Path) -> Result<MidiDocument> {
    let read = read_midi_file(&std::fs::read(path)?)?;
    for w in &read.warnings {
        tracing::warn!(file = %path.display(), "{w}");
    }
    Ok(read.document)
}

pub fn write_midi_path(path: &Path, doc: &MidiDocument) -> Result<()> {
    std::fs::write(path, write_midi_file(doc)?)?;
    Ok(())
}

/// Frames of a clip with their label columns.
pub type LabeledWindow<'a> = (FrameWindow<&'a FrameSequence>, PianoRoll);

/// An aligned clip produced by [`ingest_run`].
pub struct IngestedClip {
    pub id: String,
    pub frames: FrameSequence,
    pub roll: PianoRoll,
}

impl IngestedClip {
    /// Frame count of the training part; the rest is validation.
    pub fn train_len(&self, val_fraction: f64) -> usize {
        let n = self.roll.num_frames();
        n - (n as f64 * val_fraction).floor() as usize
    }

    /// Training and validation parts, each as frames with matching labels.
    pub fn split(&self, val_fraction: f64) -> Result<(LabeledWindow<'_>, Option<LabeledWindow<'_>>)> {
        let n = self.roll.num_frames();
        let cut = self.train_len(val_fraction);
        let train = (FrameWindow::new(&self.frames, 0, cut)?, self.roll.slice_frames(0, cut));
        let val = if cut < n {
            Some((
                FrameWindow::new(&self.frames, cut, n - cut)?,
                self.roll.slice_frames(cut, n),
            ))
        } else {
            None
        };
        Ok((train, val))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub clips: Vec<IngestedInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestedInfo {
    pub id: String,
    pub frames: usize,
    /// Leading silent frames dropped during alignment.
    pub offset: usize,
}

/// Decodes, crops and aligns every configured video, writing the aligned
/// frames (`<id>.pvraw`), labels (`<id>.mid`) and the dataset index into the ingest directory.
pub fn ingest_run(config: &RunConfig) -> Result<IngestSummary> {
    let dir = config.ingest_dir();
    std::fs::create_dir_all(&dir)?;
    let mut index = DatasetIndex::empty(crate::roll::NUM_KEYS);
    let mut summary = IngestSummary::default();
    for VideoEntry { id, video, midi, crop } in &config.videos {
        let frames = decode_video_frames(video, *crop)?;
        let doc = read_midi_path(midi)?;
        let aligned = align_dataset(&frames, &doc).map_err(|e| Error::Alignment(format!("{id}: {e}")))?;
        write_raw_video(&dir.join(format!("{id}.pvraw")), &aligned.frames)?;
        write_midi_path(&dir.join(format!("{id}.mid")), &MidiDocument::from_roll(&aligned.roll))?;
        index.add_video(id, &aligned.roll)?;
        tracing::info!(
            id,
            frames = aligned.roll.num_frames(),
            offset = aligned.offset,
            "ingested"
        );
        summary.clips.push(IngestedInfo {
            id: id.clone(),
            frames: aligned.roll.num_frames(),
            offset: aligned.offset,
        });
    }
    index.save_json(&dir.join(DATASET_INDEX))?;
    Ok(summary)
}

/// Reads back the output of [`ingest_run`].
pub fn load_ingested(config: &RunConfig) -> Result<Vec<IngestedClip>> {
    let dir = config.ingest_dir();
    if config.videos.is_empty() {
        return Err(Error::config("videos", "no videos configured"));
    }
    config
        .videos
        .iter()
        .map(|v| {
            let video = dir.join(format!("{}.pvraw", v.id));
            if !video.is_file() {
                return Err(Error::config(
                    "output_dir",
                    format!("{} is missing; run ingest first", video.display()),
                ));
            }
            let frames = decode_video_frames(&video, None)?;
            let roll = read_midi_path(&dir.join(format!("{}.mid", v.id)))?.to_roll()?;
            if roll.num_frames() != frames.len() {
                return Err(Error::Alignment(format!(
                    "{}: {} frames but {} label columns",
                    v.id,
                    frames.len(),
                    roll.num_frames()
                )));
            }
            Ok(IngestedClip {
                id: v.id.clone(),
                frames,
                roll,
            })
        })
        .collect()
}

fn labeled<'a>(parts: &'a [(String, LabeledWindow<'_>)]) -> Vec<LabeledClip<'a>> {
    parts
        .iter()
        .map(|(id, (frames, roll))| LabeledClip {
            id: id.clone(),
            frames,
            roll: roll.clone(),
        })
        .collect()
}

pub fn train_video2roll_run(config: &RunConfig) -> Result<Video2RollLog> {
    let clips = load_ingested(config)?;
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    for c in &clips {
        let (t, v) = c.split(config.split.val_fraction)?;
        train_parts.push((c.id.clone(), t));
        val_parts.extend(v.map(|w| (format!("{}:val", c.id), w)));
    }
    let (train, val) = (labeled(&train_parts), labeled(&val_parts));
    let (model, log) = train_video2roll(&train, &val, &config.video2roll.model, &config.video2roll.schedule)?;
    std::fs::create_dir_all(config.checkpoint_dir())?;
    model.save(&config.checkpoint_dir().join(VIDEO2ROLL_CHECKPOINT), &log)?;
    Ok(log)
}

/// Trains the refiner on the trained classifier's probability rolls for the training part of every clip.
pub fn train_roll2midi_run(config: &RunConfig) -> Result<GanLog> {
    let clips = load_ingested(config)?;
    let v2r = Video2RollModel::load(&checkpoint_path(
        &config.checkpoint_dir(),
        VIDEO2ROLL_CHECKPOINT,
        "checkpoint.video2roll",
    )?)?;
    let mut probs = Vec::new();
    let mut gts = Vec::new();
    for c in &clips {
        let cut = c.train_len(config.split.val_fraction);
        probs.push(predict_roll(&v2r, &FrameWindow::new(&c.frames, 0, cut)?)?);
        gts.push(c.roll.slice_frames(0, cut));
    }
    let (model, log) = train_gan(&probs, &gts, &config.roll2midi.model, &config.roll2midi.schedule)?;
    std::fs::create_dir_all(config.checkpoint_dir())?;
    model.save(&config.checkpoint_dir().join(ROLL2MIDI_CHECKPOINT), &log)?;
    Ok(log)
}

/// Trains PerfNet on ground-truth rolls against the classical (or external)
/// rendering of those rolls. The refiner then learns from PerfNet estimates of
/// the predicted rolls when both vision checkpoints exist, and of the ground
/// truth otherwise.
pub fn train_synth_run(config: &RunConfig) -> Result<SynthHistory> {
    let clips = load_ingested(config)?;
    let s = &config.synth;
    let bins = s.model.bins;
    let vision = PipelineModels::load(&config.checkpoint_dir(), false).ok();
    let (mut gt_train, mut gt_val, mut pred_train, mut pred_val) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in &clips {
        let audio = render_audio(
            &c.roll,
            &MidiDocument::from_roll(&c.roll),
            SynthMode::Classical,
            None,
            &s.classical,
            s.external.as_ref(),
        )?;
        let gt_pairs = synth_pairs(&c.roll, &audio, bins)?;
        let n_train = c.train_len(config.split.val_fraction) / crate::synth::MIDI_WINDOW;
        let pred_pairs: Vec<SynthPair> = match &vision {
            Some(models) => {
                let prob = refine_sequence(&models.roll2midi, &predict_roll(&models.video2roll, &c.frames)?)?;
                let pred = binarize(&prob, config.thresholds.binarize)?;
                gt_pairs
                    .iter()
                    .enumerate()
                    .map(|(w, p)| SynthPair {
                        midi: pred.slice_frames(w * crate::synth::MIDI_WINDOW, (w + 1) * crate::synth::MIDI_WINDOW),
                        target: p.target.clone(),
                    })
                    .collect()
            }
            None => gt_pairs.clone(),
        };
        for (i, (g, p)) in gt_pairs.into_iter().zip(pred_pairs).enumerate() {
            if i < n_train.max(1) {
                gt_train.push(g);
                pred_train.push(p);
            } else {
                gt_val.push(g);
                pred_val.push(p);
            }
        }
    }
    let mut models = SynthModels::new(&s.model, s.perfnet_schedule.seed)?;
    let perfnet = train_perfnet(&mut models, &gt_train, &gt_val, &s.perfnet_schedule)?;
    let refiner = train_refiner(&mut models, &pred_train, &pred_val, &s.refiner_schedule)?;
    let history = SynthHistory {
        perfnet: Some(perfnet),
        refiner: Some(refiner),
    };
    std::fs::create_dir_all(config.checkpoint_dir())?;
    models.save(&config.checkpoint_dir().join(SYNTH_CHECKPOINT), &history)?;
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRequest {
    pub count: usize,
    pub frames: usize,
    pub pitches: usize,
    pub occlusion: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderedClip {
    pub id: String,
    pub video: PathBuf,
    pub midi: PathBuf,
}

/// Writes synthetic performances (`synth_<i>.pvraw` and `synth_<i>.mid`)
/// drawing on one shared random pitch set.
pub fn render_synthetic_dataset(out_dir: &Path, req: &RenderRequest) -> Result<Vec<RenderedClip>> {
    std::fs::create_dir_all(out_dir)?;
    let pitches = pick_pitches(req.pitches, req.seed)?;
    (0..req.count)
        .map(|i| {
            let seed = req.seed.wrapping_add(1 + i as u64);
            let roll = random_performance(&pitches, req.frames, &PerformanceParams::default(), seed)?;
            let video = crate::ingest::render_synthetic_performance(&roll, req.occlusion, seed)?;
            let id = format!("synth_{i}");
            let video_path = out_dir.join(format!("{id}.pvraw"));
            let midi_path = out_dir.join(format!("{id}.mid"));
            write_raw_video(&video_path, &video)?;
            write_midi_path(&midi_path, &MidiDocument::from_roll(&roll))?;
            Ok(RenderedClip {
                id,
                video: video_path,
                midi: midi_path,
            })
        })
        .collect()
}

/// Classical rendering of every window-aligned roll, as synth training pairs.
pub fn classical_training_pairs(rolls: &[PianoRoll], params: &ClassicalParams, bins: usize) -> Result<Vec<SynthPair>> {
    let mut out = Vec::new();
    for r in rolls {
        out.extend(classical_pairs(r, params, bins)?);
    }
    Ok(out)
}

/// Classical audio of a roll at the default velocity.
pub fn classical_audio(roll: &PianoRoll, params: &ClassicalParams) -> Result<AudioClip> {
    classical_synth(&events_from_roll(roll, DEFAULT_VELOCITY), roll.num_frames(), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn roll_png_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.png");
        let mut data = Array2::<f32>::zeros((88, 4));
        data[(87, 1)] = 1.0;
        save_roll_png(&path, data.view()).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (4, 88));
        assert_eq!(img.get_pixel(1, 0).0, [255]);
        assert_eq!(img.get_pixel(0, 0).0, [0]);
    }

    #[test]
    fn split_pairs_every_frame_with_a_label() {
        let mut frames = FrameSequence::new(2, 3);
        for t in 0..10 {
            frames.push(Array2::from_elem((2, 3), t as f32 / 10.0).view()).unwrap();
        }
        let clip = IngestedClip {
            id: "c".into(),
            frames,
            roll: PianoRoll::zeros(88, 10),
        };
        let ((train, train_roll), val) = clip.split(0.25).unwrap();
        let (val, val_roll) = val.unwrap();
        assert_eq!((train.len(), train_roll.num_frames()), (8, 8));
        assert_eq!((val.len(), val_roll.num_frames()), (2, 2));
        assert_eq!(val.frame(0), clip.frames.frame(8));
        assert!(clip.split(0.0).unwrap().1.is_none());
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        match PipelineModels::load(dir.path(), false) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "checkpoint.video2roll"),
            _ => panic!("expected a config error"),
        }
    }

    #[test]
    fn synthetic_dataset_files() {
        let dir = tempfile::tempdir().unwrap();
        let req = RenderRequest {
            count: 2,
            frames: 30,
            pitches: 3,
            occlusion: 0.2,
            seed: 1,
        };
        let clips = render_synthetic_dataset(dir.path(), &req).unwrap();
        assert_eq!(clips.len(), 2);
        let frames = decode_video_frames(&clips[1].video, None).unwrap();
        assert_eq!(frames.len(), 30);
        let roll = read_midi_path(&clips[1].midi).unwrap().to_roll().unwrap();
        assert_eq!(roll.num_frames(), 30);
    }
}
