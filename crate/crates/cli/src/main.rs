//! `pianovis`: silent piano video to midi and audio.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use pianovis_core::config::RunConfig;
use pianovis_core::ingest::{decode_video_frames, CropRect, FrameSource};
use pianovis_core::metrics::{frame_metrics, MetricsReport};
use pianovis_core::pipeline::{
    full_pipeline, ingest_run, read_midi_path, render_audio, render_synthetic_dataset, save_roll_png,
    save_spectrogram_png, train_roll2midi_run, train_synth_run, train_video2roll_run, write_midi_path, PipelineModels,
    PipelineOptions, RenderRequest, SYNTH_CHECKPOINT,
};
use pianovis_core::synth::{log_spectrogram, write_wav, ClassicalParams, SynthMode, SynthModels};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "pianovis", version, about = "Silent piano video to midi and audio")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode, crop and align every configured video with its midi.
    Ingest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render synthetic keyboard performances with matching midi files.
    RenderSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Frames per performance at 25 fps.
        #[arg(long, default_value_t = 1500)]
        frames: usize,
        /// Distinct pitches drawn for all performances.
        #[arg(long, default_value_t = 12)]
        pitches: usize,
        #[arg(long, default_value_t = 0.2)]
        occlusion: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage from ingested data.
    Train {
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
    },
    /// Video to midi (and optionally audio) with trained checkpoints.
    Infer {
        #[arg(long)]
        video: PathBuf,
        /// Directory holding the stage checkpoints.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_midi: PathBuf,
        #[arg(long)]
        out_wav: Option<PathBuf>,
        /// Keyboard region as `x,y,width,height` in source pixels.
        #[arg(long, value_parser = parse_crop)]
        crop: Option<CropRect>,
        /// Supplies threshold and synthesis settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Write PNG images of the intermediate rolls and output spectrogram here.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Render a midi file to 16 kHz mono WAV.
    Synth {
        #[arg(long)]
        midi: PathBuf,
        #[arg(long, value_enum, default_value = "classical")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Directory holding the synth checkpoint (deep mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the spectrogram of the result as PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Frame-level metrics of a predicted midi against a reference midi.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        ts: f64,
        #[arg(long)]
        json: bool,
        /// Also write the prediction roll as PNG.
        #[arg(long)]
        png: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Video2roll,
    Roll2midi,
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classical,
    Deep,
}

impl From<Mode> for SynthMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Classical => SynthMode::Classical,
            Mode::Deep => SynthMode::Deep,
        }
    }
}

fn parse_crop(s: &str) -> Result<CropRect, String> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, width, height] => Ok(CropRect { x, y, width, height }),
        _ => Err("expected x,y,width,height".into()),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'static str,
    seed: u64,
    config: Option<&'a RunConfig>,
    outputs: Vec<PathBuf>,
}

/// Records what produced `outputs`, as `manifest-<command>.json` in `dir`.
fn write_manifest(dir: &Path, command: &str, config: Option<&RunConfig>, outputs: Vec<PathBuf>) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        command,
        args: std::env::args().skip(1).collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed: config.map_or(0, |c| c.seed),
        config,
        outputs,
    };
    let path = dir.join(format!("manifest-{command}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Option<RunConfig>> {
    Ok(match path {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = ingest_run(&cfg)?;
            for c in &summary.clips {
                println!("{}: {} frames (trimmed {})", c.id, c.frames, c.offset);
            }
            write_manifest(&cfg.output_dir, "ingest", Some(&cfg), vec![cfg.ingest_dir()])?;
        }
        Command::RenderSynth {
            out,
            count,
            frames,
            pitches,
            occlusion,
            seed,
        } => {
            let req = RenderRequest {
                count,
                frames,
                pitches,
                occlusion,
                seed,
            };
            let clips = render_synthetic_dataset(&out, &req)?;
            let mut listing = String::new();
            for c in &clips {
                listing.push_str(&format!(
                    "[[videos]]\nid = {:?}\nvideo = {:?}\nmidi = {:?}\n\n",
                    c.id,
                    c.video.file_name().unwrap_or_default().to_string_lossy(),
                    c.midi.file_name().unwrap_or_default().to_string_lossy()
                ));
            }
            std::fs::write(out.join("videos.toml"), listing)?;
            println!("wrote {} performances to {}", clips.len(), out.display());
            let mut outputs: Vec<PathBuf> = clips.iter().flat_map(|c| [c.video.clone(), c.midi.clone()]).collect();
            outputs.push(out.join("videos.toml"));
            write_manifest(&out, "render-synth", None, outputs)?;
        }
        Command::Train { stage, config } => {
            let cfg = RunConfig::load(&config)?;
            let (name, log) = match stage {
                Stage::Video2roll => ("video2roll", serde_json::to_value(train_video2roll_run(&cfg)?)?),
                Stage::Roll2midi => ("roll2midi", serde_json::to_value(train_roll2midi_run(&cfg)?)?),
                Stage::Synth => ("synth", serde_json::to_value(train_synth_run(&cfg)?)?),
            };
            let log_path = cfg.checkpoint_dir().join(format!("{name}-log.json"));
            std::fs::write(&log_path, serde_json::to_vec_pretty(&log)?)?;
            println!("trained {name}; log at {}", log_path.display());
            write_manifest(
                &cfg.output_dir,
                &format!("train-{name}"),
                Some(&cfg),
                vec![cfg.checkpoint_dir(), log_path],
            )?;
        }
        Command::Infer {
            video,
            checkpoint,
            out_midi,
            out_wav,
            crop,
            config,
            threshold,
            mode,
            dump_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let threshold = threshold.unwrap_or(cfg.as_ref().map_or(0.4, |c| c.thresholds.binarize));
            if !(0.0..=1.0).contains(&threshold) {
                return Err(pianovis_core::Error::config("threshold", format!("{threshold} is outside [0, 1]")).into());
            }
            let synth_mode = mode
                .map(SynthMode::from)
                .unwrap_or(cfg.as_ref().map_or(SynthMode::Classical, |c| c.synth.mode));
            let with_synth = out_wav.is_some() && synth_mode == SynthMode::Deep;
            let models = PipelineModels::load(&checkpoint, with_synth)?;
            let frames = decode_video_frames(&video, crop).with_context(|| format!("decoding {}", video.display()))?;
            let opts = PipelineOptions {
                threshold,
                synth_mode,
                classical: cfg.as_ref().map(|c| c.synth.classical.clone()).unwrap_or_default(),
                external: cfg.as_ref().and_then(|c| c.synth.external.clone()),
                dump_dir: dump_dir.clone(),
            };
            let out = full_pipeline(&frames, &models, &opts)?;
            write_midi_path(&out_midi, &out.midi)?;
            let mut outputs = vec![out_midi.clone()];
            if let Some(wav) = &out_wav {
                write_wav(wav, &out.audio)?;
                outputs.push(wav.clone());
            }
            outputs.extend(dump_dir);
            println!(
                "{} frames, {} notes -> {}",
                frames.len(),
                out.midi.events.len(),
                out_midi.display()
            );
            write_manifest(&parent_dir(&out_midi), "infer", cfg.as_ref(), outputs)?;
        }
        Command::Synth {
            midi,
            mode,
            out,
            checkpoint,
            config,
            png,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mode = SynthMode::from(mode);
            let models = match (mode, &checkpoint) {
                (SynthMode::Deep, Some(dir)) => Some(SynthModels::load(&dir.join(SYNTH_CHECKPOINT))?),
                (SynthMode::Deep, None) => {
                    return Err(pianovis_core::Error::config("checkpoint", "deep synthesis needs --checkpoint").into())
                }
                _ => None,
            };
            let doc = read_midi_path(&midi)?;
            let roll = doc.to_roll()?;
            let classical = cfg
                .as_ref()
                .map(|c| c.synth.classical.clone())
                .unwrap_or_else(ClassicalParams::default);
            let external = cfg.as_ref().and_then(|c| c.synth.external.as_ref());
            let audio = render_audio(&roll, &doc, mode, models.as_ref(), &classical, external)?;
            write_wav(&out, &audio)?;
            let mut outputs = vec![out.clone()];
            if let Some(p) = png {
                if audio.is_empty() {
                    bail!("cannot draw the spectrogram of empty audio");
                }
                save_spectrogram_png(&p, &log_spectrogram(&audio)?)?;
                outputs.push(p);
            }
            println!("{:.2} s of audio -> {}", audio.duration_secs(), out.display());
            write_manifest(&parent_dir(&out), "synth", cfg.as_ref(), outputs)?;
        }
        Command::Eval {
            pred,
            gt,
            ts,
            json,
            png,
        } => {
            if !(0.0..=1.0).contains(&ts) {
                return Err(pianovis_core::Error::config("ts", format!("{ts} is outside [0, 1]")).into());
            }
            let pred = read_midi_path(&pred)?.to_roll()?;
            let gt = read_midi_path(&gt)?.to_roll()?;
            let frames = pred.num_frames().max(gt.num_frames());
            let pred = pred.pad_frames(frames);
            let mut report: MetricsReport = frame_metrics(&pred, &gt.pad_frames(frames))?;
            report.threshold = Some(ts);
            if let Some(p) = png {
                save_roll_png(&p, pred.to_prob().data())?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "ts={ts} precision={:.4} recall={:.4} accuracy={:.4} f1={:.4}",
                    report.precision, report.recall, report.accuracy, report.f1
                );
                if !report.undefined.is_empty() {
                    println!("undefined (zero denominator): {}", report.undefined.join(", "));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<pianovis_core::Error>() {
                Some(pianovis_core::Error::Config { field, message }) => {
                    eprintln!("error: invalid configuration at `{field}`: {message}")
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
