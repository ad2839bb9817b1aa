//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/exp1"          # relative paths resolve against the config file
//!
//! [[videos]]
//! id = "take1"
//! video = "data/take1.pvraw"        # .pvraw, a directory of PNG frames, or anything ffmpeg reads
//! midi = "data/take1.mid"           # pseudo ground truth
//! crop = { x = 0, y = 140, width = 1280, height = 160 }
//!
//! [split]
//! val_fraction = 0.2
//!
//! [thresholds]
//! binarize = 0.4
//! report = [0.4, 0.5]
//!
//! [video2roll.model]                # see Video2RollConfig
//! [video2roll.schedule]             # epochs, steps_per_epoch, seed
//! [roll2midi.model]
//! [roll2midi.schedule]
//! [synth]
//! mode = "classical"                # or "deep"
//! [synth.classical]
//! [synth.model]
//! [synth.perfnet_schedule]
//! [synth.refiner_schedule]
//! ```
//!
//! Every section is optional except `output_dir`. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::CropRect;
use crate::roll2midi::Roll2MidiConfig;
use crate::synth::{ClassicalParams, ExternalSynth, SynthConfig, SynthMode};
use crate::video2roll::{TrainSchedule, Video2RollConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub videos: Vec<VideoEntry>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub video2roll: Stage<Video2RollConfig>,
    #[serde(default)]
    pub roll2midi: Stage<Roll2MidiConfig>,
    #[serde(default)]
    pub synth: SynthSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub video: PathBuf,
    pub midi: PathBuf,
    #[serde(default)]
    pub crop: Option<CropRect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Trailing fraction of every video held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Probability above which a key counts as pressed in emitted midi.
    pub binarize: f64,
    /// Thresholds reported by evaluation.
    pub report: Vec<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            binarize: 0.4,
            report: vec![0.4, 0.5],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage<M> {
    pub model: M,
    pub schedule: TrainSchedule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub mode: SynthMode,
    pub classical: ClassicalParams,
    pub model: SynthConfig,
    pub perfnet_schedule: TrainSchedule,
    pub refiner_schedule: TrainSchedule,
    /// When set, classical rendering is delegated to this program.
    pub external: Option<ExternalSynth>,
}

fn check_threshold(field: &str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::config(field, format!("{t} is outside [0, 1]")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("").to_string();
            Error::config(
                if field.is_empty() { "<root>".into() } else { field },
                e.to_string().trim(),
            )
        })
    }

    /// Reads, resolves relative paths against the file's directory and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<root>", e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for v in &mut self.videos {
            fix(&mut v.video);
            fix(&mut v.midi);
        }
        if let Some(ext) = &mut self.synth.external {
            fix(&mut ext.soundfont);
        }
    }

    /// Checks every section; errors name the offending key path.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::BTreeSet::new();
        for (i, v) in self.videos.iter().enumerate() {
            let field = format!("videos[{i}]");
            if v.id.is_empty() || v.id.contains(['/', '\\']) {
                return Err(Error::config(
                    format!("{field}.id"),
                    "must be a non-empty name without path separators",
                ));
            }
            if !ids.insert(v.id.as_str()) {
                return Err(Error::config(format!("{field}.id"), format!("duplicate id {}", v.id)));
            }
            if !v.video.exists() {
                return Err(Error::config(
                    format!("{field}.video"),
                    format!("{} does not exist", v.video.display()),
                ));
            }
            if !v.midi.exists() {
                return Err(Error::config(
                    format!("{field}.midi"),
                    format!("{} does not exist", v.midi.display()),
                ));
            }
            if let Some(c) = v.crop {
                if c.width == 0 || c.height == 0 {
                    return Err(Error::config(format!("{field}.crop"), "region is empty"));
                }
            }
        }
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(Error::config("split.val_fraction", "must lie in [0, 1)"));
        }
        check_threshold("thresholds.binarize", self.thresholds.binarize)?;
        for (i, &t) in self.thresholds.report.iter().enumerate() {
            check_threshold(&format!("thresholds.report[{i}]"), t)?;
        }
        self.video2roll.model.validate("video2roll.model")?;
        self.video2roll.schedule.validate("video2roll.schedule")?;
        self.roll2midi.model.validate("roll2midi.model")?;
        self.roll2midi.schedule.validate("roll2midi.schedule")?;
        self.synth.classical.validate("synth.classical")?;
        self.synth.model.validate("synth.model")?;
        self.synth.perfnet_schedule.validate("synth.perfnet_schedule")?;
        self.synth.refiner_schedule.validate("synth.refiner_schedule")?;
        if let Some(ext) = &self.synth.external {
            if !ext.soundfont.exists() {
                return Err(Error::config(
                    "synth.external.soundfont",
                    format!("{} does not exist", ext.soundfont.display()),
                ));
            }
        }
        Ok(())
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.output_dir.join("ingest")
    }
}
