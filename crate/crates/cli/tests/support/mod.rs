//! Drives the `pianovis` binary end to end on a tiny synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn pianovis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pianovis"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("pianovis runs")
}

/// Runs `pianovis` and panics with its stderr unless it exits 0.
pub fn pianovis_ok(args: &[&str]) -> Output {
    let out = pianovis(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

const RUN_CONFIG: &str = r#"seed = 7
output_dir = "out"

[[videos]]
id = "synth_0"
video = "data/synth_0.pvraw"
midi = "data/synth_0.mid"

[video2roll.model]
batch_size = 4
[video2roll.schedule]
epochs = 1
steps_per_epoch = 2
[roll2midi.model]
batch_size = 2
[roll2midi.schedule]
epochs = 1
steps_per_epoch = 1
"#;

/// Renders one short performance, ingests it and trains both vision stages
/// for a few steps. Returns the rendered video and the checkpoint directory.
pub fn trained_pipeline(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    pianovis_ok(&[
        "render-synth",
        "--out",
        path_str(&data),
        "--frames",
        "200",
        "--pitches",
        "4",
        "--seed",
        "1",
    ]);
    let config = dir.join("run.toml");
    std::fs::write(&config, RUN_CONFIG).unwrap();
    let config = path_str(&config);
    pianovis_ok(&["ingest", "--config", config]);
    pianovis_ok(&["train", "video2roll", "--config", config]);
    pianovis_ok(&["train", "roll2midi", "--config", config]);
    (data.join("synth_0.pvraw"), dir.join("out").join("checkpoints"))
}
