#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unitts::optim::LrSchedule;
use unitts_cli::PipelineConfig;

pub fn repo_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json");
    PipelineConfig::load(&path).unwrap()
}

/// The bundled config shrunk to a few seconds of work.
pub fn tiny_config(workdir: &Path) -> PipelineConfig {
    let mut cfg = repo_config();
    cfg.workdir = workdir.to_path_buf();
    cfg.synthetic.as_mut().unwrap().texts_per_pair = 4;
    cfg.split.held_out_texts_per_language = 1;
    cfg.codebook.restarts = 2;
    cfg.t2u.embed_dim = 16;
    cfg.t2u.encoder_layers = 1;
    cfg.t2u.decoder_layers = 1;
    cfg.t2u.ffn_dim = 32;
    cfg.t2u.epochs = 3;
    cfg.vocoder.channels = 16;
    cfg.vocoder.epochs = 2;
    cfg.vocoder.segment_frames = Some(8);
    cfg.vocoder.stft_windows = vec![64, 128];
    cfg.vocoder.schedule = LrSchedule::Constant;
    cfg
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

pub fn unitts(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unitts"))
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

/// Run and insist on success, returning stdout.
pub fn ok(config: &Path, args: &[&str]) -> String {
    let out = unitts(config, args);
    assert!(
        out.status.success(),
        "unitts {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub const STAGES: [&str; 8] = [
    "gen-corpus",
    "build-vocab",
    "train-codebook",
    "encode-units",
    "align",
    "train-t2u",
    "train-vocoder",
    "eval",
];
