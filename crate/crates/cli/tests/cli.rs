mod common;

use std::fs;

use common::{ok, tiny_config, unitts, write_config, STAGES};
use unitts::corpus::read_wav;
use unitts_cli::pipeline::{T2USplit, T2U_SPLIT, UNITS};

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn out_of_order_command_names_the_missing_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config(&tmp.path().join("work")));
    ok(&cfg, &["gen-corpus"]);
    let out = unitts(&cfg, &["train-t2u"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("run train-codebook first"), "{}", stderr(&out));
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&unitts(&missing, &["gen-corpus"])), 2);
    let cfg = write_config(tmp.path(), &tiny_config(&tmp.path().join("work")));
    assert_eq!(code(&unitts(&cfg, &["no-such-command"])), 2);

    let mut text: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    text["surprise"] = serde_json::json!(1);
    fs::write(&cfg, text.to_string()).unwrap();
    assert_eq!(code(&unitts(&cfg, &["gen-corpus"])), 2);
}

#[test]
fn divergent_training_exits_with_numerical_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = tiny_config(&tmp.path().join("work"));
    c.t2u.lr = 1e30;
    c.t2u.clip_norm = None;
    let cfg = write_config(tmp.path(), &c);
    for s in &STAGES[..5] {
        ok(&cfg, &[s]);
    }
    let out = unitts(&cfg, &["train-t2u"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn pipeline_reruns_staleness_and_synthesis() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    let base = tiny_config(&work);
    let cfg = write_config(tmp.path(), &base);
    for s in STAGES {
        ok(&cfg, &[s]);
    }

    // Up-to-date commands do nothing.
    let before = fs::read(work.join("t2u.ckpt")).unwrap();
    assert!(ok(&cfg, &["train-t2u"]).contains("up to date"));
    assert_eq!(fs::read(work.join("t2u.ckpt")).unwrap(), before);
    assert!(!ok(&cfg, &["--force", "train-t2u"]).contains("up to date"));
    assert_eq!(fs::read(work.join("t2u.ckpt")).unwrap(), before);

    // Output length follows the predicted durations.
    let wav = tmp.path().join("out.wav");
    let stdout = ok(&cfg, &["synthesize", "--text", "abc", "--language", "L1", "--speaker", "s2", "--out", wav.to_str().unwrap()]);
    let w = read_wav(&wav).unwrap();
    let frames: usize = stdout.split(", ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert_eq!(w.len(), frames * base.features.hop);
    let out = unitts(&cfg, &["synthesize", "--text", "abc", "--language", "L1", "--speaker", "s9", "--out", wav.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // A native speaker is not a cross-lingual target.
    let out = unitts(&cfg, &["cross-lingual", "--text-lang", "L1", "--speaker", "s1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    // Edited artifacts are refused downstream.
    let units = fs::read_to_string(work.join(UNITS)).unwrap();
    fs::write(work.join(UNITS), units.replacen("[", "[ ", 1)).unwrap();
    let out = unitts(&cfg, &["--force", "train-t2u"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("modified"), "{}", stderr(&out));
    fs::write(work.join(UNITS), units).unwrap();

    // A different config makes every earlier artifact stale.
    let mut changed = base.clone();
    changed.t2u.lr *= 2.0;
    let cfg2 = write_config(tmp.path(), &changed);
    let out = unitts(&cfg2, &["train-t2u"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("stale artifact"), "{}", stderr(&out));
}

#[test]
fn low_resource_cap_limits_paired_frames() {
    let tmp = tempfile::tempdir().unwrap();
    let work = tmp.path().join("work");
    let cfg = write_config(tmp.path(), &tiny_config(&work));
    for s in &STAGES[..5] {
        ok(&cfg, &[s]);
    }
    ok(&cfg, &["train-t2u"]);
    let full: T2USplit = serde_json::from_str(&fs::read_to_string(work.join(T2U_SPLIT)).unwrap()).unwrap();
    ok(&cfg, &["train-t2u", "--max-paired-per-language", "60"]);
    let capped: T2USplit = serde_json::from_str(&fs::read_to_string(work.join(T2U_SPLIT)).unwrap()).unwrap();
    assert!(!capped.train.is_empty());
    assert!(capped.train.len() < full.train.len());
    assert!(capped.train.iter().all(|id| full.train.contains(id)));
    assert_eq!(capped.held_out, full.held_out);
}
