use std::process::{Command, Output};

fn moodpipe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moodpipe"))
        .args(args)
        .env_remove("MOODPIPE_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const TINY: &[&str] = &[
    "--set", "synth.n_train_dep=2",
    "--set", "synth.n_train_non=2",
    "--set", "synth.n_dev_dep=1",
    "--set", "synth.n_dev_non=1",
];

#[test]
fn help_exits_zero_everywhere() {
    for sub in ["synth", "prep", "topics", "augment", "train", "eval", "report"] {
        let o = moodpipe(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(code(&moodpipe(&["--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&moodpipe(&["frobnicate"])), 1);
    assert_eq!(code(&moodpipe(&["train", "--modality", "bogus", "--variant", "full"])), 1);
    assert_eq!(code(&moodpipe(&["topics", "--no-such-flag"])), 1);
    assert_eq!(code(&moodpipe(&["--set", "audio.colour=red", "topics"])), 1);
    assert_eq!(code(&moodpipe(&[])), 1);
}

#[test]
fn runtime_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = moodpipe(&["--data", missing.to_str().unwrap(), "topics"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("not a corpus directory"));
}

#[test]
fn synth_writes_corpus_and_prints_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let mut args = vec!["synth", "--seed", "7", "--no-audio", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    let o = moodpipe(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed = 7"));
    for f in ["labels.csv", "train_split.txt", "dev_split.txt", "300_TRANSCRIPT.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn flags_win_over_config_file_and_env_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# base\nseed = 3\ntopics.window = 2\n").unwrap();
    let mut args = vec!["--config", cfg.to_str().unwrap(), "--seed", "11", "topics"];
    args.extend_from_slice(TINY);
    let o = moodpipe(&args);
    assert_eq!(code(&o), 0);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seed = 11") && err.contains("topics.window = 2"), "{err}");

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_moodpipe"));
    let o = cmd.env("MOODPIPE_SEED", "42").arg("topics").args(TINY).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed = 42"));
}

#[test]
fn train_text_prints_report() {
    let mut args = vec![
        "train", "--modality", "text", "--variant", "full", "--seed", "1",
        "--set", "text.epochs=1",
    ];
    args.extend_from_slice(TINY);
    let o = moodpipe(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("\"config_fingerprint\""));
    assert!(out.contains("Trf-Full"));
}
