use moodpipe::config::RunConfig;
use moodpipe::corpus::Label;
use moodpipe::harness::{render_table, run_experiment, Manifest, RunSpec};
use moodpipe::metrics::{report_from_predictions, RunInfo};
use moodpipe::pipeline::{Modality, Variant};
use moodpipe::Error;

fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("audio.n_layers", "2"),
        ("audio.filters", "4"),
        ("audio.kernel_width", "3"),
        ("audio.fc_units", "4"),
        ("audio.batch_size", "4"),
        ("dsp.n_mels", "16"),
        ("text.n_layers", "1"),
        ("text.n_heads", "2"),
        ("text.d_model", "8"),
        ("text.d_ff", "16"),
        ("text.max_seq_len", "64"),
        ("text.batch_size", "4"),
        ("fusion.hidden_units", "4"),
        ("fusion.epochs", "2"),
        ("augment.total", "8"),
        ("augment.fusion_total", "6"),
        ("synth.n_train_dep", "2"),
        ("synth.n_train_non", "2"),
        ("synth.n_dev_dep", "1"),
        ("synth.n_dev_non", "2"),
        ("seed", "5"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn nine_runs_give_nine_rows_and_rerun_identically() {
    let manifest = Manifest::all_runs(tiny());
    let exp = run_experiment(&manifest).unwrap();
    let bundle = exp.bundle();
    assert_eq!(bundle.reports.len(), 9);
    let table = bundle.table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("Model"));
    for (line, name) in lines[1..].iter().zip([
        "CNN-Full", "CNN-Topic", "CNN-Augm", "Trf-Full", "Trf-Topic", "Trf-Augm", "Trf+CNN-Full",
        "Trf+CNN-Topic", "Trf+CNN-Augm",
    ]) {
        assert!(line.starts_with(name), "{line}");
    }
    assert!(bundle.reports.iter().all(|r| r.n_samples == 3 && r.seed == 5));
    assert!(bundle.leakage.iter().all(|a| a.is_clean()));
    assert_eq!(exp.audio.len(), 3);
    assert_eq!(exp.text.len(), 3);
    assert_eq!(exp.fusion.len(), 3);

    let again = run_experiment(&manifest).unwrap();
    assert_eq!(again.bundle().to_json(), bundle.to_json());
}

#[test]
fn manifest_round_trips_and_rejects_bad_runs() {
    let text = "seed = 9\nrun = audio:full\nrun = fusion:augm  # late fusion\n";
    let m = Manifest::parse(text, "m.txt", RunConfig::default()).unwrap();
    assert_eq!(m.config.seed, 9);
    assert_eq!(
        m.runs,
        vec![
            RunSpec { modality: Modality::Audio, variant: Variant::Full },
            RunSpec { modality: Modality::Fusion, variant: Variant::Augm },
        ]
    );
    assert_eq!(Manifest::parse(&m.render(), "r", RunConfig::default()).unwrap(), m);
    assert_eq!(Manifest::parse("run = all\n", "a", RunConfig::default()).unwrap().runs.len(), 9);
    assert!(Manifest::parse("run = audio\n", "x", RunConfig::default()).is_err());
    assert!(Manifest::parse("seed = 1\n", "x", RunConfig::default()).is_err());
}

#[test]
fn stage_failure_names_the_stage() {
    let mut c = tiny();
    c.data_dir = Some("/nonexistent/corpus".into());
    let m = Manifest { config: c, runs: vec![RunSpec { modality: Modality::Text, variant: Variant::Full }] };
    match run_experiment(&m) {
        Err(Error::Stage { stage, .. }) => assert_eq!(stage, "prep"),
        other => panic!("expected a prep failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn table_rounds_to_two_decimals() {
    // 10 positives: 9 found, one false alarm.
    let labels: Vec<Label> = (0..20).map(|i| if i < 10 { Label::Depressed } else { Label::NotDepressed }).collect();
    let mut preds = labels.clone();
    preds[0] = Label::NotDepressed;
    preds[10] = Label::Depressed;
    let info = RunInfo { modality: Modality::Fusion, variant: Variant::Augm, seed: 0, fingerprint: "x" };
    let r = report_from_predictions(&labels, &preds, &info).unwrap();
    let table = render_table(&[r]);
    assert_eq!(table.lines().nth(1).unwrap(), "Trf+CNN-Augm  Text+Audio     0.90  0.90       0.90");
}
