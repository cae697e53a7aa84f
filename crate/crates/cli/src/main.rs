use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moodpipe::audio_model::CnnParams;
use moodpipe::augment::{augment_corpus, leaked_sources, write_augmented};
use moodpipe::config::{Preset, RunConfig};
use moodpipe::corpus::Split;
use moodpipe::fusion::{FusionParams, FusionPipeline};
use moodpipe::harness::{load_data, run_experiment, Manifest, ReportBundle, RunSpec};
use moodpipe::metrics::{evaluate, fingerprint, Classifier, EvalReport, RunInfo};
use moodpipe::pipeline::{examples, prepare, Modality, Variant};
use moodpipe::tensor::checkpoint;
use moodpipe::text_model::TransformerParams;
use moodpipe::topics::TopicStats;
use moodpipe::{Error, Result};

#[derive(Parser)]
#[command(name = "moodpipe", version, about = "Multi-modal depression detection pipeline")]
struct Cli {
    /// `key = value` file merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration: large or desk.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Extra `key=value` overrides; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Corpus directory; the synthetic corpus is generated in memory when absent.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true, env = "MOODPIPE_SEED")]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Skip WAV rendering.
        #[arg(long)]
        no_audio: bool,
    },
    /// Extract log-mel spectrograms of participant speech.
    Prep {
        #[arg(long)]
        out: PathBuf,
    },
    /// Label topic segments and print coverage statistics.
    Topics {
        /// Also write one segment table per participant.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the augmented training set.
    Augment(AugmentArgs),
    /// Train one model and report on the development split.
    Train(TrainArgs),
    /// Evaluate saved models on the development split.
    Eval {
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        variant: Variant,
        /// Directory written by `train --out`.
        #[arg(long)]
        models: PathBuf,
    },
    /// Run a manifest, or render saved JSON reports as a table.
    Report {
        /// Manifest to run (config lines plus `run = modality:variant`).
        #[arg(long, conflicts_with = "input")]
        manifest: Option<PathBuf>,
        /// `reports.json` to render.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n_dep: Option<usize>,
    #[arg(long)]
    n_non: Option<usize>,
    /// Balanced target size when per-class counts are not given.
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    modality: Modality,
    #[arg(long)]
    variant: Variant,
    /// Fusion grid: none, desk or large.
    #[arg(long)]
    grid: Option<String>,
    /// Directory for checkpoints, reports and grid results.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(cli.preset.parse::<Preset>()?);
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set `{kv}`: expected KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(d) = &cli.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    match &cli.command {
        Command::Augment(a) => {
            if let Some(m) = a.m {
                cfg.augment_m = m;
            }
            if a.n_dep.is_some() || a.n_non.is_some() {
                cfg.augment_n_dep = a.n_dep;
                cfg.augment_n_non = a.n_non;
            }
            if let Some(t) = a.total {
                cfg.augment_total = t;
            }
        }
        Command::Train(t) => {
            if let Some(g) = &t.grid {
                cfg.set("fusion.grid", g)?;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_config(cfg: &RunConfig) {
    eprintln!("# effective configuration");
    eprint!("{}", cfg.render());
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn model_path(dir: &Path, modality: Modality, variant: Variant) -> PathBuf {
    dir.join(format!("{modality}-{variant}.ckpt"))
}

fn print_bundle(bundle: &ReportBundle) {
    for a in &bundle.leakage {
        eprintln!(
            "leakage audit {}: {}",
            a.run,
            if a.is_clean() { "clean".to_string() } else { format!("{a:?}") }
        );
    }
    print!("{}", bundle.to_json());
    print!("{}", bundle.table());
}

fn run_manifest(manifest: &Manifest, out: Option<&Path>) -> Result<()> {
    print_config(&manifest.config);
    let exp = run_experiment(manifest)?;
    let bundle = exp.bundle();
    print_bundle(bundle);
    if let Some(dir) = out {
        write(&dir.join("reports.json"), &bundle.to_json())?;
        write(&dir.join("table.txt"), &bundle.table())?;
        write(&dir.join("manifest.txt"), &manifest.render())?;
        for (v, g) in &exp.grids {
            write(&dir.join(format!("grid-{v}.tsv")), &g.to_tsv())?;
        }
        for (v, p) in &exp.audio {
            p.save(&model_path(dir, Modality::Audio, *v))?;
        }
        for (v, p) in &exp.text {
            p.save(&model_path(dir, Modality::Text, *v))?;
        }
        for (v, p) in &exp.fusion {
            p.save(&model_path(dir, Modality::Fusion, *v))?;
        }
    }
    Ok(())
}

fn run(cli: Cli, cfg: RunConfig) -> Result<()> {
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global()
            .map_err(|e| Error::config(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth { out, no_audio } => {
            print_config(&cfg);
            let mut s = cfg.synth_config();
            s.render_audio = !no_audio;
            let corpus = moodpipe::corpus::synth_corpus(&s)?;
            corpus.write(out)?;
            let counts = corpus.split_counts();
            for (split, n) in counts {
                println!("{split:?}\t{n}");
            }
        }
        Command::Prep { out } => {
            print_config(&cfg);
            let corpus = load_data(&cfg, true)?;
            let prepared = prepare(&corpus, &cfg.prep_config()?)?;
            std::fs::create_dir_all(out)?;
            for p in &prepared {
                let audio = p
                    .audio
                    .as_ref()
                    .ok_or(Error::MissingModality("audio"))?;
                let mut records = vec![("full".to_string(), audio.full.as_ref().clone())];
                for (i, s) in audio.segments.iter().enumerate() {
                    records.push((format!("segment.{i}"), s.as_ref().clone()));
                }
                checkpoint::save(&out.join(format!("{}_logmel.bin", p.id)), &records)?;
                println!("{}\t{}\t{}", p.id, audio.full.shape()[0], audio.segments.len());
            }
        }
        Command::Topics { out } => {
            print_config(&cfg);
            let corpus = load_data(&cfg, false)?;
            let prepared = prepare(&corpus, &cfg.prep_config()?)?;
            let mut stats = TopicStats::default();
            for p in &prepared {
                stats.add(&p.segments);
                if let Some(dir) = out {
                    let mut s = String::from("topic\tutterances\tstart_s\tstop_s\ttext\n");
                    for seg in &p.segments {
                        let idx: Vec<String> = seg.utterance_indices.iter().map(|i| i.to_string()).collect();
                        let (a, b) = seg.audio_span.first().zip(seg.audio_span.last()).map_or((0.0, 0.0), |(a, b)| (a.0, b.1));
                        s.push_str(&format!("{}\t{}\t{a}\t{b}\t{}\n", seg.topic, idx.join(","), seg.text));
                    }
                    write(&dir.join(format!("{}_topics.tsv", p.id)), &s)?;
                }
            }
            print!("{}", stats.render());
        }
        Command::Augment(a) => {
            print_config(&cfg);
            let corpus = load_data(&cfg, true)?;
            let prepared = prepare(&corpus, &cfg.prep_config()?)?;
            let set = augment_corpus(&prepared, &cfg.augment_config(cfg.augment_total))?;
            let leaked = leaked_sources(&set, |id| corpus.get(id).map(|p| p.split));
            eprintln!("leakage audit augment: {} samples from outside train", leaked.len());
            write_augmented(&a.out, &set, &corpus, &prepared)?;
            println!(
                "samples {}  not_depressed {}  depressed {}  depressed_fraction {:.3}",
                set.samples.len(),
                set.class_counts[0],
                set.class_counts[1],
                set.depressed_fraction()
            );
        }
        Command::Train(t) => {
            let manifest = Manifest {
                config: cfg,
                runs: vec![RunSpec {
                    modality: t.modality,
                    variant: t.variant,
                }],
            };
            run_manifest(&manifest, t.out.as_deref())?;
        }
        Command::Eval {
            modality,
            variant,
            models,
        } => {
            print_config(&cfg);
            let corpus = load_data(&cfg, *modality != Modality::Text)?;
            let prepared = prepare(&corpus, &cfg.prep_config()?)?;
            let dev = examples(&prepared, Split::Dev, *variant, None)?;
            let pairs: Vec<_> = cfg.pairs().into_iter().filter(|(k, _)| *k != "jobs").collect();
            let fp = fingerprint(&pairs);
            let info = RunInfo {
                modality: *modality,
                variant: *variant,
                seed: cfg.seed,
                fingerprint: &fp,
            };
            let audio = || CnnParams::load(&model_path(models, Modality::Audio, *variant));
            let text = || TransformerParams::load(&model_path(models, Modality::Text, *variant));
            let report: EvalReport = match modality {
                Modality::Audio => evaluate(&audio()?, &dev, &info)?,
                Modality::Text => evaluate(&text()?, &dev, &info)?,
                Modality::Fusion => {
                    let (a, t) = (audio()?, text()?);
                    let head = FusionParams::load(&model_path(models, Modality::Fusion, *variant))?;
                    let pipeline = FusionPipeline {
                        audio: &a,
                        text: &t,
                        head: &head,
                    };
                    evaluate(&pipeline as &dyn Classifier, &dev, &info)?
                }
            };
            print_bundle(&ReportBundle {
                reports: vec![report],
                leakage: Vec::new(),
            });
        }
        Command::Report { manifest, input, out } => match (manifest, input) {
            (Some(path), _) => {
                let text = std::fs::read_to_string(path)?;
                let m = Manifest::parse(&text, &path.display().to_string(), cfg)?;
                run_manifest(&m, out.as_deref())?;
            }
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)?;
                let v: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                let reports: Vec<EvalReport> = serde_json::from_value(v["reports"].clone())
                    .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                print!("{}", moodpipe::harness::render_table(&reports));
            }
            (None, None) => {
                let m = Manifest::all_runs(cfg);
                run_manifest(&m, out.as_deref())?;
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run(cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(2)
        }
    }
}
