//! Experiment orchestration: manifests, the staged run, result tables and
//! JSON reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::audio_model::{train_audio, CnnParams};
use crate::augment::{augment_corpus, leaked_sources, AugmentedSet};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, synth_corpus, Corpus, Split};
use crate::error::{Error, Result};
use crate::fusion::{evaluate_features, extract_all, grid_search, train_fusion, FusionParams, GridResult};
use crate::metrics::{evaluate, fingerprint, EvalReport, RunInfo};
use crate::pipeline::{examples, prepare, Example, Modality, PreparedParticipant, Variant};
use crate::rng::derive_seed;
use crate::text_model::{train_text, TransformerParams};
use crate::topics::TopicStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RunSpec {
    pub modality: Modality,
    pub variant: Variant,
}

impl std::str::FromStr for RunSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (m, v) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("run `{s}`: expected modality:variant")))?;
        Ok(RunSpec {
            modality: m.trim().parse()?,
            variant: v.trim().parse()?,
        })
    }
}

impl std::fmt::Display for RunSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.modality, self.variant)
    }
}

/// Configuration plus the runs to execute. On disk it is a config file with
/// extra `run = modality:variant` lines; `run = all` expands to all nine.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub config: RunConfig,
    pub runs: Vec<RunSpec>,
}

impl Manifest {
    pub fn all_runs(config: RunConfig) -> Self {
        let runs = Modality::ALL
            .into_iter()
            .flat_map(|modality| Variant::ALL.into_iter().map(move |variant| RunSpec { modality, variant }))
            .collect();
        Manifest { config, runs }
    }

    pub fn parse(text: &str, source_name: &str, base: RunConfig) -> Result<Self> {
        let mut config = base;
        let mut runs = Vec::new();
        for (_, v) in config.apply_text(text, source_name, &["run"])? {
            if v == "all" {
                runs.extend(Manifest::all_runs(RunConfig::default()).runs);
            } else {
                runs.push(v.parse()?);
            }
        }
        if runs.is_empty() {
            return Err(Error::config(format!("{source_name}: manifest lists no runs")));
        }
        Ok(Manifest { config, runs })
    }

    pub fn render(&self) -> String {
        let mut s = self.config.render();
        for r in &self.runs {
            writeln!(s, "run = {r}").unwrap();
        }
        s
    }
}

/// Per-run leakage check: augmented samples whose source is outside the
/// training split, and evaluation ids that also occur in training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LeakageAudit {
    pub run: String,
    pub augmented_from_outside_train: Vec<u32>,
    pub eval_ids_seen_in_training: Vec<u32>,
}

impl LeakageAudit {
    pub fn is_clean(&self) -> bool {
        self.augmented_from_outside_train.is_empty() && self.eval_ids_seen_in_training.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportBundle {
    pub reports: Vec<EvalReport>,
    pub leakage: Vec<LeakageAudit>,
}

impl ReportBundle {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialise") + "\n"
    }

    pub fn table(&self) -> String {
        render_table(&self.reports)
    }
}

/// Trained models and grid results alongside the reports.
#[derive(Default)]
pub struct Experiment {
    pub bundle: Option<ReportBundle>,
    pub audio: BTreeMap<Variant, CnnParams>,
    pub text: BTreeMap<Variant, TransformerParams>,
    pub fusion: BTreeMap<Variant, FusionParams>,
    pub grids: BTreeMap<Variant, GridResult>,
    pub topic_stats: TopicStats,
}

impl Experiment {
    pub fn bundle(&self) -> &ReportBundle {
        self.bundle.as_ref().expect("experiment has run")
    }
}

/// Aligned table with the columns Model, Features Type, F1, Precision, Recall.
pub fn render_table(reports: &[EvalReport]) -> String {
    let header = ["Model", "Features Type", "F1", "Precision", "Recall"];
    let rows: Vec<[String; 5]> = reports
        .iter()
        .map(|r| {
            [
                r.model_name(),
                r.modality.features_type().to_string(),
                format!("{:.2}", r.metrics.f1),
                format!("{:.2}", r.metrics.precision),
                format!("{:.2}", r.metrics.recall),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let s: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        writeln!(out, "{}", s.join("  ").trim_end()).unwrap();
    };
    line(&header);
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Loads `data.dir` when set, otherwise generates the synthetic corpus.
pub fn load_data(config: &RunConfig, with_audio: bool) -> Result<Corpus> {
    match &config.data_dir {
        Some(dir) => load_corpus(dir, with_audio),
        None => {
            let mut s = config.synth_config();
            s.render_audio = with_audio;
            synth_corpus(&s)
        }
    }
}

fn config_fingerprint(config: &RunConfig) -> String {
    let pairs: Vec<_> = config.pairs().into_iter().filter(|(k, _)| *k != "jobs").collect();
    fingerprint(&pairs)
}

fn audit(run: RunSpec, set: Option<&AugmentedSet>, corpus: &Corpus, train: &[Example], eval: &[Example]) -> LeakageAudit {
    let train_ids: BTreeSet<u32> = train.iter().map(|e| e.source_id).collect();
    let mut seen: Vec<u32> = eval
        .iter()
        .map(|e| e.source_id)
        .filter(|id| train_ids.contains(id))
        .collect();
    seen.dedup();
    LeakageAudit {
        run: run.to_string(),
        augmented_from_outside_train: set
            .map(|s| leaked_sources(s, |id| corpus.get(id).map(|p| p.split)))
            .unwrap_or_default(),
        eval_ids_seen_in_training: seen,
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

/// Runs the manifest on data chosen by its configuration.
pub fn run_experiment(manifest: &Manifest) -> Result<Experiment> {
    manifest.config.validate()?;
    let with_audio = manifest.runs.iter().any(|r| r.modality != Modality::Text);
    let corpus = stage("prep", load_data(&manifest.config, with_audio))?;
    run_on_corpus(manifest, &corpus)
}

/// Runs prep, topics, augment, train and evaluate for every listed run.
/// Upstream models are trained once per variant and shared with fusion.
pub fn run_on_corpus(manifest: &Manifest, corpus: &Corpus) -> Result<Experiment> {
    let cfg = &manifest.config;
    cfg.validate()?;
    let seed = cfg.seed;
    let fp = config_fingerprint(cfg);
    let mut exp = Experiment::default();

    let prep_cfg = stage("prep", cfg.prep_config())?;
    let mut prepared: Vec<PreparedParticipant> = stage("prep", prepare(corpus, &prep_cfg))?;
    let with_audio = manifest.runs.iter().any(|r| r.modality != Modality::Text);
    if !with_audio {
        prepared.iter_mut().for_each(|p| p.audio = None);
    }

    for p in &prepared {
        exp.topic_stats.add(&p.segments);
    }
    if exp.topic_stats.interviews_with_any == 0 {
        return Err(Error::Data("no interview contains a topic segment".into()).at_stage("topics"));
    }

    let variants: BTreeSet<Variant> = manifest.runs.iter().map(|r| r.variant).collect();
    let needs = |m: Modality, v: Variant| {
        manifest
            .runs
            .iter()
            .any(|r| r.variant == v && (r.modality == m || r.modality == Modality::Fusion))
    };
    let fusion_augm = manifest
        .runs
        .iter()
        .any(|r| r.modality == Modality::Fusion && r.variant == Variant::Augm);
    let (augmented, fusion_augmented) = stage("augment", {
        let main = variants
            .contains(&Variant::Augm)
            .then(|| augment_corpus(&prepared, &cfg.augment_config(cfg.augment_total)))
            .transpose();
        let fused = fusion_augm
            .then(|| augment_corpus(&prepared, &cfg.augment_config(cfg.augment_fusion_total)))
            .transpose();
        main.and_then(|m| fused.map(|f| (m, f)))
    })?;

    let build = |v: Variant, set: Option<&AugmentedSet>| -> Result<(Vec<Example>, Vec<Example>)> {
        Ok((examples(&prepared, Split::Train, v, set)?, examples(&prepared, Split::Dev, v, set)?))
    };
    let sets: BTreeMap<Variant, (Vec<Example>, Vec<Example>)> = stage(
        "augment",
        variants.iter().map(|&v| Ok((v, build(v, augmented.as_ref())?))).collect(),
    )?;

    // Upstream trainings are independent and run in parallel.
    let jobs: Vec<(Modality, Variant)> = variants
        .iter()
        .flat_map(|&v| [(Modality::Audio, v), (Modality::Text, v)])
        .filter(|&(m, v)| needs(m, v))
        .collect();
    enum Trained {
        Audio(CnnParams),
        Text(TransformerParams),
    }
    let audio_cfg = cfg.audio_config();
    let trained = stage(
        "train",
        jobs.par_iter()
            .map(|&(m, v)| {
                let (train, dev) = &sets[&v];
                let sub = derive_seed(seed, &format!("train.{m}.{v}"));
                Ok(match m {
                    Modality::Audio => Trained::Audio(train_audio(train, dev, v, &audio_cfg, sub)?.0),
                    _ => Trained::Text(train_text(train, dev, v, &cfg.text, sub)?.0),
                })
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    for ((_, v), t) in jobs.iter().zip(trained) {
        match t {
            Trained::Audio(p) => {
                exp.audio.insert(*v, p);
            }
            Trained::Text(p) => {
                exp.text.insert(*v, p);
            }
        }
    }

    let mut reports = Vec::new();
    let mut leakage = Vec::new();
    for &run in &manifest.runs {
        let v = run.variant;
        let (train, dev) = &sets[&v];
        let info = RunInfo {
            modality: run.modality,
            variant: v,
            seed,
            fingerprint: &fp,
        };
        let report = match run.modality {
            Modality::Audio => {
                leakage.push(audit(run, augmented.as_ref().filter(|_| v == Variant::Augm), corpus, train, dev));
                stage("evaluate", evaluate(&exp.audio[&v], dev, &info))?
            }
            Modality::Text => {
                leakage.push(audit(run, augmented.as_ref().filter(|_| v == Variant::Augm), corpus, train, dev));
                stage("evaluate", evaluate(&exp.text[&v], dev, &info))?
            }
            Modality::Fusion => {
                let (audio, text) = (&exp.audio[&v], &exp.text[&v]);
                let fusion_train;
                let train = if v == Variant::Augm {
                    fusion_train = stage(
                        "augment",
                        examples(&prepared, Split::Train, v, fusion_augmented.as_ref()),
                    )?;
                    &fusion_train
                } else {
                    train
                };
                leakage.push(audit(run, fusion_augmented.as_ref().filter(|_| v == Variant::Augm), corpus, train, dev));
                let (head, grid) = stage("train", fusion_head(cfg, audio, text, train, dev, v))?;
                let dev_f = stage("evaluate", extract_all(audio, text, dev))?;
                let r = stage("evaluate", evaluate_features(&head, &dev_f, &info))?;
                exp.fusion.insert(v, head);
                if let Some(g) = grid {
                    exp.grids.insert(v, g);
                }
                r
            }
        };
        reports.push(report);
    }
    exp.bundle = Some(ReportBundle { reports, leakage });
    Ok(exp)
}

fn fusion_head(
    cfg: &RunConfig,
    audio: &CnnParams,
    text: &TransformerParams,
    train: &[Example],
    dev: &[Example],
    v: Variant,
) -> Result<(FusionParams, Option<GridResult>)> {
    let train_f = extract_all(audio, text, train)?;
    let dev_f = extract_all(audio, text, dev)?;
    let sub = derive_seed(cfg.seed, &format!("train.fusion.{v}"));
    match cfg.fusion_grid.grid() {
        None => Ok((train_fusion(&train_f, &dev_f, v, &cfg.fusion, sub)?.0, None)),
        Some(grid) => {
            let result = grid_search(&train_f, &dev_f, v, &grid, &cfg.fusion, sub)?;
            let best = result.best().config.clone();
            let sub_best = derive_seed(sub, &format!("fusion.grid.{}", result.best_index));
            let (head, _) = train_fusion(&train_f, &dev_f, v, &best, sub_best)?;
            Ok((head, Some(result)))
        }
    }
}
