//! Flat `key = value` run configuration covering every tunable.

use std::path::{Path, PathBuf};

use crate::audio_model::CnnConfig;
use crate::augment::{AugmentConfig, PerClass};
use crate::corpus::SynthConfig;
use crate::dsp::{LogMelConfig, Window};
use crate::error::{Error, Result};
use crate::fusion::{Activation, FusionConfig, FusionGrid};
use crate::pipeline::PrepConfig;
use crate::text_model::TransformerConfig;
use crate::topics::TopicLexicon;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridChoice {
    None,
    Desk,
    Large,
}

impl GridChoice {
    pub fn grid(self) -> Option<FusionGrid> {
        match self {
            GridChoice::None => None,
            GridChoice::Large => Some(FusionGrid::large()),
            GridChoice::Desk => Some(FusionGrid {
                n_hidden_layers: vec![0, 1, 2],
                hidden_units: vec![64],
                dropout: vec![0.0, 0.1],
                activation: vec![Activation::Relu, Activation::Linear],
                learning_rate: vec![6.25e-3, 6.25e-4],
                epochs: vec![10],
            }),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            GridChoice::None => "none",
            GridChoice::Desk => "desk",
            GridChoice::Large => "large",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Large,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "large" => Ok(Preset::Large),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::config(format!("unknown preset `{s}` (large, desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub data_dir: Option<PathBuf>,
    pub logmel: LogMelConfig,
    pub topics_window: usize,
    pub topics_lexicon: Option<PathBuf>,
    pub augment_m: usize,
    pub augment_n_dep: Option<usize>,
    pub augment_n_non: Option<usize>,
    pub augment_total: usize,
    pub augment_fusion_total: usize,
    pub augment_include_originals: bool,
    pub audio: CnnConfig,
    pub text: TransformerConfig,
    pub fusion: FusionConfig,
    pub fusion_grid: GridChoice,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            data_dir: None,
            logmel: LogMelConfig::default(),
            topics_window: 3,
            topics_lexicon: None,
            augment_m: 2,
            augment_n_dep: None,
            augment_n_non: None,
            augment_total: 534,
            augment_fusion_total: 307,
            augment_include_originals: true,
            audio: CnnConfig::default(),
            text: TransformerConfig::default(),
            fusion: FusionConfig::default(),
            fusion_grid: GridChoice::None,
            synth: SynthConfig::new(0, 31, 76, 12, 23),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got `{value}`"))),
    }
}

fn opt_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
}

impl RunConfig {
    /// Full-size defaults, or a laptop-sized configuration that trains the
    /// whole pipeline in minutes.
    pub fn preset(preset: Preset) -> Self {
        let mut c = RunConfig::default();
        if preset == Preset::Desk {
            c.audio = CnnConfig {
                n_layers: 3,
                filters: 16,
                kernel_width: 9,
                dropout: 0.1,
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 20,
                standardize: true,
                ..CnnConfig::default()
            };
            c.text = TransformerConfig {
                n_layers: 2,
                n_heads: 4,
                d_model: 64,
                d_ff: 256,
                max_seq_len: 256,
                learning_rate: 1e-3,
                batch_size: 8,
                epochs: 20,
                ..TransformerConfig::default()
            };
            c.fusion.learning_rate = 6.25e-4;
            c.fusion_grid = GridChoice::Desk;
            c.synth = SynthConfig::new(0, 6, 14, 6, 6);
            c.augment_total = 84;
            c.augment_fusion_total = 56;
        }
        c
    }

    /// Applies one setting. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "jobs" => self.jobs = parse(key, v)?,
            "data.dir" => self.data_dir = (v != "none").then(|| PathBuf::from(v)),
            "dsp.n_fft" => self.logmel.stft.n_fft = parse(key, v)?,
            "dsp.hop" => self.logmel.stft.hop = parse(key, v)?,
            "dsp.window" => self.logmel.stft.window = v.parse::<Window>()?,
            "dsp.n_mels" => self.logmel.n_mels = parse(key, v)?,
            "dsp.f_min" => self.logmel.f_min = parse(key, v)?,
            "dsp.standardize" => self.audio.standardize = parse_bool(key, v)?,
            "dsp.f_max" => self.logmel.f_max = if v == "none" { None } else { Some(parse(key, v)?) },
            "topics.window" => self.topics_window = parse(key, v)?,
            "topics.lexicon" => self.topics_lexicon = (v != "none").then(|| PathBuf::from(v)),
            "augment.m" => self.augment_m = parse(key, v)?,
            "augment.n_dep" => self.augment_n_dep = if v == "none" { None } else { Some(parse(key, v)?) },
            "augment.n_non" => self.augment_n_non = if v == "none" { None } else { Some(parse(key, v)?) },
            "augment.total" => self.augment_total = parse(key, v)?,
            "augment.fusion_total" => self.augment_fusion_total = parse(key, v)?,
            "augment.include_originals" => self.augment_include_originals = parse_bool(key, v)?,
            "audio.n_layers" => self.audio.n_layers = parse(key, v)?,
            "audio.filters" => self.audio.filters = parse(key, v)?,
            "audio.kernel_width" => self.audio.kernel_width = parse(key, v)?,
            "audio.stride" => self.audio.stride = parse(key, v)?,
            "audio.pool_size" => self.audio.pool_size = parse(key, v)?,
            "audio.l2_lambda" => self.audio.l2_lambda = parse(key, v)?,
            "audio.dropout" => self.audio.dropout = parse(key, v)?,
            "audio.fc_units" => self.audio.fc_units = parse(key, v)?,
            "audio.bn_momentum" => self.audio.bn_momentum = parse(key, v)?,
            "audio.bn_eps" => self.audio.bn_eps = parse(key, v)?,
            "audio.lr" => self.audio.learning_rate = parse(key, v)?,
            "audio.batch_size" => self.audio.batch_size = parse(key, v)?,
            "audio.epochs" => self.audio.epochs = parse(key, v)?,
            "text.n_layers" => self.text.n_layers = parse(key, v)?,
            "text.n_heads" => self.text.n_heads = parse(key, v)?,
            "text.d_model" => self.text.d_model = parse(key, v)?,
            "text.d_ff" => self.text.d_ff = parse(key, v)?,
            "text.max_seq_len" => self.text.max_seq_len = parse(key, v)?,
            "text.dropout" => self.text.dropout = parse(key, v)?,
            "text.vocab_cap" => self.text.vocab_cap = parse(key, v)?,
            "text.ln_eps" => self.text.ln_eps = parse(key, v)?,
            "text.lr" => self.text.learning_rate = parse(key, v)?,
            "text.batch_size" => self.text.batch_size = parse(key, v)?,
            "text.epochs" => self.text.epochs = parse(key, v)?,
            "fusion.n_hidden_layers" => self.fusion.n_hidden_layers = parse(key, v)?,
            "fusion.hidden_units" => self.fusion.hidden_units = parse(key, v)?,
            "fusion.dropout" => self.fusion.dropout = parse(key, v)?,
            "fusion.activation" => self.fusion.activation = v.parse()?,
            "fusion.lr" => self.fusion.learning_rate = parse(key, v)?,
            "fusion.epochs" => self.fusion.epochs = parse(key, v)?,
            "fusion.p" => self.fusion.p = parse(key, v)?,
            "fusion.batch_size" => self.fusion.batch_size = parse(key, v)?,
            "fusion.grid" => {
                self.fusion_grid = match v {
                    "none" => GridChoice::None,
                    "desk" => GridChoice::Desk,
                    "large" => GridChoice::Large,
                    _ => return Err(Error::config(format!("fusion.grid: expected none, desk or large, got `{v}`"))),
                }
            }
            "synth.n_train_dep" => self.synth.n_train_dep = parse(key, v)?,
            "synth.n_train_non" => self.synth.n_train_non = parse(key, v)?,
            "synth.n_dev_dep" => self.synth.n_dev_dep = parse(key, v)?,
            "synth.n_dev_non" => self.synth.n_dev_non = parse(key, v)?,
            "synth.snr_db" => self.synth.snr_db = parse(key, v)?,
            "synth.sample_rate" => self.synth.sample_rate = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let a = &self.audio;
        let t = &self.text;
        let f = &self.fusion;
        vec![
            ("seed", self.seed.to_string()),
            ("jobs", self.jobs.to_string()),
            ("data.dir", opt_string(&self.data_dir.as_ref().map(|p| p.display()))),
            ("dsp.n_fft", self.logmel.stft.n_fft.to_string()),
            ("dsp.hop", self.logmel.stft.hop.to_string()),
            ("dsp.window", self.logmel.stft.window.to_string()),
            ("dsp.n_mels", self.logmel.n_mels.to_string()),
            ("dsp.f_min", self.logmel.f_min.to_string()),
            ("dsp.f_max", opt_string(&self.logmel.f_max)),
            ("dsp.standardize", self.audio.standardize.to_string()),
            ("topics.window", self.topics_window.to_string()),
            ("topics.lexicon", opt_string(&self.topics_lexicon.as_ref().map(|p| p.display()))),
            ("augment.m", self.augment_m.to_string()),
            ("augment.n_dep", opt_string(&self.augment_n_dep)),
            ("augment.n_non", opt_string(&self.augment_n_non)),
            ("augment.total", self.augment_total.to_string()),
            ("augment.fusion_total", self.augment_fusion_total.to_string()),
            ("augment.include_originals", self.augment_include_originals.to_string()),
            ("audio.n_layers", a.n_layers.to_string()),
            ("audio.filters", a.filters.to_string()),
            ("audio.kernel_width", a.kernel_width.to_string()),
            ("audio.stride", a.stride.to_string()),
            ("audio.pool_size", a.pool_size.to_string()),
            ("audio.l2_lambda", a.l2_lambda.to_string()),
            ("audio.dropout", a.dropout.to_string()),
            ("audio.fc_units", a.fc_units.to_string()),
            ("audio.bn_momentum", a.bn_momentum.to_string()),
            ("audio.bn_eps", a.bn_eps.to_string()),
            ("audio.lr", a.learning_rate.to_string()),
            ("audio.batch_size", a.batch_size.to_string()),
            ("audio.epochs", a.epochs.to_string()),
            ("text.n_layers", t.n_layers.to_string()),
            ("text.n_heads", t.n_heads.to_string()),
            ("text.d_model", t.d_model.to_string()),
            ("text.d_ff", t.d_ff.to_string()),
            ("text.max_seq_len", t.max_seq_len.to_string()),
            ("text.dropout", t.dropout.to_string()),
            ("text.vocab_cap", t.vocab_cap.to_string()),
            ("text.ln_eps", t.ln_eps.to_string()),
            ("text.lr", t.learning_rate.to_string()),
            ("text.batch_size", t.batch_size.to_string()),
            ("text.epochs", t.epochs.to_string()),
            ("fusion.n_hidden_layers", f.n_hidden_layers.to_string()),
            ("fusion.hidden_units", f.hidden_units.to_string()),
            ("fusion.dropout", f.dropout.to_string()),
            ("fusion.activation", f.activation.as_str().to_string()),
            ("fusion.lr", f.learning_rate.to_string()),
            ("fusion.epochs", f.epochs.to_string()),
            ("fusion.p", f.p.to_string()),
            ("fusion.batch_size", f.batch_size.to_string()),
            ("fusion.grid", self.fusion_grid.as_str().to_string()),
            ("synth.n_train_dep", self.synth.n_train_dep.to_string()),
            ("synth.n_train_non", self.synth.n_train_non.to_string()),
            ("synth.n_dev_dep", self.synth.n_dev_dep.to_string()),
            ("synth.n_dev_non", self.synth.n_dev_non.to_string()),
            ("synth.snr_db", self.synth.snr_db.to_string()),
            ("synth.sample_rate", self.synth.sample_rate.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines (`#` comments). Lines whose key is in
    /// `extra` are returned instead of applied.
    pub fn apply_text(&mut self, text: &str, source_name: &str, extra: &[&str]) -> Result<Vec<(String, String)>> {
        let mut rest = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: n + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (k, v) = (k.trim(), v.trim());
            if extra.contains(&k) {
                rest.push((k.to_string(), v.to_string()));
            } else {
                self.set(k, v).map_err(|e| err(e.to_string()))?;
            }
        }
        Ok(rest)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text, &path.display().to_string(), &[])?;
        Ok(())
    }

    /// Checks every module's constraints and cross-module consistency.
    pub fn validate(&self) -> Result<()> {
        crate::dsp::LogMelExtractor::new(self.logmel, self.synth.sample_rate)?;
        if self.topics_window == 0 {
            return Err(Error::config("topics.window must be at least 1"));
        }
        if self.augment_m == 0 {
            return Err(Error::config("augment.m must be at least 1"));
        }
        if self.augment_n_dep.is_some() != self.augment_n_non.is_some() {
            return Err(Error::config("set both augment.n_dep and augment.n_non, or neither"));
        }
        self.audio_config().validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        let s = &self.synth;
        if [s.n_train_dep, s.n_train_non, s.n_dev_dep, s.n_dev_non].contains(&0) {
            return Err(Error::config("synth counts must all be at least 1"));
        }
        Ok(())
    }

    pub fn audio_config(&self) -> CnnConfig {
        CnnConfig {
            in_channels: self.logmel.n_mels,
            ..self.audio.clone()
        }
    }

    pub fn prep_config(&self) -> Result<PrepConfig> {
        let lexicon = match &self.topics_lexicon {
            Some(p) => TopicLexicon::load(p)?,
            None => TopicLexicon::default(),
        };
        Ok(PrepConfig {
            logmel: self.logmel,
            window: self.topics_window,
            lexicon,
        })
    }

    pub fn augment_config(&self, total: usize) -> AugmentConfig {
        let per_class = match (self.augment_n_dep, self.augment_n_non) {
            (Some(depressed), Some(not_depressed)) => PerClass::Fixed {
                depressed,
                not_depressed,
            },
            _ => PerClass::Balanced { total },
        };
        AugmentConfig {
            m: self.augment_m,
            per_class,
            seed: self.seed,
            include_originals: self.augment_include_originals,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_rendered_key_round_trips() {
        let c = RunConfig::preset(Preset::Desk);
        let mut d = RunConfig::default();
        d.apply_text(&c.render(), "rendered", &[]).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.set("audio.colour", "red").is_err());
        assert!(c.set("audio.filters", "many").is_err());
        let e = c.apply_text("seed = 1\nbogus = 2\n", "f", &[]).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        let rest = c.apply_text("# c\nrun = audio:full\nseed = 4 # four\n", "f", &["run"]).unwrap();
        assert_eq!(rest, vec![("run".to_string(), "audio:full".to_string())]);
        assert_eq!(c.seed, 4);
        c.set("text.n_heads", "3").unwrap();
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::preset(Preset::Desk).validate().is_ok());
    }
}
