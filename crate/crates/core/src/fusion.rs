//! Late fusion. Frozen text and audio features are concatenated
//! (`text ‖ audio`) and classified by a small feedforward network trained on
//! summed cross-entropy plus `(p/2)·Σ‖W‖²`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_model::{cnn_forward, softmax, CnnParams};
use crate::corpus::Label;
use crate::dsp::Standardizer;
use crate::error::{Error, Result};
use crate::metrics::{decide, fingerprint, report_from_predictions, Classifier, EvalReport, RunInfo};
use crate::pipeline::{Example, Modality, Variant};
use crate::rng::stage_rng;
use crate::tensor::{checkpoint, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text_model::{transformer_forward, TransformerParams};

#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature {
    pub sample_id: String,
    pub label: Label,
    pub values: Vec<f64>,
}

/// Text feature followed by audio feature, both from evaluation-mode passes.
pub fn extract_features(
    audio: &CnnParams,
    text: &TransformerParams,
    example: &Example,
) -> Result<FusedFeature> {
    if example.audio.is_empty() {
        return Err(Error::MissingModality("audio"));
    }
    let mut values = transformer_forward(&text.tokenize(&example.text)?, text)?.feature;
    values.extend(cnn_forward(&example.logmel()?, audio)?.feature);
    Ok(FusedFeature {
        sample_id: example.id.clone(),
        label: example.label,
        values,
    })
}

pub fn extract_all(
    audio: &CnnParams,
    text: &TransformerParams,
    examples: &[Example],
) -> Result<Vec<FusedFeature>> {
    examples
        .par_iter()
        .map(|e| extract_features(audio, text, e))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            _ => Err(Error::config(format!("unknown activation `{s}` (relu, linear)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_hidden_layers: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub p: f64,
    pub batch_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            n_hidden_layers: 2,
            hidden_units: 64,
            dropout: 0.1,
            activation: Activation::Linear,
            learning_rate: 6.25e-5,
            epochs: 10,
            p: 0.01,
            batch_size: 30,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hidden_layers > 0 && self.hidden_units == 0 {
            return Err(Error::config("fusion.hidden_units must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("fusion.dropout must lie in [0, 1)"));
        }
        if !(self.p >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::config("fusion.p and fusion.lr must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("fusion.batch_size must be positive"));
        }
        Ok(())
    }

    /// Layer widths from input to the two logits.
    pub fn widths(&self, input_len: usize) -> Vec<usize> {
        let mut w = vec![input_len];
        w.extend(std::iter::repeat_n(self.hidden_units, self.n_hidden_layers));
        w.push(2);
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub config: FusionConfig,
    pub store: ParamStore,
    /// Per-coordinate standardisation fitted on the training features.
    pub input_norm: Standardizer,
    layers: Vec<(ParamId, ParamId)>,
}

impl FusionParams {
    pub fn init(config: &FusionConfig, input_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_len == 0 {
            return Err(Error::Empty("fusion input"));
        }
        let mut rng = stage_rng(seed, "fusion.init");
        let mut store = ParamStore::new();
        let widths = config.widths(input_len);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let bound = (6.0 / (a + b) as f64).sqrt();
            let w = Tensor::new(vec![a, b], (0..a * b).map(|_| rng.random_range(-bound..bound)).collect())?;
            layers.push((
                store.insert(format!("layer{i}.weight"), w)?,
                store.insert(format!("layer{i}.bias"), Tensor::zeros(&[b]))?,
            ));
        }
        Ok(FusionParams {
            config: config.clone(),
            store,
            input_norm: Standardizer {
                mean: vec![0.0; input_len],
                std: vec![1.0; input_len],
            },
            layers,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_norm.mean.len()
    }

    /// Shapes of the weight matrices, input side first.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|&(w, _)| self.store.get(w).shape().to_vec()).collect()
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.layers.iter().map(|&(w, _)| w).collect()
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    /// `(p/2)·Σ‖W‖²` over weight matrices.
    pub fn regularization(&self, p: f64) -> f64 {
        0.5 * p * self.weight_ids().iter().map(|&id| self.store.get(id).sum_squares()).sum::<f64>()
    }

    fn batch_matrix(&self, batch: &[&FusedFeature]) -> Result<Tensor> {
        let d = self.input_len();
        let mut data = Vec::with_capacity(batch.len() * d);
        for f in batch {
            if f.values.len() != d {
                return Err(Error::shape(format!(
                    "fused feature has length {}, model expects {d}",
                    f.values.len()
                )));
            }
            data.extend_from_slice(&f.values);
        }
        self.input_norm.apply(&Tensor::new(vec![batch.len(), d], data)?)
    }

    /// `(N, 2)` logits on a tape; `rng` enables dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Tensor,
        mut rng: Option<&mut dyn RngCore>,
        trainable: bool,
    ) -> Result<Var> {
        let bind = |tape: &mut Tape, id: ParamId| {
            if trainable {
                store.bind(tape, id)
            } else {
                tape.constant(store.get(id).clone())
            }
        };
        let mut h = tape.constant(x);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (bind(tape, w), bind(tape, b));
            let z = tape.matmul(h, wv)?;
            h = tape.add_bias(z, bv)?;
            if i < last {
                if self.config.activation == Activation::Relu {
                    h = tape.relu(h)?;
                }
                if let Some(r) = rng.as_deref_mut() {
                    h = tape.dropout(h, self.config.dropout, r)?;
                }
            }
        }
        Ok(h)
    }

    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        logits: Var,
        labels: &[usize],
        p: f64,
        trainable: bool,
    ) -> Result<Var> {
        let mut loss = tape.softmax_cross_entropy(logits, labels)?;
        if p > 0.0 {
            for id in self.weight_ids() {
                let w = if trainable { store.bind(tape, id) } else { tape.constant(store.get(id).clone()) };
                let sq = tape.sum_squares(w)?;
                let r = tape.scale(sq, 0.5 * p)?;
                loss = tape.add(loss, r)?;
            }
        }
        Ok(loss)
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; 2]> {
        let f = FusedFeature {
            sample_id: String::new(),
            label: Label::NotDepressed,
            values: features.to_vec(),
        };
        let x = self.batch_matrix(&[&f])?;
        let mut tape = Tape::new();
        let z = self.forward(&mut tape, &self.store, x, None, false)?;
        let p = softmax(tape.value(z)?.data());
        Ok([p[0], p[1]])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = self.store.records();
        records.push(("input.mean".into(), Tensor::vector(self.input_norm.mean.clone())));
        records.push(("input.std".into(), Tensor::vector(self.input_norm.std.clone())));
        checkpoint::save(path, &records)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serialises");
        std::fs::write(path.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path.with_extension("json"))?;
        let config: FusionConfig =
            serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let records = checkpoint::load(path)?;
        let mean = checkpoint::take(&records, "input.mean")?.data().to_vec();
        let std = checkpoint::take(&records, "input.std")?.data().to_vec();
        let mut p = FusionParams::init(&config, mean.len(), 0)?;
        p.store.load_named(&records)?;
        p.input_norm = Standardizer { mean, std };
        Ok(p)
    }
}

/// Summed cross-entropy of the network on `batch` plus `(p/2)·Σ‖W‖²`.
pub fn fusion_loss(params: &FusionParams, batch: &[FusedFeature], p: f64) -> Result<f64> {
    if batch.is_empty() {
        return Ok(params.regularization(p));
    }
    let refs: Vec<&FusedFeature> = batch.iter().collect();
    let x = params.batch_matrix(&refs)?;
    let labels: Vec<usize> = batch.iter().map(|f| f.label.class_index()).collect();
    let mut tape = Tape::new();
    let z = params.forward(&mut tape, &params.store, x, None, false)?;
    let loss = params.loss_on_tape(&mut tape, &params.store, z, &labels, p, false)?;
    Ok(tape.value(loss)?.item().expect("scalar loss"))
}

pub fn evaluate_features(
    params: &FusionParams,
    features: &[FusedFeature],
    info: &RunInfo,
) -> Result<EvalReport> {
    let preds = features
        .iter()
        .map(|f| params.probabilities(&f.values).map(decide))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Label> = features.iter().map(|f| f.label).collect();
    report_from_predictions(&labels, &preds, info)
}

pub fn train_fusion(
    train: &[FusedFeature],
    dev: &[FusedFeature],
    variant: Variant,
    config: &FusionConfig,
    seed: u64,
) -> Result<(FusionParams, EvalReport)> {
    let first = train.first().ok_or(Error::Empty("fusion training set"))?;
    if dev.is_empty() {
        return Err(Error::Empty("fusion evaluation set"));
    }
    let mut params = FusionParams::init(config, first.values.len(), seed)?;
    let columns: Vec<Tensor> = train
        .iter()
        .map(|f| Tensor::new(vec![1, f.values.len()], f.values.clone()))
        .collect::<Result<_>>()?;
    params.input_norm = Standardizer::fit(columns.iter())?;
    let mut adam = AdamState::new(&params.store, AdamConfig::with_lr(config.learning_rate))?;
    let mut rng = stage_rng(seed, "fusion.train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&FusedFeature> = chunk.iter().map(|&i| &train[i]).collect();
            let x = params.batch_matrix(&batch)?;
            let labels: Vec<usize> = batch.iter().map(|f| f.label.class_index()).collect();
            let mut tape = Tape::new();
            let r: Option<&mut dyn RngCore> = if config.dropout > 0.0 { Some(&mut rng) } else { None };
            let z = params.forward(&mut tape, &params.store, x, r, true)?;
            let loss = params.loss_on_tape(&mut tape, &params.store, z, &labels, config.p, true)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut params.store, &grads)?;
        }
    }
    let fp = fingerprint(&(config, variant));
    let report = evaluate_features(
        &params,
        dev,
        &RunInfo {
            modality: Modality::Fusion,
            variant,
            seed,
            fingerprint: &fp,
        },
    )?;
    Ok((params, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionGrid {
    pub n_hidden_layers: Vec<usize>,
    pub hidden_units: Vec<usize>,
    pub dropout: Vec<f64>,
    pub activation: Vec<Activation>,
    pub learning_rate: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl FusionGrid {
    pub fn large() -> Self {
        FusionGrid {
            n_hidden_layers: vec![0, 1, 2, 3],
            hidden_units: vec![32, 64, 128],
            dropout: vec![0.0, 0.1, 0.5],
            activation: vec![Activation::Relu, Activation::Linear],
            learning_rate: vec![6.25e-3, 6.25e-4, 6.25e-5, 6.25e-6],
            epochs: vec![1, 5, 10],
        }
    }

    pub fn singleton(cfg: &FusionConfig) -> Self {
        FusionGrid {
            n_hidden_layers: vec![cfg.n_hidden_layers],
            hidden_units: vec![cfg.hidden_units],
            dropout: vec![cfg.dropout],
            activation: vec![cfg.activation],
            learning_rate: vec![cfg.learning_rate],
            epochs: vec![cfg.epochs],
        }
    }

    /// Every combination, varying the last axis (epochs) fastest. `p` and
    /// batch size come from `base`.
    pub fn configs(&self, base: &FusionConfig) -> Vec<FusionConfig> {
        let mut out = Vec::new();
        for &n_hidden_layers in &self.n_hidden_layers {
            for &hidden_units in &self.hidden_units {
                for &dropout in &self.dropout {
                    for &activation in &self.activation {
                        for &learning_rate in &self.learning_rate {
                            for &epochs in &self.epochs {
                                out.push(FusionConfig {
                                    n_hidden_layers,
                                    hidden_units,
                                    dropout,
                                    activation,
                                    learning_rate,
                                    epochs,
                                    ..base.clone()
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub config: FusionConfig,
    pub n_params: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best_index: usize,
    pub entries: Vec<GridEntry>,
}

impl GridResult {
    pub fn best(&self) -> &GridEntry {
        &self.entries[self.best_index]
    }

    /// One row per configuration with hyperparameters and dev metrics.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "index\tn_hidden_layers\thidden_units\tdropout\tactivation\tlr\tepochs\tp\tn_params\tf1\tprecision\trecall\n",
        );
        for (i, e) in self.entries.iter().enumerate() {
            let c = &e.config;
            writeln!(
                s,
                "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.n_hidden_layers,
                c.hidden_units,
                c.dropout,
                c.activation.as_str(),
                c.learning_rate,
                c.epochs,
                c.p,
                e.n_params,
                e.report.metrics.f1,
                e.report.metrics.precision,
                e.report.metrics.recall
            )
            .unwrap();
        }
        s
    }
}

/// Index of the best entry: highest F1, then highest precision, then fewest
/// parameters, then earliest.
pub fn select_best(entries: &[(f64, f64, usize)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, e) in entries.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) => {
                let o = entries[b];
                e.0 > o.0 || (e.0 == o.0 && (e.1 > o.1 || (e.1 == o.1 && e.2 < o.2)))
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

/// Trains every grid configuration with its own sub-seed and selects by dev
/// F1 under the tie-break of [`select_best`].
pub fn grid_search(
    train: &[FusedFeature],
    dev: &[FusedFeature],
    variant: Variant,
    grid: &FusionGrid,
    base: &FusionConfig,
    seed: u64,
) -> Result<GridResult> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Empty("fusion grid"));
    }
    let entries = configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let sub = crate::rng::derive_seed(seed, &format!("fusion.grid.{i}"));
            let (params, report) = train_fusion(train, dev, variant, cfg, sub)?;
            Ok(GridEntry {
                config: cfg.clone(),
                n_params: params.n_params(),
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<(f64, f64, usize)> = entries
        .iter()
        .map(|e| (e.report.metrics.f1, e.report.metrics.precision, e.n_params))
        .collect();
    Ok(GridResult {
        best_index: select_best(&keys).expect("non-empty grid"),
        entries,
    })
}

/// Full late-fusion classifier over examples.
pub struct FusionPipeline<'a> {
    pub audio: &'a CnnParams,
    pub text: &'a TransformerParams,
    pub head: &'a FusionParams,
}

impl Classifier for FusionPipeline<'_> {
    fn probabilities(&self, example: &Example) -> Result<[f64; 2]> {
        let f = extract_features(self.audio, self.text, example)?;
        self.head.probabilities(&f.values)
    }
}
