//! Temporal CNN over log-mel spectrograms. Mel bands are input channels and
//! convolution runs over time only:
//!
//! ```text
//! [conv1d(same) → batch-norm → ReLU → dropout] × n_layers, max-pool between layers
//! → concat(L2, mean, max) over time → FC + ReLU (feature) → linear → logits
//! ```
//!
//! Training mode normalises with statistics pooled over every frame of every
//! sample in the batch; evaluation uses the running averages.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dsp::Standardizer;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fingerprint, Classifier, EvalReport, RunInfo};
use crate::pipeline::{Example, Modality, Variant};
use crate::rng::stage_rng;
use crate::tensor::{checkpoint, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub n_layers: usize,
    pub filters: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub pool_size: usize,
    pub l2_lambda: f64,
    pub dropout: f64,
    pub fc_units: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-band standardisation of inputs, fitted on the training set.
    #[serde(default)]
    pub standardize: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            n_layers: 4,
            filters: 64,
            kernel_width: 75,
            stride: 1,
            pool_size: 2,
            l2_lambda: 0.01,
            dropout: 0.5,
            fc_units: 64,
            n_classes: 2,
            in_channels: 80,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            learning_rate: 6.25e-4,
            batch_size: 30,
            epochs: 1,
            standardize: false,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("audio.n_layers", self.n_layers),
            ("audio.filters", self.filters),
            ("audio.kernel_width", self.kernel_width),
            ("audio.pool_size", self.pool_size),
            ("audio.fc_units", self.fc_units),
            ("audio.in_channels", self.in_channels),
            ("audio.batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.stride != 1 {
            return Err(Error::config("audio.stride: only stride 1 is supported"));
        }
        if self.n_classes != 2 {
            return Err(Error::config("audio.n_classes must be 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("audio.dropout must lie in [0, 1)"));
        }
        if !(self.l2_lambda >= 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::config("audio.l2_lambda and audio.lr must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(Error::config("batch-norm momentum must lie in [0, 1) and eps be positive"));
        }
        Ok(())
    }

    /// Fewest frames that survive every pooling step with at least one frame.
    pub fn min_frames(&self) -> usize {
        self.pool_size.pow(self.n_layers.saturating_sub(1) as u32)
    }

    pub fn pooled_len(&self) -> usize {
        3 * self.filters
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerIds {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub config: CnnConfig,
    pub store: ParamStore,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    /// Per-band input standardisation fitted on the training set.
    pub input_norm: Standardizer,
    layers: Vec<LayerIds>,
    fc_w: ParamId,
    fc_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches data")
}

impl CnnParams {
    /// Kaiming-uniform weights, zero biases, unit scale, identity input norm.
    pub fn init(config: &CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stage_rng(seed, "audio.init");
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let (f, k) = (config.filters, config.kernel_width);
        for l in 0..config.n_layers {
            let cin = if l == 0 { config.in_channels } else { f };
            layers.push(LayerIds {
                weight: store.insert(format!("conv{l}.weight"), uniform(&mut rng, &[f, cin, k], cin * k))?,
                bias: store.insert(format!("conv{l}.bias"), Tensor::zeros(&[f]))?,
                gamma: store.insert(format!("bn{l}.gamma"), Tensor::ones(&[f]))?,
                beta: store.insert(format!("bn{l}.beta"), Tensor::zeros(&[f]))?,
            });
        }
        let pooled = config.pooled_len();
        let fc_w = store.insert("fc.weight", uniform(&mut rng, &[pooled, config.fc_units], pooled))?;
        let fc_b = store.insert("fc.bias", Tensor::zeros(&[config.fc_units]))?;
        let out_w = store.insert(
            "out.weight",
            uniform(&mut rng, &[config.fc_units, config.n_classes], config.fc_units),
        )?;
        let out_b = store.insert("out.bias", Tensor::zeros(&[config.n_classes]))?;
        Ok(CnnParams {
            config: config.clone(),
            store,
            running_mean: vec![vec![0.0; f]; config.n_layers],
            running_var: vec![vec![1.0; f]; config.n_layers],
            input_norm: Standardizer {
                mean: vec![0.0; config.in_channels],
                std: vec![1.0; config.in_channels],
            },
            layers,
            fc_w,
            fc_b,
            out_w,
            out_b,
        })
    }

    /// Ids of weight tensors covered by the L2 penalty.
    pub fn weight_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.layers.iter().map(|l| l.weight).collect();
        v.extend([self.fc_w, self.out_w]);
        v
    }

    pub fn fc_weight_id(&self) -> ParamId {
        self.fc_w
    }

    pub fn fc_bias_id(&self) -> ParamId {
        self.fc_b
    }

    /// Checks, standardises and transposes a `T × M` spectrogram to the
    /// channel-major `M × T` layout.
    pub fn prepare_input(&self, logmel: &Tensor) -> Result<Tensor> {
        let (t, m) = logmel.dims2()?;
        if m != self.config.in_channels {
            return Err(Error::shape(format!(
                "spectrogram has {m} bands, model expects {}",
                self.config.in_channels
            )));
        }
        if t < self.config.min_frames() {
            return Err(Error::InputTooShort {
                frames: t,
                need: self.config.min_frames(),
            });
        }
        self.input_norm.apply(logmel)?.transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut records = self.store.records();
        for l in 0..self.config.n_layers {
            records.push((format!("bn{l}.running_mean"), Tensor::vector(self.running_mean[l].clone())));
            records.push((format!("bn{l}.running_var"), Tensor::vector(self.running_var[l].clone())));
        }
        records.push(("input.mean".into(), Tensor::vector(self.input_norm.mean.clone())));
        records.push(("input.std".into(), Tensor::vector(self.input_norm.std.clone())));
        checkpoint::save(path, &records)?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serialises");
        std::fs::write(path.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path.with_extension("json"))?;
        let config: CnnConfig =
            serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut p = CnnParams::init(&config, 0)?;
        let records = checkpoint::load(path)?;
        p.store.load_named(&records)?;
        for l in 0..config.n_layers {
            p.running_mean[l] = checkpoint::take(&records, &format!("bn{l}.running_mean"))?.data().to_vec();
            p.running_var[l] = checkpoint::take(&records, &format!("bn{l}.running_var"))?.data().to_vec();
        }
        p.input_norm = Standardizer {
            mean: checkpoint::take(&records, "input.mean")?.data().to_vec(),
            std: checkpoint::take(&records, "input.std")?.data().to_vec(),
        };
        Ok(p)
    }
}

pub enum Mode<'a> {
    /// Batch statistics and dropout drawn from the given stream.
    Train(&'a mut dyn RngCore),
    Eval,
}

pub struct BatchOutput {
    /// `(1, 2)` logits per sample.
    pub logits: Vec<Var>,
    /// `(1, fc_units)` features per sample.
    pub features: Vec<Var>,
    /// `(1, 3·filters)` pooled statistics per sample.
    pub pooled: Vec<Var>,
    /// Per-layer batch mean and variance, in training mode.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Temporal length entering each conv layer, for the first sample.
    pub lengths: Vec<usize>,
}

fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
    if trainable {
        store.bind(tape, id)
    } else {
        tape.constant(store.get(id).clone())
    }
}

/// Forward pass of a batch of prepared (`M × T`) inputs on one tape. Weights
/// come from `store`, so a perturbed copy can stand in for `params.store`.
pub fn forward_batch(
    tape: &mut Tape,
    params: &CnnParams,
    store: &ParamStore,
    inputs: &[Tensor],
    mut mode: Mode<'_>,
    trainable: bool,
) -> Result<BatchOutput> {
    let cfg = &params.config;
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let mut lengths = Vec::new();
    let mut batch_stats = Vec::new();
    for (l, ids) in params.layers.iter().enumerate() {
        lengths.push(tape.value(xs[0])?.shape()[1]);
        let (w, b) = (bind(tape, store, ids.weight, trainable), bind(tape, store, ids.bias, trainable));
        let (g, be) = (bind(tape, store, ids.gamma, trainable), bind(tape, store, ids.beta, trainable));
        let ys = xs
            .iter()
            .map(|&x| tape.conv1d(x, w, b))
            .collect::<Result<Vec<_>>>()?;
        let normed = match &mode {
            Mode::Train(_) => {
                let joined = tape.concat_time(&ys)?;
                let (bn, mean, var) = tape.batch_norm(joined, g, be, cfg.bn_eps)?;
                batch_stats.push((mean, var));
                let mut out = Vec::with_capacity(ys.len());
                let mut start = 0;
                for &y in &ys {
                    let len = tape.value(y)?.shape()[1];
                    out.push(tape.slice_time(bn, start, len)?);
                    start += len;
                }
                out
            }
            Mode::Eval => ys
                .iter()
                .map(|&y| {
                    tape.batch_norm_fixed(y, g, be, &params.running_mean[l], &params.running_var[l], cfg.bn_eps)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        xs = Vec::with_capacity(normed.len());
        for y in normed {
            let mut a = tape.relu(y)?;
            if let Mode::Train(rng) = &mut mode {
                a = tape.dropout(a, cfg.dropout, &mut **rng)?;
            }
            if l + 1 < cfg.n_layers {
                a = tape.max_pool(a, cfg.pool_size)?;
            }
            xs.push(a);
        }
    }
    let (fw, fb) = (bind(tape, store, params.fc_w, trainable), bind(tape, store, params.fc_b, trainable));
    let (ow, ob) = (bind(tape, store, params.out_w, trainable), bind(tape, store, params.out_b, trainable));
    let mut logits = Vec::with_capacity(xs.len());
    let mut features = Vec::with_capacity(xs.len());
    let mut pooled_out = Vec::with_capacity(xs.len());
    for x in xs {
        let pooled = tape.global_pool(x)?;
        let pooled = tape.reshape(pooled, vec![1, cfg.pooled_len()])?;
        let h = tape.matmul(pooled, fw)?;
        let h = tape.add_bias(h, fb)?;
        let feat = tape.relu(h)?;
        let z = tape.matmul(feat, ow)?;
        logits.push(tape.add_bias(z, ob)?);
        features.push(feat);
        pooled_out.push(pooled);
    }
    Ok(BatchOutput {
        logits,
        features,
        pooled: pooled_out,
        batch_stats,
        lengths,
    })
}

/// Mean cross-entropy over the batch plus `λ·Σ‖W‖²` over conv, FC and output
/// weights.
pub fn batch_loss(
    tape: &mut Tape,
    params: &CnnParams,
    store: &ParamStore,
    out: &BatchOutput,
    labels: &[usize],
    trainable: bool,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&z, &y) in out.logits.iter().zip(labels) {
        let ce = tape.softmax_cross_entropy(z, &[y])?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let ce = total.ok_or(Error::Empty("batch"))?;
    let mut loss = tape.scale(ce, 1.0 / labels.len() as f64)?;
    if params.config.l2_lambda > 0.0 {
        for id in params.weight_ids() {
            let w = bind(tape, store, id, trainable);
            let sq = tape.sum_squares(w)?;
            let pen = tape.scale(sq, params.config.l2_lambda)?;
            loss = tape.add(loss, pen)?;
        }
    }
    Ok(loss)
}

/// L2 regularisation term for the current weights.
pub fn l2_penalty(params: &CnnParams, lambda: f64) -> f64 {
    lambda
        * params
            .weight_ids()
            .iter()
            .map(|&id| params.store.get(id).sum_squares())
            .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub feature: Vec<f64>,
    pub lengths: Vec<usize>,
    pub pooled: Vec<f64>,
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Evaluation-mode forward pass of one `T × M` spectrogram.
pub fn cnn_forward(logmel: &Tensor, params: &CnnParams) -> Result<CnnOutput> {
    let x = params.prepare_input(logmel)?;
    let mut tape = Tape::new();
    let out = forward_batch(&mut tape, params, &params.store, &[x], Mode::Eval, false)?;
    let logits = tape.value(out.logits[0])?.data().to_vec();
    let feature = tape.value(out.features[0])?.data().to_vec();
    let pooled = tape.value(out.pooled[0])?.data().to_vec();
    Ok(CnnOutput {
        probabilities: softmax(&logits),
        logits,
        feature,
        lengths: out.lengths,
        pooled,
    })
}

impl Classifier for CnnParams {
    fn probabilities(&self, example: &Example) -> Result<[f64; 2]> {
        let p = cnn_forward(&example.logmel()?, self)?.probabilities;
        Ok([p[0], p[1]])
    }
}

/// Trains on `train` and reports on `dev`. Spectrograms are materialised
/// per batch.
pub fn train_audio(
    train: &[Example],
    dev: &[Example],
    variant: Variant,
    config: &CnnConfig,
    seed: u64,
) -> Result<(CnnParams, EvalReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut params = CnnParams::init(config, seed)?;
    if config.standardize {
        params.input_norm = Standardizer::fit(train.iter().flat_map(|e| e.audio.iter().map(|a| a.as_ref())))?;
    }
    let mut adam = AdamState::new(&params.store, AdamConfig::with_lr(config.learning_rate))?;
    let mut rng = stage_rng(seed, "audio.train");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let inputs = chunk
                .iter()
                .map(|&i| params.prepare_input(&train[i].logmel()?))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label.class_index()).collect();
            let mut tape = Tape::new();
            let out = forward_batch(&mut tape, &params, &params.store, &inputs, Mode::Train(&mut rng), true)?;
            let loss = batch_loss(&mut tape, &params, &params.store, &out, &labels, true)?;
            let grads = tape.backward(loss)?;
            adam.step(&mut params.store, &grads)?;
            let mom = config.bn_momentum;
            for (l, (mean, var)) in out.batch_stats.iter().enumerate() {
                for (r, b) in params.running_mean[l].iter_mut().zip(mean) {
                    *r = mom * *r + (1.0 - mom) * b;
                }
                for (r, b) in params.running_var[l].iter_mut().zip(var) {
                    *r = mom * *r + (1.0 - mom) * b;
                }
            }
        }
    }
    let fp = fingerprint(&(config, variant));
    let report = evaluate(
        &params,
        dev,
        &RunInfo {
            modality: Modality::Audio,
            variant,
            seed,
            fingerprint: &fp,
        },
    )?;
    Ok((params, report))
}
