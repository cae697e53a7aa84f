//! Word-level tokenizer and a pre-layer-norm Transformer encoder classifier.
//! The sequence is `<start> content <extract>`; the classifier reads the final
//! hidden state at `<extract>`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio_model::softmax;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, fingerprint, Classifier, EvalReport, RunInfo};
use crate::pipeline::{Example, Modality, TextPiece, Variant};
use crate::rng::stage_rng;
use crate::tensor::{
    checkpoint, AdamConfig, AdamState, Gradients, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::topics::TopicId;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const EXTRACT: usize = 3;
pub const TOPIC_BASE: usize = 4;
const N_SPECIAL: usize = TOPIC_BASE + 7;

fn special_name(id: usize) -> String {
    match id {
        PAD => "<pad>".into(),
        UNK => "<unk>".into(),
        START => "<start>".into(),
        EXTRACT => "<extract>".into(),
        t => format!("<topic_{}>", t - TOPIC_BASE),
    }
}

pub fn topic_token(topic: TopicId) -> usize {
    TOPIC_BASE + topic.index()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    words: HashMap<String, usize>,
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocab {
    /// Specials first, then up to `cap` words by descending frequency with
    /// lexicographic tie-breaks.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let specials: Vec<String> = (0..N_SPECIAL).map(special_name).collect();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in words(t) {
                if !specials.contains(&w) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let mut tokens = specials;
        tokens.extend(ranked.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens).expect("built vocabularies are valid")
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for id in 0..N_SPECIAL {
            if tokens.get(id) != Some(&special_name(id)) {
                return Err(Error::Data(format!("vocab line {} must be {}", id + 1, special_name(id))));
            }
        }
        let mut words = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(N_SPECIAL) {
            if words.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocab token {t}")));
            }
        }
        Ok(Vocab { tokens, words })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word id, or `<unk>`. Special-token spellings in text are words too,
    /// so they also map to `<unk>`.
    pub fn word_id(&self, word: &str) -> usize {
        self.words.get(word).copied().unwrap_or(UNK)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// `<start>`, content, `<extract>`. Pieces with a topic are prefixed by
/// that topic's token. Overlong content loses its earliest tokens.
pub fn tokenize(pieces: &[TextPiece], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<usize>> {
    if max_seq_len < 2 {
        return Err(Error::config("max_seq_len must be at least 2"));
    }
    let mut content = Vec::new();
    for p in pieces {
        if let Some(t) = p.topic {
            content.push(topic_token(t));
        }
        content.extend(words(&p.text).map(|w| vocab.word_id(&w)));
    }
    let keep = max_seq_len - 2;
    let skip = content.len().saturating_sub(keep);
    let mut seq = Vec::with_capacity(content.len() - skip + 2);
    seq.push(START);
    seq.extend_from_slice(&content[skip..]);
    seq.push(EXTRACT);
    Ok(seq)
}

/// Splits a token sequence back into `(topic, word ids)` runs at topic tokens.
pub fn split_segments(tokens: &[usize]) -> Result<Vec<(Option<TopicId>, Vec<usize>)>> {
    if tokens.len() < 2 || tokens[0] != START || *tokens.last().unwrap() != EXTRACT {
        return Err(Error::Data("sequence must be <start> ... <extract>".into()));
    }
    let mut out: Vec<(Option<TopicId>, Vec<usize>)> = Vec::new();
    for &t in &tokens[1..tokens.len() - 1] {
        if (TOPIC_BASE..N_SPECIAL).contains(&t) {
            out.push((TopicId::from_index(t - TOPIC_BASE), Vec::new()));
        } else {
            match out.last_mut() {
                Some(last) => last.1.push(t),
                None => out.push((None, vec![t])),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub vocab_cap: usize,
    pub ln_eps: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            n_layers: 6,
            n_heads: 8,
            d_model: 512,
            d_ff: 2048,
            max_seq_len: 512,
            dropout: 0.1,
            vocab_cap: 10_000,
            ln_eps: 1e-5,
            learning_rate: 6.25e-6,
            batch_size: 16,
            epochs: 1,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("text.n_layers", self.n_layers),
            ("text.n_heads", self.n_heads),
            ("text.d_model", self.d_model),
            ("text.d_ff", self.d_ff),
            ("text.batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "text.d_model {} not divisible by text.n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("text.max_seq_len must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("text.dropout must lie in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::config("text.lr must be non-negative and text.ln_eps positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches data")
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| d.sample(rng)).collect())
        .expect("shape matches data")
}

impl TransformerParams {
    pub fn init(config: &TransformerConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stage_rng(seed, "text.init");
        let (d, f) = (config.d_model, config.d_ff);
        let mut s = ParamStore::new();
        let tok_emb = s.insert("tok_emb", normal(&mut rng, vocab.len(), d, 0.02))?;
        let pos_emb = s.insert("pos_emb", normal(&mut rng, config.max_seq_len, d, 0.02))?;
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let mut lin = |s: &mut ParamStore, name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
                Ok((
                    s.insert(format!("block{l}.{name}.weight"), xavier(&mut rng, i, o))?,
                    s.insert(format!("block{l}.{name}.bias"), Tensor::zeros(&[o]))?,
                ))
            };
            let ln1_g = s.insert(format!("block{l}.ln1.gamma"), Tensor::ones(&[d]))?;
            let ln1_b = s.insert(format!("block{l}.ln1.beta"), Tensor::zeros(&[d]))?;
            let (wq, bq) = lin(&mut s, "q", d, d)?;
            let (wk, bk) = lin(&mut s, "k", d, d)?;
            let (wv, bv) = lin(&mut s, "v", d, d)?;
            let (wo, bo) = lin(&mut s, "o", d, d)?;
            let ln2_g = s.insert(format!("block{l}.ln2.gamma"), Tensor::ones(&[d]))?;
            let ln2_b = s.insert(format!("block{l}.ln2.beta"), Tensor::zeros(&[d]))?;
            let (w1, b1) = lin(&mut s, "ff1", d, f)?;
            let (w2, b2) = lin(&mut s, "ff2", f, d)?;
            blocks.push(BlockIds {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let lnf_g = s.insert("ln_f.gamma", Tensor::ones(&[d]))?;
        let lnf_b = s.insert("ln_f.beta", Tensor::zeros(&[d]))?;
        let head_w = s.insert("head.weight", xavier(&mut rng, d, 2))?;
        let head_b = s.insert("head.bias", Tensor::zeros(&[2]))?;
        Ok(TransformerParams {
            config: config.clone(),
            vocab,
            store: s,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    pub fn tokenize(&self, pieces: &[TextPiece]) -> Result<Vec<usize>> {
        tokenize(pieces, &self.vocab, self.config.max_seq_len)
    }

    /// Writes the weights, `<path>.json` (config) and `<path>.vocab`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store.records())?;
        let json = serde_json::to_string_pretty(&self.config).expect("config serialises");
        std::fs::write(path.with_extension("json"), json)?;
        self.vocab.save(&path.with_extension("vocab"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path.with_extension("json"))?;
        let config: TransformerConfig =
            serde_json::from_str(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let vocab = Vocab::load(&path.with_extension("vocab"))?;
        let mut p = TransformerParams::init(&config, vocab, 0)?;
        p.store.load_named(&checkpoint::load(path)?)?;
        Ok(p)
    }
}

pub struct TextForward {
    /// `(1, 2)` logits.
    pub logits: Var,
    /// `(1, d_model)` hidden state at `<extract>`.
    pub feature: Var,
    /// Attention nodes, one per layer.
    pub attention: Vec<Var>,
}

fn bind(tape: &mut Tape, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
    if trainable {
        store.bind(tape, id)
    } else {
        tape.constant(store.get(id).clone())
    }
}

/// Forward pass of one token sequence. `rng` enables dropout.
pub fn forward(
    tape: &mut Tape,
    params: &TransformerParams,
    store: &ParamStore,
    tokens: &[usize],
    mut rng: Option<&mut dyn RngCore>,
    trainable: bool,
) -> Result<TextForward> {
    let cfg = &params.config;
    let l = tokens.len();
    if l < 2 || l > cfg.max_seq_len {
        return Err(Error::shape(format!(
            "sequence length {l} outside [2, {}]",
            cfg.max_seq_len
        )));
    }
    let mut b = |id| bind(tape, store, id, trainable);
    let ids: Vec<Var> = [params.tok_emb, params.pos_emb].into_iter().map(&mut b).collect();
    let (tok, pos) = (ids[0], ids[1]);
    let positions: Vec<usize> = (0..l).collect();
    let te = tape.embedding(tok, tokens)?;
    let pe = tape.embedding(pos, &positions)?;
    let mut x = tape.add(te, pe)?;
    let p = cfg.dropout;
    if let Some(r) = rng.as_deref_mut() {
        x = tape.dropout(x, p, r)?;
    }
    let mut attention = Vec::new();
    for blk in &params.blocks {
        let v = |tape: &mut Tape, id| bind(tape, store, id, trainable);
        let linear = |tape: &mut Tape, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
            let wv = v(tape, w);
            let bv = v(tape, bias);
            let y = tape.matmul(x, wv)?;
            tape.add_bias(y, bv)
        };
        let (g1, b1) = (v(tape, blk.ln1_g), v(tape, blk.ln1_b));
        let h = tape.layer_norm(x, g1, b1, cfg.ln_eps)?;
        let q = linear(tape, h, blk.wq, blk.bq)?;
        let k = linear(tape, h, blk.wk, blk.bk)?;
        let vv = linear(tape, h, blk.wv, blk.bv)?;
        let a = tape.attention(q, k, vv, cfg.n_heads)?;
        attention.push(a);
        let mut o = linear(tape, a, blk.wo, blk.bo)?;
        if let Some(r) = rng.as_deref_mut() {
            o = tape.dropout(o, p, r)?;
        }
        x = tape.add(x, o)?;
        let (g2, b2) = (v(tape, blk.ln2_g), v(tape, blk.ln2_b));
        let h = tape.layer_norm(x, g2, b2, cfg.ln_eps)?;
        let f = linear(tape, h, blk.w1, blk.b1)?;
        let f = tape.relu(f)?;
        let mut f = linear(tape, f, blk.w2, blk.b2)?;
        if let Some(r) = rng.as_deref_mut() {
            f = tape.dropout(f, p, r)?;
        }
        x = tape.add(x, f)?;
    }
    let (gf, bf) = (bind(tape, store, params.lnf_g, trainable), bind(tape, store, params.lnf_b, trainable));
    let x = tape.layer_norm(x, gf, bf, cfg.ln_eps)?;
    let feature = tape.select_row(x, l - 1)?;
    let (hw, hb) = (bind(tape, store, params.head_w, trainable), bind(tape, store, params.head_b, trainable));
    let z = tape.matmul(feature, hw)?;
    let logits = tape.add_bias(z, hb)?;
    Ok(TextForward {
        logits,
        feature,
        attention,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextOutput {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub feature: Vec<f64>,
    /// Per layer, `heads × L × L` attention probabilities.
    pub attention: Vec<Vec<f64>>,
}

/// Evaluation-mode forward pass.
pub fn transformer_forward(tokens: &[usize], params: &TransformerParams) -> Result<TextOutput> {
    if let Some(bad) = tokens.iter().find(|&&t| t >= params.vocab.len()) {
        return Err(Error::Data(format!(
            "token id {bad} outside vocabulary of {}",
            params.vocab.len()
        )));
    }
    let mut tape = Tape::new();
    let out = forward(&mut tape, params, &params.store, tokens, None, false)?;
    let logits = tape.value(out.logits)?.data().to_vec();
    let attention = out
        .attention
        .iter()
        .map(|&a| Ok(tape.attention_probs(a)?.unwrap_or_default().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TextOutput {
        probabilities: softmax(&logits),
        logits,
        feature: tape.value(out.feature)?.data().to_vec(),
        attention,
    })
}

impl Classifier for TransformerParams {
    fn probabilities(&self, example: &Example) -> Result<[f64; 2]> {
        let p = transformer_forward(&self.tokenize(&example.text)?, self)?.probabilities;
        Ok([p[0], p[1]])
    }
}

/// Mean cross-entropy gradient of a batch. Samples run on their own tapes in
/// parallel; gradients are summed in sample order.
fn batch_gradients(
    params: &TransformerParams,
    seqs: &[(Vec<usize>, usize)],
    seeds: &[u64],
) -> Result<Gradients> {
    let per = seqs
        .par_iter()
        .zip(seeds)
        .map(|((tokens, y), &s)| {
            let mut rng = <crate::rng::StageRng as rand::SeedableRng>::seed_from_u64(s);
            let mut tape = Tape::new();
            let r: Option<&mut dyn RngCore> = if params.config.dropout > 0.0 { Some(&mut rng) } else { None };
            let out = forward(&mut tape, params, &params.store, tokens, r, true)?;
            let loss = tape.softmax_cross_entropy(out.logits, &[*y])?;
            tape.backward(loss)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Gradients::default();
    for g in &per {
        total.accumulate(g);
    }
    total.scale(1.0 / seqs.len() as f64);
    Ok(total)
}

/// Builds the vocabulary from `train`, trains, and reports on `dev`.
pub fn train_text(
    train: &[Example],
    dev: &[Example],
    variant: Variant,
    config: &TransformerConfig,
    seed: u64,
) -> Result<(TransformerParams, EvalReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let vocab = Vocab::build(
        train.iter().flat_map(|e| e.text.iter().map(|p| p.text.as_str())),
        config.vocab_cap,
    );
    let mut params = TransformerParams::init(config, vocab, seed)?;
    let seqs = train
        .iter()
        .map(|e| Ok((params.tokenize(&e.text)?, e.label.class_index())))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = AdamState::new(&params.store, AdamConfig::with_lr(config.learning_rate))?;
    let mut rng = stage_rng(seed, "text.train");
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Vec<usize>, usize)> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let grads = batch_gradients(&params, &batch, &seeds)?;
            adam.step(&mut params.store, &grads)?;
        }
    }
    let fp = fingerprint(&(config, variant));
    let report = evaluate(
        &params,
        dev,
        &RunInfo {
            modality: Modality::Text,
            variant,
            seed,
            fingerprint: &fp,
        },
    )?;
    Ok((params, report))
}
