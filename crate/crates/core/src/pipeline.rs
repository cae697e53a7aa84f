//! Prepared per-participant features and the per-variant example sets the
//! three classifiers consume.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentedSet;
use crate::corpus::{concat_spans, Corpus, Label, Split};
use crate::dsp::{LogMelConfig, LogMelExtractor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topics::{label_utterances, TopicId, TopicLexicon, TopicSegment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Topic,
    Augm,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::Topic, Variant::Augm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Topic => "topic",
            Variant::Augm => "augm",
        }
    }

    /// Suffix used in result tables, e.g. `CNN-Augm`.
    pub fn title(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::Topic => "Topic",
            Variant::Augm => "Augm",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown variant `{s}` (full, topic, augm)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Text,
    Fusion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Fusion => "fusion",
        }
    }

    /// Model name prefix and feature-type column of result tables.
    pub fn model_name(self) -> &'static str {
        match self {
            Modality::Audio => "CNN",
            Modality::Text => "Trf",
            Modality::Fusion => "Trf+CNN",
        }
    }

    pub fn features_type(self) -> &'static str {
        match self {
            Modality::Audio => "Audio",
            Modality::Text => "Text",
            Modality::Fusion => "Text+Audio",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown modality `{s}` (audio, text, fusion)")))
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepConfig {
    pub logmel: LogMelConfig,
    pub window: usize,
    pub lexicon: TopicLexicon,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            logmel: LogMelConfig::default(),
            window: 3,
            lexicon: TopicLexicon::default(),
        }
    }
}

/// Log-mel features (`T × n_mels`) of one participant.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatures {
    /// Participant-only audio of the whole interview.
    pub full: Arc<Tensor>,
    /// One spectrogram per topic segment, aligned with `segments`.
    pub segments: Vec<Arc<Tensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedParticipant {
    pub id: u32,
    pub label: Option<Label>,
    pub split: Split,
    pub participant_text: String,
    pub segments: Vec<TopicSegment>,
    pub audio: Option<AudioFeatures>,
}

/// Tags topics and, for participants with audio, extracts log-mels. Inputs
/// shorter than one FFT frame are zero-padded to one frame.
pub fn prepare(corpus: &Corpus, cfg: &PrepConfig) -> Result<Vec<PreparedParticipant>> {
    if cfg.window == 0 {
        return Err(Error::config("topics.window must be at least 1"));
    }
    let sr = corpus
        .participants
        .iter()
        .find_map(|p| p.audio.as_ref().map(|a| a.sample_rate))
        .unwrap_or(16000);
    let extractor = LogMelExtractor::new(cfg.logmel.clone(), sr)?;
    corpus
        .participants
        .par_iter()
        .map(|p| {
            let segments = label_utterances(&p.utterances, &cfg.lexicon, cfg.window);
            let audio = match &p.audio {
                None => None,
                Some(signal) => {
                    if signal.sample_rate != sr {
                        return Err(Error::Audio(format!(
                            "participant {}: sample rate {} differs from {sr}",
                            p.id, signal.sample_rate
                        )));
                    }
                    let own = p.participant_audio()?;
                    if own.is_empty() {
                        return Err(Error::Data(format!(
                            "participant {} has no participant audio",
                            p.id
                        )));
                    }
                    let full = Arc::new(extractor.extract_padded(&own)?.frames);
                    let segs = segments
                        .iter()
                        .map(|s| {
                            let a = concat_spans(signal, &s.audio_span)?;
                            Ok(Arc::new(extractor.extract_padded(&a)?.frames))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Some(AudioFeatures {
                        full,
                        segments: segs,
                    })
                }
            };
            Ok(PreparedParticipant {
                id: p.id,
                label: p.label,
                split: p.split,
                participant_text: p.participant_text(),
                segments,
                audio,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextPiece {
    pub topic: Option<TopicId>,
    pub text: String,
}

/// One classifier input with both modalities. The spectrogram is the time
/// concatenation of `audio` blocks; text pieces keep segment boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub source_id: u32,
    pub label: Label,
    pub augmented: bool,
    pub audio: Vec<Arc<Tensor>>,
    pub text: Vec<TextPiece>,
}

impl Example {
    pub fn logmel(&self) -> Result<Tensor> {
        if self.audio.is_empty() {
            return Err(Error::MissingModality("audio"));
        }
        let parts: Vec<&Tensor> = self.audio.iter().map(|a| a.as_ref()).collect();
        Tensor::concat_rows(&parts)
    }

    pub fn n_frames(&self) -> usize {
        self.audio.iter().map(|a| a.shape()[0]).sum()
    }
}

fn topic_example(p: &PreparedParticipant, label: Label, order: &[usize]) -> Example {
    let audio = match &p.audio {
        Some(a) if !order.is_empty() => order.iter().map(|&i| a.segments[i].clone()).collect(),
        Some(a) => vec![a.full.clone()],
        None => Vec::new(),
    };
    Example {
        id: p.id.to_string(),
        source_id: p.id,
        label,
        augmented: false,
        audio,
        text: order
            .iter()
            .map(|&i| TextPiece {
                topic: Some(p.segments[i].topic),
                text: p.segments[i].text.clone(),
            })
            .collect(),
    }
}

/// Examples of one split for a variant. Augm differs from Topic only on the
/// training split, where it uses the augmented set. A participant without
/// topic segments keeps its whole-interview audio and has empty text.
pub fn examples(
    prepared: &[PreparedParticipant],
    split: Split,
    variant: Variant,
    augmented: Option<&AugmentedSet>,
) -> Result<Vec<Example>> {
    let labeled = |p: &PreparedParticipant| -> Result<Label> {
        p.label
            .ok_or_else(|| Error::Data(format!("participant {} has no label", p.id)))
    };
    let members: Vec<&PreparedParticipant> = prepared.iter().filter(|p| p.split == split).collect();
    match variant {
        Variant::Full => members
            .iter()
            .map(|p| {
                Ok(Example {
                    id: p.id.to_string(),
                    source_id: p.id,
                    label: labeled(p)?,
                    augmented: false,
                    audio: p.audio.iter().map(|a| a.full.clone()).collect(),
                    text: vec![TextPiece {
                        topic: None,
                        text: p.participant_text.clone(),
                    }],
                })
            })
            .collect(),
        Variant::Augm if split == Split::Train => {
            let set = augmented.ok_or_else(|| Error::config("Augm training needs an augmented set"))?;
            set.samples
                .iter()
                .map(|s| {
                    let p = prepared
                        .iter()
                        .find(|p| p.id == s.source_id)
                        .ok_or_else(|| Error::Data(format!("unknown source {}", s.source_id)))?;
                    let mut ex = topic_example(p, s.label, &s.segment_order);
                    ex.id = s.sample_id.clone();
                    ex.augmented = !s.is_original;
                    Ok(ex)
                })
                .collect()
        }
        Variant::Topic | Variant::Augm => members
            .iter()
            .map(|p| {
                let order: Vec<usize> = (0..p.segments.len()).collect();
                Ok(topic_example(p, labeled(p)?, &order))
            })
            .collect(),
    }
}
