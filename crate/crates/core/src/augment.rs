//! Topic-segment augmentation: new training samples built from shuffled
//! concatenations of a participant's segments over random topic subsets.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{concat_spans, Corpus, Label, Speaker, Split, Utterance};
use crate::dsp::write_wav;
use crate::error::{Error, Result};
use crate::pipeline::PreparedParticipant;
use crate::rng::stage_rng;
use crate::tensor::Tensor;
use crate::topics::{topic_coverage, TopicId, TopicSegment};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PerClass {
    Fixed { depressed: usize, not_depressed: usize },
    /// Picks per-class counts so each class contributes about `total / 2`.
    Balanced { total: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentConfig {
    pub m: usize,
    pub per_class: PerClass,
    pub seed: u64,
    pub include_originals: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            m: 2,
            per_class: PerClass::Balanced { total: 534 },
            seed: 0,
            include_originals: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentedSample {
    pub sample_id: String,
    pub source_id: u32,
    pub label: Label,
    pub topic_subset: BTreeSet<TopicId>,
    /// Indices into the source's segments, in concatenation order. Text and
    /// spectrogram are both built from this order.
    pub segment_order: Vec<usize>,
    pub text: String,
    pub is_original: bool,
}

impl AugmentedSample {
    pub fn logmel(&self, segment_logmels: &[impl AsRef<Tensor>]) -> Result<Tensor> {
        let parts = self
            .segment_order
            .iter()
            .map(|&i| {
                segment_logmels
                    .get(i)
                    .map(AsRef::as_ref)
                    .ok_or_else(|| Error::Data(format!("segment {i} has no spectrogram")))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub samples: Vec<AugmentedSample>,
    /// Augmented samples per eligible participant, indexed by class.
    pub n_per_class: [usize; 2],
    /// Emitted samples per class, originals included.
    pub class_counts: [usize; 2],
}

impl AugmentedSet {
    pub fn depressed_fraction(&self) -> f64 {
        let total = self.class_counts[0] + self.class_counts[1];
        if total == 0 {
            0.0
        } else {
            self.class_counts[1] as f64 / total as f64
        }
    }
}

/// True iff the segments cover strictly more than `m` distinct topics.
pub fn eligible(segments: &[TopicSegment], m: usize) -> bool {
    topic_coverage(segments).len() > m
}

/// Every subset of `topics` with size in `[m, k − 1]`, in ascending bitmask
/// order over the sorted topic list.
pub fn valid_subsets(topics: &BTreeSet<TopicId>, m: usize) -> Vec<BTreeSet<TopicId>> {
    let items: Vec<TopicId> = topics.iter().copied().collect();
    let k = items.len();
    (0u32..1 << k)
        .filter(|mask| {
            let s = mask.count_ones() as usize;
            s >= m && s < k
        })
        .map(|mask| {
            items
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &t)| t)
                .collect()
        })
        .collect()
}

/// Draws up to `n` distinct valid subsets uniformly without replacement.
pub fn sample_combinations<R: Rng + ?Sized>(
    topics: &BTreeSet<TopicId>,
    m: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BTreeSet<TopicId>>> {
    if m == 0 {
        return Err(Error::config("augment.m must be at least 1"));
    }
    if topics.len() <= m {
        return Err(Error::NotEligible { k: topics.len(), m });
    }
    let all = valid_subsets(topics, m);
    let picked = rand::seq::index::sample(rng, all.len(), n.min(all.len()));
    Ok(picked.into_iter().map(|i| all[i].clone()).collect())
}

/// Gathers the segments whose topic is in `subset` and shuffles them as
/// whole blocks.
pub fn build_sample<R: Rng + ?Sized>(
    source_id: u32,
    label: Label,
    segments: &[TopicSegment],
    subset: &BTreeSet<TopicId>,
    rng: &mut R,
) -> Result<AugmentedSample> {
    let mut order: Vec<usize> = (0..segments.len())
        .filter(|&i| subset.contains(&segments[i].topic))
        .collect();
    let covered = topic_coverage(&order.iter().map(|&i| segments[i].clone()).collect::<Vec<_>>());
    if let Some(t) = subset.iter().find(|t| !covered.contains(t)) {
        return Err(Error::Data(format!(
            "participant {source_id} has no segment for topic {t}"
        )));
    }
    order.shuffle(rng);
    Ok(sample_from_order(source_id, label, segments, subset.clone(), order, false))
}

fn sample_from_order(
    source_id: u32,
    label: Label,
    segments: &[TopicSegment],
    topic_subset: BTreeSet<TopicId>,
    segment_order: Vec<usize>,
    is_original: bool,
) -> AugmentedSample {
    let text = segment_order
        .iter()
        .map(|&i| segments[i].text.as_str())
        .collect::<Vec<_>>()
        .join(" ");
    AugmentedSample {
        sample_id: String::new(),
        source_id,
        label,
        topic_subset,
        segment_order,
        text,
        is_original,
    }
}

/// Resolves the per-class multipliers for the given training participants.
pub fn resolve_per_class(train: &[&PreparedParticipant], cfg: &AugmentConfig) -> [usize; 2] {
    match cfg.per_class {
        PerClass::Fixed {
            depressed,
            not_depressed,
        } => [not_depressed, depressed],
        PerClass::Balanced { total } => {
            let mut out = [0; 2];
            for (c, slot) in out.iter_mut().enumerate() {
                let class = Label::from_class_index(c);
                let members: Vec<_> = train.iter().filter(|p| p.label == Some(class)).collect();
                let originals = if cfg.include_originals {
                    members.iter().filter(|p| !p.segments.is_empty()).count()
                } else {
                    0
                };
                let elig = members.iter().filter(|p| eligible(&p.segments, cfg.m)).count();
                let need = (total as f64 / 2.0 - originals as f64).max(0.0);
                *slot = if elig == 0 {
                    0
                } else {
                    (need / elig as f64).ceil() as usize
                };
            }
            out
        }
    }
}

/// Augments the labeled training split. Other splits are never touched.
pub fn augment_corpus(prepared: &[PreparedParticipant], cfg: &AugmentConfig) -> Result<AugmentedSet> {
    if cfg.m == 0 {
        return Err(Error::config("augment.m must be at least 1"));
    }
    let train: Vec<&PreparedParticipant> = prepared
        .iter()
        .filter(|p| p.split == Split::Train && p.label.is_some())
        .collect();
    let n_per_class = resolve_per_class(&train, cfg);
    let per_participant = train
        .par_iter()
        .map(|p| {
            let label = p.label.expect("filtered to labeled");
            let mut rng = stage_rng(cfg.seed, &format!("augment.{}", p.id));
            let mut out = Vec::new();
            if cfg.include_originals && !p.segments.is_empty() {
                let mut s = sample_from_order(
                    p.id,
                    label,
                    &p.segments,
                    topic_coverage(&p.segments),
                    (0..p.segments.len()).collect(),
                    true,
                );
                s.sample_id = p.id.to_string();
                out.push(s);
            }
            let n = n_per_class[label.class_index()];
            if n > 0 && eligible(&p.segments, cfg.m) {
                let topics = topic_coverage(&p.segments);
                for (j, subset) in sample_combinations(&topics, cfg.m, n, &mut rng)?
                    .iter()
                    .enumerate()
                {
                    let mut s = build_sample(p.id, label, &p.segments, subset, &mut rng)?;
                    s.sample_id = format!("{}_aug{j}", p.id);
                    out.push(s);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<AugmentedSample> = per_participant.into_iter().flatten().collect();
    let mut class_counts = [0; 2];
    for s in &samples {
        class_counts[s.label.class_index()] += 1;
    }
    Ok(AugmentedSet {
        samples,
        n_per_class,
        class_counts,
    })
}

/// Source ids of augmented samples that do not come from the training split.
pub fn leaked_sources(set: &AugmentedSet, corpus_splits: impl Fn(u32) -> Option<Split>) -> Vec<u32> {
    let mut v: Vec<u32> = set
        .samples
        .iter()
        .filter(|s| corpus_splits(s.source_id) != Some(Split::Train))
        .map(|s| s.source_id)
        .collect();
    v.dedup();
    v
}

/// Writes each sample as a transcript (one row per segment utterance, times
/// relative to the concatenated audio) plus WAV when the source has audio,
/// and a manifest `sample_id  source_id  label  topics  n_frames`.
pub fn write_augmented(
    dir: &Path,
    set: &AugmentedSet,
    corpus: &Corpus,
    prepared: &[PreparedParticipant],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("sample_id\tsource_id\tlabel\ttopics\tn_frames\n");
    for s in &set.samples {
        let p = prepared
            .iter()
            .find(|p| p.id == s.source_id)
            .ok_or_else(|| Error::Data(format!("unknown source {}", s.source_id)))?;
        let raw = corpus.get(s.source_id);
        let n_frames = match &p.audio {
            Some(a) => s.logmel(&a.segments)?.shape()[0],
            None => 0,
        };
        let topics: Vec<&str> = s.topic_subset.iter().map(|t| t.name()).collect();
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}",
            s.sample_id,
            s.source_id,
            s.label.class_index(),
            topics.join(","),
            n_frames
        )
        .unwrap();

        let mut rows = Vec::new();
        let mut spans = Vec::new();
        let mut t = 0.0;
        for &i in &s.segment_order {
            let seg = &p.segments[i];
            for (&ui, &(a, b)) in seg.utterance_indices.iter().zip(&seg.audio_span) {
                let text = raw
                    .map(|r| r.utterances[ui].text.clone())
                    .unwrap_or_default();
                rows.push(Utterance {
                    start_s: t,
                    stop_s: t + (b - a),
                    speaker: Speaker::Participant,
                    text,
                });
                t += b - a;
                spans.push((a, b));
            }
        }
        crate::corpus::write_transcript(&dir.join(format!("{}_TRANSCRIPT.tsv", s.sample_id)), &rows)?;
        if let Some(audio) = raw.and_then(|r| r.audio.as_ref()) {
            write_wav(
                &dir.join(format!("{}_AUDIO.wav", s.sample_id)),
                &concat_spans(audio, &spans)?,
            )?;
        }
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}
