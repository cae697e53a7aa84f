//! Synthetic interviews in the corpus layout. Class signal lives in both
//! modalities: reply phrases come from disjoint per-class pools and voiced
//! spans use a class-specific fundamental.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{Corpus, Label, Participant, Speaker, Split, Utterance};
use crate::dsp::{quantize, PcmSignal};
use crate::error::{Error, Result};
use crate::rng::{stage_rng, StageRng};
use crate::topics::TopicId;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_train_dep: usize,
    pub n_train_non: usize,
    pub n_dev_dep: usize,
    pub n_dev_non: usize,
    pub sample_rate: u32,
    pub snr_db: f64,
    pub first_id: u32,
    pub render_audio: bool,
}

impl SynthConfig {
    pub fn new(seed: u64, n_train_dep: usize, n_train_non: usize, n_dev_dep: usize, n_dev_non: usize) -> Self {
        SynthConfig {
            seed,
            n_train_dep,
            n_train_non,
            n_dev_dep,
            n_dev_non,
            sample_rate: 16000,
            snr_db: 10.0,
            first_id: 300,
            render_audio: true,
        }
    }
}

pub(crate) const DEPRESSED_POOL: &[&str] = &[
    "i feel tired and empty most days",
    "nothing really seems worth it anymore",
    "i stay home alone most of the time",
    "i cry a lot lately",
    "i can't focus on anything",
    "everything feels heavy and pointless",
    "i don't want to see anyone",
    "i feel hopeless about the future",
    "i barely eat these days",
    "i keep thinking i am worthless",
    "it has been a rough and lonely year",
    "i just feel numb",
    "i lie awake worrying every night",
    "i have no energy to get up",
    "i get anxious and overwhelmed easily",
    "my days feel gray and slow",
];

pub(crate) const NON_DEPRESSED_POOL: &[&str] = &[
    "i feel pretty good about things",
    "work has been going great",
    "i love hanging out with friends",
    "we go hiking on weekends",
    "i am excited about my new job",
    "life is busy but happy",
    "i laugh a lot with my family",
    "i cook dinner with my partner",
    "things are calm and steady",
    "i feel confident and relaxed",
    "i play guitar in a band",
    "i have a great team at work",
    "i am proud of my progress",
    "i enjoy sunny mornings",
    "my schedule is full of nice plans",
    "i am optimistic about next year",
];

pub(crate) const PARTICIPANT_FILLERS: &[&str] =
    &["um", "yeah", "i guess so", "hmm let me think", "okay", "sure"];
pub(crate) const ELLIE_FILLERS: &[&str] =
    &["okay", "i see", "tell me more about that", "mhm", "that makes sense"];
const OPENING: &str = "hi i'm ellie thanks for coming in today";
const CLOSING: &str = "thank you for talking with me today";

pub(crate) fn questions(topic: TopicId) -> &'static [&'static str] {
    match topic {
        TopicId::Interests => &[
            "what are some things you really enjoy doing",
            "what do you do for fun",
            "do you have any hobbies or interests",
            "do you travel a lot",
        ],
        TopicId::Sleep => &[
            "how easy is it for you to get a good night's sleep",
            "have you been sleeping well lately",
        ],
        TopicId::FeelDepressed => &[
            "have you been feeling depressed lately",
            "have you noticed any behavior changes recently",
            "have you been feeling down",
        ],
        TopicId::FeelFailure => &[
            "do you ever feel like a failure",
            "what's something you regret",
        ],
        TopicId::Personality => &[
            "how would your best friend describe you",
            "do you consider yourself an introvert",
            "how would you describe your personality",
        ],
        TopicId::DiagnosedPtsdDepression => &[
            "have you ever been diagnosed with depression",
            "have you been diagnosed with p t s d",
        ],
        TopicId::Parenting => &[
            "do you have children",
            "what's the hardest thing about being a parent",
            "tell me about your kids",
        ],
    }
}

const MAX_UTTERANCES: usize = 30;
const ELLIE_F0: f64 = 165.0;
const HARMONIC_AMPS: [f64; 3] = [0.25, 0.125, 0.0625];

fn script(label: Label, rng: &mut StageRng) -> Vec<(Speaker, &'static str)> {
    let pool = match label {
        Label::Depressed => DEPRESSED_POOL,
        Label::NotDepressed => NON_DEPRESSED_POOL,
    };
    let mut topics = TopicId::ALL.to_vec();
    topics.shuffle(rng);
    let k = rng.random_range(5..=7);
    topics.truncate(k);

    let mut lines = vec![
        (Speaker::Ellie, OPENING),
        (Speaker::Participant, *PARTICIPANT_FILLERS.choose(rng).unwrap()),
    ];
    for (i, &t) in topics.iter().enumerate() {
        lines.push((Speaker::Ellie, *questions(t).choose(rng).unwrap()));
        for _ in 0..rng.random_range(1..=2) {
            lines.push((Speaker::Participant, *pool.choose(rng).unwrap()));
        }
        // Worst case for the remaining topics is a question plus two replies
        // each, then the closing line.
        let worst_rest = (k - i - 1) * 3 + 1;
        if lines.len() + 2 + worst_rest <= MAX_UTTERANCES && rng.random_bool(0.3) {
            lines.push((Speaker::Ellie, *ELLIE_FILLERS.choose(rng).unwrap()));
            lines.push((Speaker::Participant, *PARTICIPANT_FILLERS.choose(rng).unwrap()));
        }
    }
    lines.push((Speaker::Ellie, CLOSING));
    lines
}

fn render(
    utterances: &[Utterance],
    f0: &[f64],
    cfg: &SynthConfig,
    rng: &mut StageRng,
) -> Result<PcmSignal> {
    let sr = cfg.sample_rate as f64;
    let end = utterances.last().map_or(0.0, |u| u.stop_s) + 0.5;
    let mut samples = vec![0.0; (end * sr).ceil() as usize];
    let power: f64 = HARMONIC_AMPS.iter().map(|a| a * a / 2.0).sum();
    let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
    for (u, &f) in utterances.iter().zip(f0) {
        let lo = (u.start_s * sr).round() as usize;
        let hi = (u.stop_s * sr).round() as usize;
        let phases: Vec<f64> = (0..HARMONIC_AMPS.len())
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        for (n, s) in samples[lo..hi].iter_mut().enumerate() {
            let t = n as f64 / sr;
            let mut v = 0.0;
            for (h, (&a, &ph)) in HARMONIC_AMPS.iter().zip(&phases).enumerate() {
                v += a * (std::f64::consts::TAU * f * (h + 1) as f64 * t + ph).sin();
            }
            *s = v + noise.sample(rng);
        }
    }
    for s in &mut samples {
        *s = quantize(*s) as f64 / 32768.0;
    }
    PcmSignal::new(samples, cfg.sample_rate)
}

fn participant(id: u32, label: Label, split: Split, cfg: &SynthConfig) -> Result<Participant> {
    let mut rng = stage_rng(cfg.seed, &format!("synth.participant.{id}"));
    let lines = script(label, &mut rng);
    let mut t_ms: u64 = 0;
    let mut utterances = Vec::with_capacity(lines.len());
    let mut f0 = Vec::with_capacity(lines.len());
    for (speaker, text) in lines {
        let dur = rng.random_range(1000..=4000u64);
        utterances.push(Utterance {
            start_s: t_ms as f64 / 1000.0,
            stop_s: (t_ms + dur) as f64 / 1000.0,
            speaker,
            text: text.to_string(),
        });
        f0.push(match (speaker, label) {
            (Speaker::Ellie, _) => ELLIE_F0 + rng.random_range(-5.0..5.0),
            (Speaker::Participant, Label::Depressed) => rng.random_range(100.0..120.0),
            (Speaker::Participant, Label::NotDepressed) => rng.random_range(210.0..230.0),
        });
        t_ms += dur + rng.random_range(200..=600u64);
    }
    let audio = if cfg.render_audio {
        Some(render(&utterances, &f0, cfg, &mut rng)?)
    } else {
        None
    };
    Ok(Participant {
        id,
        utterances,
        audio,
        label: Some(label),
        split,
    })
}

/// Generates a labeled train/dev corpus. Ids start at `first_id` and are
/// assigned after a seeded shuffle so classes are interleaved.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let counts = [cfg.n_train_dep, cfg.n_train_non, cfg.n_dev_dep, cfg.n_dev_non];
    if counts.contains(&0) {
        return Err(Error::config("synthetic corpus counts must all be at least 1"));
    }
    if !(cfg.snr_db.is_finite()) {
        return Err(Error::config("snr_db must be finite"));
    }
    let mut slots = Vec::new();
    for (n, label, split) in [
        (cfg.n_train_dep, Label::Depressed, Split::Train),
        (cfg.n_train_non, Label::NotDepressed, Split::Train),
        (cfg.n_dev_dep, Label::Depressed, Split::Dev),
        (cfg.n_dev_non, Label::NotDepressed, Split::Dev),
    ] {
        slots.extend(std::iter::repeat_n((label, split), n));
    }
    slots.shuffle(&mut stage_rng(cfg.seed, "synth.order"));
    let participants = slots
        .par_iter()
        .enumerate()
        .map(|(i, &(label, split))| participant(cfg.first_id + i as u32, label, split, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(participants))
}
