//! Interview corpora: transcripts, binary labels, split lists and audio, in
//! a DAIC-style directory layout.
//!
//! ```text
//! <dir>/labels.csv            Participant_ID,PHQ8_Binary
//! <dir>/{train,dev,test}_split.txt   one id per line
//! <dir>/<id>_TRANSCRIPT.tsv   start_time  stop_time  speaker  value
//! <dir>/<id>_AUDIO.wav        PCM16 mono
//! ```

mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, write_wav, PcmSignal};
use crate::error::{Error, Result};

pub use synth::{synth_corpus, SynthConfig};

pub const TRANSCRIPT_HEADER: &str = "start_time\tstop_time\tspeaker\tvalue";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Speaker {
    Ellie,
    Participant,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Ellie => "Ellie",
            Speaker::Participant => "Participant",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub start_s: f64,
    pub stop_s: f64,
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NotDepressed,
    Depressed,
}

impl Label {
    /// Class index used by the classifiers; depressed is the positive class 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::NotDepressed => 0,
            Label::Depressed => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Label {
        if i == 1 {
            Label::Depressed
        } else {
            Label::NotDepressed
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn list_file(self) -> String {
        format!("{}_split.txt", self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Participant {
    pub id: u32,
    pub utterances: Vec<Utterance>,
    /// Full interview recording, when loaded.
    pub audio: Option<PcmSignal>,
    /// Absent for the test split.
    pub label: Option<Label>,
    pub split: Split,
}

impl Participant {
    pub fn participant_audio(&self) -> Result<PcmSignal> {
        let audio = self
            .audio
            .as_ref()
            .ok_or(Error::MissingModality("audio"))?;
        participant_audio(audio, &self.utterances)
    }

    pub fn participant_text(&self) -> String {
        self.utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Participant)
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    /// Sorted by id.
    pub participants: Vec<Participant>,
}

impl Corpus {
    pub fn new(mut participants: Vec<Participant>) -> Self {
        participants.sort_by_key(|p| p.id);
        Corpus { participants }
    }

    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for p in &self.participants {
            *m.entry(p.split).or_default() += 1;
        }
        m
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Participant> {
        self.participants.iter().filter(move |p| p.split == split)
    }

    pub fn get(&self, id: u32) -> Option<&Participant> {
        self.participants
            .binary_search_by_key(&id, |p| p.id)
            .ok()
            .map(|i| &self.participants[i])
    }

    /// Writes the corpus in the directory layout above. Participants without
    /// audio get no WAV file.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut labels = String::from("Participant_ID,PHQ8_Binary\n");
        for p in &self.participants {
            if let Some(l) = p.label {
                writeln!(labels, "{},{}", p.id, l.class_index()).unwrap();
            }
        }
        std::fs::write(dir.join("labels.csv"), labels)?;
        for split in Split::ALL {
            let ids: String = self.in_split(split).map(|p| format!("{}\n", p.id)).collect();
            std::fs::write(dir.join(split.list_file()), ids)?;
        }
        self.participants.par_iter().try_for_each(|p| {
            write_transcript(&transcript_path(dir, p.id), &p.utterances)?;
            if let Some(a) = &p.audio {
                write_wav(&audio_path(dir, p.id), a)?;
            }
            Ok(())
        })
    }
}

pub fn transcript_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("{id}_TRANSCRIPT.tsv"))
}

pub fn audio_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("{id}_AUDIO.wav"))
}

/// Parses transcript text. Times are seconds; speaker is `Ellie` or
/// `Participant` (case-insensitive).
pub fn parse_transcript(text: &str, source_name: &str) -> Result<Vec<Utterance>> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == TRANSCRIPT_HEADER => {}
        Some(_) => return Err(err(1, format!("expected header `{TRANSCRIPT_HEADER}`"))),
        None => return Err(err(1, "missing header".into())),
    }
    let mut out: Vec<Utterance> = Vec::new();
    for (n, line) in lines {
        let line_no = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '\t').collect();
        if cols.len() < 4 {
            return Err(err(line_no, format!("expected 4 columns, found {}", cols.len())));
        }
        let time = |s: &str, what: &str| -> Result<f64> {
            match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line_no, format!("unparsable {what} `{s}`"))),
            }
        };
        let start_s = time(cols[0], "start_time")?;
        let stop_s = time(cols[1], "stop_time")?;
        if start_s < 0.0 || stop_s < start_s {
            return Err(err(line_no, format!("invalid span [{start_s}, {stop_s}]")));
        }
        let speaker = match cols[2].trim().to_ascii_lowercase().as_str() {
            "ellie" => Speaker::Ellie,
            "participant" => Speaker::Participant,
            other => return Err(err(line_no, format!("unknown speaker `{other}`"))),
        };
        let text = cols[3].trim().to_string();
        if speaker == Speaker::Participant && text.is_empty() {
            return Err(err(line_no, "empty participant text".into()));
        }
        if out.last().is_some_and(|u| u.start_s > start_s) {
            return Err(err(line_no, "rows not ordered by start_time".into()));
        }
        out.push(Utterance {
            start_s,
            stop_s,
            speaker,
            text,
        });
    }
    Ok(out)
}

pub fn load_transcript(path: &Path) -> Result<Vec<Utterance>> {
    parse_transcript(&std::fs::read_to_string(path)?, &path.display().to_string())
}

pub fn format_transcript(utterances: &[Utterance]) -> String {
    let mut s = format!("{TRANSCRIPT_HEADER}\n");
    for u in utterances {
        writeln!(s, "{}\t{}\t{}\t{}", u.start_s, u.stop_s, u.speaker.as_str(), u.text).unwrap();
    }
    s
}

pub fn write_transcript(path: &Path, utterances: &[Utterance]) -> Result<()> {
    std::fs::write(path, format_transcript(utterances))?;
    Ok(())
}

fn sample_index(t: f64, sample_rate: u32) -> usize {
    (t * sample_rate as f64).round() as usize
}

/// Concatenates the samples of `spans` in order.
pub fn concat_spans(signal: &PcmSignal, spans: &[(f64, f64)]) -> Result<PcmSignal> {
    let mut out = Vec::new();
    for &(a, b) in spans {
        let (lo, hi) = (
            sample_index(a, signal.sample_rate),
            sample_index(b, signal.sample_rate),
        );
        if hi > signal.len() {
            return Err(Error::Data(format!(
                "span [{a}, {b}] s extends beyond {:.3} s of audio",
                signal.duration_s()
            )));
        }
        out.extend_from_slice(&signal.samples[lo..hi]);
    }
    PcmSignal::new(out, signal.sample_rate)
}

/// Participant-only audio: Participant spans concatenated in transcript order.
pub fn participant_audio(signal: &PcmSignal, utterances: &[Utterance]) -> Result<PcmSignal> {
    let spans: Vec<(f64, f64)> = utterances
        .iter()
        .filter(|u| u.speaker == Speaker::Participant)
        .map(|u| (u.start_s, u.stop_s))
        .collect();
    concat_spans(signal, &spans)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<u32, Label>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            source_name: name.clone(),
            line: n + 1,
            msg,
        };
        let mut cols = line.split(',');
        let id = cols
            .next()
            .and_then(|s| s.trim().parse::<u32>().ok())
            .ok_or_else(|| err("bad Participant_ID".into()))?;
        let label = match cols.next().map(str::trim) {
            Some("0") => Label::NotDepressed,
            Some("1") => Label::Depressed,
            other => return Err(err(format!("bad PHQ8_Binary {other:?}"))),
        };
        out.insert(id, label);
    }
    Ok(out)
}

fn read_split_list(path: &Path) -> Result<Vec<u32>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<u32>().map_err(|_| Error::Parse {
                source_name: path.display().to_string(),
                line: n + 1,
                msg: format!("bad participant id `{}`", l.trim()),
            })
        })
        .collect()
}

/// Loads every participant named in the split lists. Train and dev
/// participants must be labeled; audio is read only when `with_audio`.
pub fn load_corpus(dir: &Path, with_audio: bool) -> Result<Corpus> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{}: not a corpus directory", dir.display())));
    }
    let labels = read_labels(&dir.join("labels.csv"))?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        for id in read_split_list(&dir.join(split.list_file()))? {
            entries.push((id, split));
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: no split lists found", dir.display())));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some((id, _)) = entries.iter().find(|(id, _)| !seen.insert(*id)) {
        return Err(Error::Data(format!("participant {id} listed in more than one split")));
    }
    let participants = entries
        .par_iter()
        .map(|&(id, split)| {
            let label = labels.get(&id).copied();
            if label.is_none() && split != Split::Test {
                return Err(Error::Data(format!("participant {id} has no label")));
            }
            let utterances = load_transcript(&transcript_path(dir, id))?;
            let audio = if with_audio {
                Some(read_wav(&audio_path(dir, id))?)
            } else {
                None
            };
            Ok(Participant {
                id,
                utterances,
                audio,
                label,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus::new(participants))
}
