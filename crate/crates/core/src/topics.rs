//! Seven-topic tagging of interview utterances driven by a trigger-phrase
//! lexicon.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicId {
    Interests,
    Sleep,
    FeelDepressed,
    FeelFailure,
    Personality,
    DiagnosedPtsdDepression,
    Parenting,
}

impl TopicId {
    pub const ALL: [TopicId; 7] = [
        TopicId::Interests,
        TopicId::Sleep,
        TopicId::FeelDepressed,
        TopicId::FeelFailure,
        TopicId::Personality,
        TopicId::DiagnosedPtsdDepression,
        TopicId::Parenting,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<TopicId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            TopicId::Interests => "interests",
            TopicId::Sleep => "sleep",
            TopicId::FeelDepressed => "feel_depressed",
            TopicId::FeelFailure => "feel_failure",
            TopicId::Personality => "personality",
            TopicId::DiagnosedPtsdDepression => "diagnosed",
            TopicId::Parenting => "parenting",
        }
    }

    pub fn from_name(s: &str) -> Option<TopicId> {
        Self::ALL.iter().copied().find(|t| t.name() == s)
    }
}

impl std::fmt::Display for TopicId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

const DEFAULT_LEXICON: &str = include_str!("../assets/default_lexicon.tsv");

#[derive(Clone, Debug, PartialEq)]
pub struct TopicLexicon {
    triggers: [Vec<String>; 7],
}

impl Default for TopicLexicon {
    fn default() -> Self {
        Self::parse(DEFAULT_LEXICON, "default lexicon").expect("bundled lexicon is valid")
    }
}

impl TopicLexicon {
    /// Parses `topic<TAB>trigger` lines; `#` starts a comment line.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut triggers: [Vec<String>; 7] = Default::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                source_name: source_name.to_string(),
                line: n + 1,
                msg,
            };
            let (topic, phrase) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `topic<TAB>trigger`".into()))?;
            let topic = TopicId::from_name(topic.trim())
                .ok_or_else(|| err(format!("unknown topic `{}`", topic.trim())))?;
            let phrase = phrase.trim().to_lowercase();
            if phrase.is_empty() {
                return Err(err("empty trigger phrase".into()));
            }
            triggers[topic.index()].push(phrase);
        }
        if let Some(t) = TopicId::ALL.iter().find(|t| triggers[t.index()].is_empty()) {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: 0,
                msg: format!("topic `{t}` has no trigger"),
            });
        }
        Ok(TopicLexicon { triggers })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn triggers(&self, topic: TopicId) -> &[String] {
        &self.triggers[topic.index()]
    }

    /// First topic, in `TopicId` order, with a trigger contained in `text`.
    pub fn match_topic(&self, text: &str) -> Option<TopicId> {
        let lower = text.to_lowercase();
        TopicId::ALL
            .iter()
            .copied()
            .find(|t| self.triggers[t.index()].iter().any(|p| lower.contains(p.as_str())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicSegment {
    pub topic: TopicId,
    /// Indices of the member participant utterances in the transcript.
    pub utterance_indices: Vec<usize>,
    pub text: String,
    pub audio_span: Vec<(f64, f64)>,
}

struct Open {
    topic: TopicId,
    members: Vec<usize>,
    remaining: usize,
}

/// Tags participant utterances with topics.
///
/// An Ellie utterance with a trigger opens a segment covering the next
/// `window` participant utterances. A participant utterance with a trigger
/// joins an open segment of the same topic, or else opens its own segment
/// that also takes the following `window − 1` replies. Any trigger of a
/// different topic closes the open segment.
pub fn label_utterances(
    utterances: &[Utterance],
    lexicon: &TopicLexicon,
    window: usize,
) -> Vec<TopicSegment> {
    let window = window.max(1);
    let mut done: Vec<(TopicId, Vec<usize>)> = Vec::new();
    let mut open: Option<Open> = None;
    let close = |open: &mut Option<Open>, done: &mut Vec<(TopicId, Vec<usize>)>| {
        if let Some(o) = open.take() {
            if !o.members.is_empty() {
                done.push((o.topic, o.members));
            }
        }
    };
    for (i, u) in utterances.iter().enumerate() {
        let hit = lexicon.match_topic(&u.text);
        match u.speaker {
            Speaker::Ellie => {
                if let Some(topic) = hit {
                    close(&mut open, &mut done);
                    open = Some(Open {
                        topic,
                        members: Vec::new(),
                        remaining: window,
                    });
                }
            }
            Speaker::Participant => {
                match (hit, open.as_mut()) {
                    (Some(t), Some(o)) if o.topic == t => {
                        o.members.push(i);
                        o.remaining -= 1;
                    }
                    (Some(t), _) => {
                        close(&mut open, &mut done);
                        open = Some(Open {
                            topic: t,
                            members: vec![i],
                            remaining: window - 1,
                        });
                    }
                    (None, Some(o)) => {
                        o.members.push(i);
                        o.remaining -= 1;
                    }
                    (None, None) => {}
                }
                if open.as_ref().is_some_and(|o| o.remaining == 0) {
                    close(&mut open, &mut done);
                }
            }
        }
    }
    close(&mut open, &mut done);

    done.into_iter()
        .map(|(topic, members)| TopicSegment {
            topic,
            text: members
                .iter()
                .map(|&i| utterances[i].text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
            audio_span: members
                .iter()
                .map(|&i| (utterances[i].start_s, utterances[i].stop_s))
                .collect(),
            utterance_indices: members,
        })
        .collect()
}

pub fn topic_coverage(segments: &[TopicSegment]) -> BTreeSet<TopicId> {
    segments.iter().map(|s| s.topic).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TopicStats {
    pub interviews: usize,
    /// Segment count per topic, in `TopicId` order.
    pub segment_counts: [usize; 7],
    /// Interviews containing the topic at least once.
    pub interviews_with_topic: [usize; 7],
    /// Interviews with at least one tagged segment.
    pub interviews_with_any: usize,
}

impl TopicStats {
    pub fn add(&mut self, segments: &[TopicSegment]) {
        self.interviews += 1;
        for s in segments {
            self.segment_counts[s.topic.index()] += 1;
        }
        for t in topic_coverage(segments) {
            self.interviews_with_topic[t.index()] += 1;
        }
        if !segments.is_empty() {
            self.interviews_with_any += 1;
        }
    }

    pub fn render(&self) -> String {
        let n = self.interviews.max(1) as f64;
        let mut out = format!("{:<16} {:>9} {:>10}\n", "topic", "segments", "coverage");
        for t in TopicId::ALL {
            out.push_str(&format!(
                "{:<16} {:>9} {:>9.1}%\n",
                t.name(),
                self.segment_counts[t.index()],
                100.0 * self.interviews_with_topic[t.index()] as f64 / n
            ));
        }
        out.push_str(&format!(
            "interviews: {}  with any topic: {:.1}%\n",
            self.interviews,
            100.0 * self.interviews_with_any as f64 / n
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(speaker: Speaker, text: &str, i: usize) -> Utterance {
        Utterance {
            start_s: i as f64,
            stop_s: i as f64 + 0.5,
            speaker,
            text: text.to_string(),
        }
    }

    #[test]
    fn sleep_question_tags_the_reply() {
        let lex = TopicLexicon::default();
        let u = vec![
            utt(Speaker::Ellie, "how easy is it for you to get a good night's sleep", 0),
            utt(Speaker::Participant, "very i'm a heavy sleeper", 1),
        ];
        let segs = label_utterances(&u, &lex, 3);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].topic, TopicId::Sleep);
        assert_eq!(segs[0].utterance_indices, vec![1]);
        assert_eq!(segs[0].text, "very i'm a heavy sleeper");
        assert_eq!(segs[0].audio_span, vec![(1.0, 1.5)]);
    }

    #[test]
    fn no_triggers_no_segments() {
        let lex = TopicLexicon::default();
        let u = vec![
            utt(Speaker::Ellie, "hello there", 0),
            utt(Speaker::Participant, "hi", 1),
        ];
        assert!(label_utterances(&u, &lex, 3).is_empty());
    }

    #[test]
    fn conflicting_triggers_resolve_by_topic_order() {
        let lex = TopicLexicon::default();
        assert_eq!(
            lex.match_topic("do your kids sleep well"),
            Some(TopicId::Sleep)
        );
    }

    #[test]
    fn window_limits_segment_length() {
        let lex = TopicLexicon::default();
        let mut u = vec![utt(Speaker::Ellie, "what do you do for fun", 0)];
        for i in 1..6 {
            u.push(utt(Speaker::Participant, "stuff", i));
        }
        let segs = label_utterances(&u, &lex, 2);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].utterance_indices, vec![1, 2]);
    }

    #[test]
    fn lexicon_parse_errors_name_the_line() {
        let err = TopicLexicon::parse("sleep\tsleep\nbogus\tx\n", "lex").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(TopicLexicon::parse("sleep\tsleep\n", "lex").is_err());
    }

    #[test]
    fn coverage_counts_distinct_topics() {
        assert!(topic_coverage(&[]).is_empty());
        let seg = |t| TopicSegment {
            topic: t,
            utterance_indices: vec![],
            text: String::new(),
            audio_span: vec![],
        };
        let c = topic_coverage(&[seg(TopicId::Sleep), seg(TopicId::Sleep), seg(TopicId::Interests)]);
        assert_eq!(c.len(), 2);
        assert!(c.contains(&TopicId::Sleep) && c.contains(&TopicId::Interests));
    }
}
