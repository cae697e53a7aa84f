use std::collections::BTreeSet;

use moodpipe::corpus::{
    load_corpus, participant_audio, synth_corpus, Label, Speaker, Split, SynthConfig, Utterance,
};
use moodpipe::topics::{label_utterances, topic_coverage, TopicId, TopicLexicon};

fn small(seed: u64) -> SynthConfig {
    SynthConfig::new(seed, 2, 3, 1, 2)
}

#[test]
fn synth_round_trips_through_files() {
    let corpus = synth_corpus(&small(11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.write(dir.path()).unwrap();
    let loaded = load_corpus(dir.path(), true).unwrap();
    assert_eq!(loaded, corpus);

    let no_audio = load_corpus(dir.path(), false).unwrap();
    assert!(no_audio.participants.iter().all(|p| p.audio.is_none()));
}

#[test]
fn same_seed_gives_identical_files() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for d in &dirs {
        synth_corpus(&small(5)).unwrap().write(d.path()).unwrap();
    }
    let list = |p: &std::path::Path| {
        let mut v: Vec<_> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    let names = list(dirs[0].path());
    assert_eq!(names, list(dirs[1].path()));
    assert!(names.len() > 10);
    for n in names {
        let a = std::fs::read(dirs[0].path().join(&n)).unwrap();
        let b = std::fs::read(dirs[1].path().join(&n)).unwrap();
        assert!(a == b, "{n:?} differs");
    }
    let other = synth_corpus(&small(6)).unwrap();
    assert_ne!(other, synth_corpus(&small(5)).unwrap());
}

#[test]
fn full_sized_synthetic_split_keeps_class_ratio_and_eligibility() {
    let mut cfg = SynthConfig::new(7, 31, 76, 12, 23);
    cfg.render_audio = false;
    let corpus = synth_corpus(&cfg).unwrap();
    let counts = corpus.split_counts();
    assert_eq!(counts[&Split::Train], 107);
    assert_eq!(counts[&Split::Dev], 35);
    let dep = corpus
        .in_split(Split::Train)
        .filter(|p| p.label == Some(Label::Depressed))
        .count();
    assert_eq!(dep, 31);
    let lex = TopicLexicon::default();
    for p in &corpus.participants {
        let segs = label_utterances(&p.utterances, &lex, 3);
        assert!(topic_coverage(&segs).len() > 2);
    }
}

#[test]
fn synthetic_audio_spans_fit_the_recording() {
    let corpus = synth_corpus(&small(2)).unwrap();
    for p in &corpus.participants {
        let pa = p.participant_audio().unwrap();
        let sr = pa.sample_rate as f64;
        let expect: usize = p
            .utterances
            .iter()
            .filter(|u| u.speaker == Speaker::Participant)
            .map(|u| ((u.stop_s * sr).round() - (u.start_s * sr).round()) as usize)
            .sum();
        assert_eq!(pa.len(), expect);
        let direct = participant_audio(p.audio.as_ref().unwrap(), &p.utterances).unwrap();
        assert_eq!(direct, pa);
    }
}

// Six utterance kinds: Ellie/Participant × {sleep trigger, interests trigger, none}.
fn kind(k: usize, i: usize) -> Utterance {
    let (speaker, text) = match k {
        0 => (Speaker::Ellie, "have you been sleeping well"),
        1 => (Speaker::Ellie, "what do you do for fun"),
        2 => (Speaker::Ellie, "okay"),
        3 => (Speaker::Participant, "i sleep fine"),
        4 => (Speaker::Participant, "my hobbies are nice"),
        _ => (Speaker::Participant, "yes"),
    };
    Utterance {
        start_s: i as f64,
        stop_s: i as f64 + 0.5,
        speaker,
        text: text.to_string(),
    }
}

#[test]
fn exhaustive_six_utterance_labeling_invariants() {
    let lex = TopicLexicon::default();
    for code in 0..6usize.pow(6) {
        let mut c = code;
        let utts: Vec<Utterance> = (0..6)
            .map(|i| {
                let u = kind(c % 6, i);
                c /= 6;
                u
            })
            .collect();
        let segs = label_utterances(&utts, &lex, 3);
        let mut used = BTreeSet::new();
        let mut last_end = None;
        for s in &segs {
            assert!(!s.utterance_indices.is_empty());
            assert!(s.utterance_indices.len() <= 3);
            assert!(s.utterance_indices.windows(2).all(|w| w[0] < w[1]));
            for &i in &s.utterance_indices {
                assert_eq!(utts[i].speaker, Speaker::Participant);
                assert!(used.insert(i), "overlap at {i} in {code}");
            }
            if let Some(e) = last_end {
                assert!(s.utterance_indices[0] > e);
            }
            last_end = s.utterance_indices.last().copied();
            let joined: Vec<&str> = s.utterance_indices.iter().map(|&i| utts[i].text.as_str()).collect();
            assert_eq!(s.text, joined.join(" "));
            // Participant utterances between members are members too.
            let (lo, hi) = (s.utterance_indices[0], *s.utterance_indices.last().unwrap());
            for (i, u) in utts.iter().enumerate().take(hi + 1).skip(lo) {
                if u.speaker == Speaker::Participant {
                    assert!(s.utterance_indices.contains(&i));
                }
            }
            // A participant trigger inside a segment always matches its topic.
            for &i in &s.utterance_indices {
                if let Some(t) = lex.match_topic(&utts[i].text) {
                    assert_eq!(t, s.topic);
                }
            }
        }
        // Untriggered participant replies with no preceding trigger are untagged.
        let first_trigger = utts.iter().position(|u| lex.match_topic(&u.text).is_some());
        for &i in &used {
            assert!(first_trigger.is_some_and(|f| f <= i));
        }
    }
}

#[test]
fn two_topics_in_sequence_give_two_disjoint_segments() {
    let lex = TopicLexicon::default();
    let utts: Vec<Utterance> = [0, 5, 5, 1, 5, 5].iter().enumerate().map(|(i, &k)| kind(k, i)).collect();
    let segs = label_utterances(&utts, &lex, 3);
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[0].topic, TopicId::Sleep);
    assert_eq!(segs[0].utterance_indices, vec![1, 2]);
    assert_eq!(segs[1].topic, TopicId::Interests);
    assert_eq!(segs[1].utterance_indices, vec![4, 5]);
}
