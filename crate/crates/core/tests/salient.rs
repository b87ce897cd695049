use cbqa_core::corpus::{load_corpus, sentence_split};
use cbqa_core::salient::{mask_salient, mine_sentences, tag_salient, MiningConfig, RuleTagger, SpanKind, TaggedSentence};
use cbqa_core::span_corruption::decorrupt;
use cbqa_core::tokenizer::Vocab;
use cbqa_core::SentenceRecord;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::PathBuf;

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ssm_corpus.jsonl")
}

const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November",
    "December",
];
const FUNCTION_WORDS: [&str; 12] = ["The", "They", "He", "She", "Our", "We", "It", "Most", "Some", "A", "In", "On"];

/// Whitespace-token check written independently of the tagger's regexes:
/// a standalone year, a month next to a day or year, or a capitalized
/// content word past the first position (or two at the start).
fn has_salient_span(sentence: &str) -> bool {
    let words: Vec<&str> = sentence
        .split_whitespace()
        .map(|w| w.trim_end_matches(|c: char| ".,;:!?".contains(c)))
        .collect();
    let is_year = |w: &str| w.len() == 4 && w.chars().all(|c| c.is_ascii_digit()) && (w.starts_with('1') || w.starts_with('2'));
    let is_day = |w: &str| {
        let digits: String = w.chars().take_while(char::is_ascii_digit).collect();
        (1..=2).contains(&digits.len()) && ["", "st", "nd", "rd", "th"].contains(&&w[digits.len()..])
    };
    let content = |w: &str| {
        w.chars().next().is_some_and(char::is_uppercase) && !FUNCTION_WORDS.contains(&w) && !MONTHS.contains(&w)
    };
    for (i, w) in words.iter().enumerate() {
        if is_year(w) {
            return true;
        }
        if MONTHS.contains(w) {
            let before = i > 0 && is_day(words[i - 1]);
            let after = words.get(i + 1).is_some_and(|n| is_day(n) || is_year(n));
            if before || after {
                return true;
            }
        }
        if content(w) && (i > 0 || words.get(1).is_some_and(|n| content(n))) {
            return true;
        }
    }
    false
}

#[test]
fn fixture_mining_matches_oracle() {
    let docs = load_corpus(&fixture()).unwrap();
    let sentences: Vec<SentenceRecord> = docs.iter().flat_map(sentence_split).collect();
    assert_eq!(sentences.len(), 50);
    let expected: Vec<&SentenceRecord> = sentences.iter().filter(|s| has_salient_span(&s.text)).collect();
    assert_eq!(expected.len(), 31);
    for s in &sentences {
        let spans = tag_salient(&s.text, &RuleTagger).unwrap();
        assert_eq!(!spans.is_empty(), has_salient_span(&s.text), "{:?}", s.text);
    }
    let (mined, stats) = mine_sentences(docs, &RuleTagger, MiningConfig::default()).unwrap();
    assert_eq!(mined.len(), 31);
    assert_eq!((stats.documents, stats.scanned, stats.kept), (10, 50, 31));
    let kept: Vec<&str> = mined.iter().map(|t| t.sentence.text.as_str()).collect();
    let oracle: Vec<&str> = expected.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(kept, oracle);
}

#[test]
fn every_fixture_pair_has_one_sentinel() {
    let docs = load_corpus(&fixture()).unwrap();
    let (mined, _) = mine_sentences(docs, &RuleTagger, MiningConfig::default()).unwrap();
    let vocab = Vocab::bytes_only(100);
    for (i, t) in mined.iter().enumerate() {
        for stream in 0..20u64 {
            let pair = mask_salient(t, &vocab, stream * 1000 + i as u64).unwrap();
            assert_eq!(pair.sentinel_count_in_inputs(&vocab), 1);
            assert_eq!(decorrupt(&vocab, &pair).unwrap(), vocab.encode(&t.sentence.text));
        }
    }
}

fn four_span_sentence() -> TaggedSentence {
    let text = "Claude Shannon met Alan Turing in London in 1943.";
    let spans = tag_salient(text, &RuleTagger).unwrap();
    TaggedSentence {
        sentence: SentenceRecord {
            doc_id: "d".into(),
            index: 0,
            text: text.into(),
        },
        spans,
    }
}

#[test]
fn span_selection_is_uniform() {
    let t = four_span_sentence();
    let labels: Vec<&str> = t.spans.iter().map(|s| s.text(&t.sentence.text)).collect();
    assert_eq!(labels, ["Claude Shannon", "Alan Turing", "London", "1943"]);
    assert_eq!(t.spans[3].kind, SpanKind::Date);
    let vocab = Vocab::bytes_only(100);
    let n = 10_000u64;
    let mut counts = [0u64; 4];
    for stream in 0..n {
        let pair = mask_salient(&t, &vocab, stream).unwrap();
        let body = &pair.targets[1..pair.targets.len() - 2];
        let chosen = vocab.decode(body).unwrap();
        counts[labels.iter().position(|l| *l == chosen).unwrap()] += 1;
    }
    let expected = n as f64 / 4.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
    assert!(p > 0.001, "counts {counts:?}, chi2 {chi2}, p {p}");
}

#[test]
fn singleton_span_always_masked() {
    let vocab = Vocab::bytes_only(100);
    let text = "The bridge opened in 1937.";
    let t = TaggedSentence {
        sentence: SentenceRecord {
            doc_id: "d".into(),
            index: 0,
            text: text.into(),
        },
        spans: tag_salient(text, &RuleTagger).unwrap(),
    };
    for stream in 0..50 {
        let pair = mask_salient(&t, &vocab, stream).unwrap();
        assert_eq!(vocab.render(&pair.inputs), "The bridge opened in <S0>.");
    }
}
