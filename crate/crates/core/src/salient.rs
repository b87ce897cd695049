//! Salient span mining and single-span masking.
//!
//! The built-in [`RuleTagger`] marks dates (standalone years 1000-2999, and month
//! names with a day and/or year) and entities (maximal runs of capitalized words;
//! a run at the start of the sentence needs at least two words). Any other
//! tagger, including pre-annotated span files, plugs in through [`SalientTagger`].

use crate::corpus::{sentence_split, CorpusDocument, SentenceRecord};
use crate::jsonl::{self, LineError};
use crate::rng::stream_rng;
use crate::span_corruption::CorruptedPair;
use crate::tokenizer::{TokenizerError, Vocab, EOS_ID};
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;
use std::sync::OnceLock;

/// Domain key for the span-selection stream.
const SELECT_SEED: u64 = 0x0053_534d_5f53_454c;

#[derive(Debug, thiserror::Error)]
pub enum SalientError {
    #[error("tagger failed on sentence {sentence:?}: {message}")]
    Tagger { sentence: String, message: String },
    #[error("document `{doc_id}`: {source}")]
    Document {
        doc_id: String,
        #[source]
        source: Box<SalientError>,
    },
    #[error("sentence has no salient span")]
    NoSpans,
    #[error("span {start}..{end} cannot be aligned to the sentence bytes (length {len})")]
    Misaligned { start: usize, end: usize, len: usize },
    #[error("span file: {}", jsonl::join_errors(.0))]
    Schema(Vec<LineError>),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpanKind {
    Entity,
    Date,
}

/// Half-open byte range `[start, end)` into a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SalientSpan {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

impl SalientSpan {
    pub fn text<'a>(&self, sentence: &'a str) -> &'a str {
        &sentence[self.start..self.end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub sentence: SentenceRecord,
    pub spans: Vec<SalientSpan>,
}

pub trait SalientTagger: Send + Sync {
    /// Raw candidate spans; overlap resolution and validation happen in [`tag_salient`].
    fn candidates(&self, text: &str) -> Result<Vec<SalientSpan>, String>;
}

const MONTHS: &str = "January|February|March|April|May|June|July|August|September|October|November|December";

const STOPWORDS: &[&str] = &[
    "A", "After", "Again", "All", "Also", "Although", "An", "And", "Are", "As", "At", "Because",
    "Before", "Both", "But", "By", "During", "Each", "Every", "For", "From", "He", "Her", "Here",
    "His", "How", "However", "I", "If", "In", "Into", "Is", "It", "Its", "Many", "Most", "My",
    "No", "Not", "Of", "On", "Once", "One", "Or", "Our", "She", "Since", "So", "Some", "That",
    "The", "Their", "Then", "There", "These", "They", "This", "Those", "To", "Under", "We",
    "Were", "Was", "What", "When", "Where", "Which", "While", "Who", "Why", "With", "Yes", "You",
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December", "Monday", "Tuesday", "Wednesday", "Thursday", "Friday",
    "Saturday", "Sunday",
];

struct Patterns {
    month_date: Regex,
    year: Regex,
    word: Regex,
}

fn patterns() -> &'static Patterns {
    static PATTERNS: OnceLock<Patterns> = OnceLock::new();
    PATTERNS.get_or_init(|| Patterns {
        month_date: Regex::new(&format!(
            r"(?:\b\d{{1,2}}\s+)?\b(?:{MONTHS})\b(?:\s+\d{{1,2}}(?:st|nd|rd|th)?\b)?(?:,?\s+[12]\d{{3}}\b)?"
        ))
        .expect("valid date pattern"),
        year: Regex::new(r"\b[12]\d{3}\b").expect("valid year pattern"),
        word: Regex::new(r"[\p{L}\p{N}][\p{L}\p{N}'’\-]*").expect("valid word pattern"),
    })
}

/// Deterministic rule-based tagger for entities and dates.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleTagger;

impl RuleTagger {
    fn dates(text: &str, out: &mut Vec<SalientSpan>) {
        let p = patterns();
        for m in p.month_date.find_iter(text) {
            // A bare month name ("May") is too ambiguous to count as a date.
            if MONTHS.split('|').any(|month| m.as_str() == month) {
                continue;
            }
            out.push(SalientSpan { start: m.start(), end: m.end(), kind: SpanKind::Date });
        }
        for m in p.year.find_iter(text) {
            out.push(SalientSpan { start: m.start(), end: m.end(), kind: SpanKind::Date });
        }
    }

    fn entities(text: &str, out: &mut Vec<SalientSpan>) {
        let words: Vec<_> = patterns().word.find_iter(text).collect();
        let mut run: Vec<usize> = Vec::new();
        let mut flush = |run: &mut Vec<usize>| {
            if let (Some(&first), Some(&last)) = (run.first(), run.last()) {
                if first > 0 || run.len() >= 2 {
                    out.push(SalientSpan {
                        start: words[first].start(),
                        end: words[last].end(),
                        kind: SpanKind::Entity,
                    });
                }
            }
            run.clear();
        };
        for (i, w) in words.iter().enumerate() {
            let s = w.as_str();
            let capitalized = s.chars().next().is_some_and(char::is_uppercase);
            if !capitalized || STOPWORDS.contains(&s) {
                flush(&mut run);
                continue;
            }
            let adjacent = run.last().is_some_and(|&prev| {
                text[words[prev].end()..w.start()].chars().all(char::is_whitespace)
            });
            if !adjacent {
                flush(&mut run);
            }
            run.push(i);
        }
        flush(&mut run);
    }
}

impl SalientTagger for RuleTagger {
    fn candidates(&self, text: &str) -> Result<Vec<SalientSpan>, String> {
        let mut spans = Vec::new();
        Self::dates(text, &mut spans);
        Self::entities(text, &mut spans);
        Ok(spans)
    }
}

/// Spans looked up by exact sentence text, e.g. from a pre-annotated file.
#[derive(Debug, Clone, Default)]
pub struct AnnotatedTagger {
    spans: HashMap<String, Vec<SalientSpan>>,
}

impl AnnotatedTagger {
    pub fn new(sentences: impl IntoIterator<Item = (String, Vec<SalientSpan>)>) -> Self {
        AnnotatedTagger { spans: sentences.into_iter().collect() }
    }
}

impl SalientTagger for AnnotatedTagger {
    fn candidates(&self, text: &str) -> Result<Vec<SalientSpan>, String> {
        Ok(self.spans.get(text).cloned().unwrap_or_default())
    }
}

fn check_span(text: &str, span: &SalientSpan) -> Result<(), SalientError> {
    let misaligned = || SalientError::Misaligned { start: span.start, end: span.end, len: text.len() };
    if span.start >= span.end
        || span.end > text.len()
        || !text.is_char_boundary(span.start)
        || !text.is_char_boundary(span.end)
    {
        return Err(misaligned());
    }
    let inner = &text[span.start..span.end];
    if inner.starts_with(char::is_whitespace) || inner.ends_with(char::is_whitespace) {
        return Err(misaligned());
    }
    Ok(())
}

/// Drop overlapping spans: longer spans win, then earlier starts. Result is sorted by start.
pub fn resolve_overlaps(mut spans: Vec<SalientSpan>) -> Vec<SalientSpan> {
    spans.sort_by(|a, b| {
        (b.end - b.start)
            .cmp(&(a.end - a.start))
            .then(a.start.cmp(&b.start))
            .then((a.kind as u8).cmp(&(b.kind as u8)))
    });
    let mut kept: Vec<SalientSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        if kept.iter().all(|k| s.end <= k.start || s.start >= k.end) {
            kept.push(s);
        }
    }
    kept.sort_by_key(|s| s.start);
    kept
}

pub fn tag_salient(text: &str, tagger: &dyn SalientTagger) -> Result<Vec<SalientSpan>, SalientError> {
    let raw = tagger.candidates(text).map_err(|message| SalientError::Tagger {
        sentence: text.to_string(),
        message,
    })?;
    for span in &raw {
        check_span(text, span).map_err(|e| SalientError::Tagger {
            sentence: text.to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(resolve_overlaps(raw))
}

/// Optional sentence length filters (bytes); unset bounds do not filter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
}

impl MiningConfig {
    fn accepts(&self, text: &str) -> bool {
        self.min_len.is_none_or(|m| text.len() >= m) && self.max_len.is_none_or(|m| text.len() <= m)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MiningStats {
    pub documents: usize,
    pub scanned: usize,
    pub kept: usize,
}

/// Streams tagged sentences out of a document iterator, in corpus order.
pub struct SentenceMiner<'t, I> {
    docs: I,
    tagger: &'t dyn SalientTagger,
    config: MiningConfig,
    pending: std::vec::IntoIter<SentenceRecord>,
    doc_id: String,
    stats: MiningStats,
}

impl<'t, I: Iterator<Item = CorpusDocument>> SentenceMiner<'t, I> {
    pub fn new(docs: I, tagger: &'t dyn SalientTagger, config: MiningConfig) -> Self {
        SentenceMiner {
            docs,
            tagger,
            config,
            pending: Vec::new().into_iter(),
            doc_id: String::new(),
            stats: MiningStats::default(),
        }
    }

    pub fn stats(&self) -> MiningStats {
        self.stats
    }
}

impl<I: Iterator<Item = CorpusDocument>> Iterator for SentenceMiner<'_, I> {
    type Item = Result<TaggedSentence, SalientError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(sentence) = self.pending.next() {
                self.stats.scanned += 1;
                if !self.config.accepts(&sentence.text) {
                    continue;
                }
                match tag_salient(&sentence.text, self.tagger) {
                    Ok(spans) if spans.is_empty() => continue,
                    Ok(spans) => {
                        self.stats.kept += 1;
                        return Some(Ok(TaggedSentence { sentence, spans }));
                    }
                    Err(e) => {
                        return Some(Err(SalientError::Document {
                            doc_id: self.doc_id.clone(),
                            source: Box::new(e),
                        }))
                    }
                }
            }
            let doc = self.docs.next()?;
            self.stats.documents += 1;
            self.doc_id = doc.doc_id.clone();
            self.pending = sentence_split(&doc).into_iter();
        }
    }
}

/// Collect every sentence with at least one span.
pub fn mine_sentences(
    docs: impl IntoIterator<Item = CorpusDocument>,
    tagger: &dyn SalientTagger,
    config: MiningConfig,
) -> Result<(Vec<TaggedSentence>, MiningStats), SalientError> {
    let mut miner = SentenceMiner::new(docs.into_iter(), tagger, config);
    let sentences = miner.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((sentences, miner.stats()))
}

/// Mask exactly one span, chosen uniformly per `stream_index`.
///
/// Prefix, span and suffix are encoded independently so the target is the
/// span's own encoding and re-splicing reproduces the sentence bytes.
pub fn mask_salient(tagged: &TaggedSentence, vocab: &Vocab, stream_index: u64) -> Result<CorruptedPair, SalientError> {
    if tagged.spans.is_empty() {
        return Err(SalientError::NoSpans);
    }
    let text = tagged.sentence.text.as_str();
    let choice = if tagged.spans.len() == 1 {
        0
    } else {
        stream_rng(SELECT_SEED, stream_index).random_range(0..tagged.spans.len())
    };
    let span = tagged.spans[choice];
    check_span(text, &span)?;
    let s0 = vocab.sentinel_id(0)?;
    let s1 = vocab.sentinel_id(1)?;
    let mut inputs = vocab.encode(&text[..span.start]);
    inputs.push(s0);
    inputs.extend(vocab.encode(&text[span.end..]));
    let mut targets = vec![s0];
    targets.extend(vocab.encode(&text[span.start..span.end]));
    targets.push(s1);
    targets.push(EOS_ID);
    Ok(CorruptedPair { inputs, targets })
}

/// Read `{"text": str, "spans": [{"start","end","kind"}]}` lines.
pub fn parse_annotated_spans(contents: &str) -> Result<Vec<TaggedSentence>, SalientError> {
    let (objects, mut errors) = jsonl::parse_objects(contents);
    let mut out = Vec::new();
    for (line, obj) in objects {
        let parsed = (|| {
            jsonl::reject_unknown(&obj, &["text", "spans"], line)?;
            let text = jsonl::require_str(&obj, "text", line)?;
            let spans: Vec<SalientSpan> = match obj.get("spans") {
                Some(v @ Value::Array(_)) => serde_json::from_value(v.clone())
                    .map_err(|e| LineError::new(line, Some("spans"), e.to_string()))?,
                Some(_) => return Err(LineError::new(line, Some("spans"), "expected a list")),
                None => return Err(LineError::new(line, Some("spans"), "missing")),
            };
            for s in &spans {
                check_span(text, s).map_err(|e| LineError::new(line, Some("spans"), e.to_string()))?;
            }
            let resolved = resolve_overlaps(spans.clone());
            if resolved.len() != spans.len() {
                return Err(LineError::new(line, Some("spans"), "spans overlap"));
            }
            Ok(TaggedSentence {
                sentence: SentenceRecord { doc_id: format!("line{line}"), index: 0, text: text.to_string() },
                spans: resolved,
            })
        })();
        match parsed {
            Ok(t) if t.spans.is_empty() => {}
            Ok(t) => out.push(t),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(SalientError::Schema(errors))
    }
}
