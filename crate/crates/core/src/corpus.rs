//! QA datasets and raw text corpora.
//!
//! All three QA datasets share one JSONL schema:
//! `{"id": str, "question": str, "answers": [[str, ...], ...]}` where each inner
//! list is one annotator's answers (possibly empty, a null annotation).
//! Datasets without multi-annotator structure are stored as a single annotator.

use crate::jsonl::{self, LineError};
use crate::rng::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Open-domain answers longer than this many whitespace tokens are not trained on.
pub const MAX_TARGET_TOKENS: usize = 5;

/// Delimiter placed before every answer in the multi-answer target format.
pub const ANSWER_DELIMITER: &str = "answer:";

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation: {}", jsonl::join_errors(.0))]
    Schema(Vec<LineError>),
    #[error("cannot split an empty example list")]
    EmptyInput,
    #[error("holdout fraction {fraction} of {count} examples leaves no validation example")]
    InvalidFraction { fraction: f64, count: usize },
    #[error("annotator {annotator} of example `{id}` has no answers")]
    EmptyAnnotation { id: String, annotator: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Nq,
    Wq,
    Tqa,
}

impl Dataset {
    pub const ALL: [Dataset; 3] = [Dataset::Nq, Dataset::Wq, Dataset::Tqa];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::Nq => "nq",
            Dataset::Wq => "wq",
            Dataset::Tqa => "tqa",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "nq" => Ok(Dataset::Nq),
            "wq" => Ok(Dataset::Wq),
            "tqa" => Ok(Dataset::Tqa),
            other => Err(format!("unknown dataset `{other}` (expected nq, wq or tqa)")),
        }
    }
}

/// One question with per-annotator gold answer lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub annotator_answers: Vec<Vec<String>>,
    pub dataset: Dataset,
}

impl QaExample {
    /// Every answer of every annotator, in file order.
    pub fn all_answers(&self) -> impl Iterator<Item = &str> {
        self.annotator_answers.iter().flatten().map(String::as_str)
    }

    pub fn non_null_annotations(&self) -> usize {
        self.annotator_answers.iter().filter(|a| !a.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDocument {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_answers(value: Option<&Value>, line: usize) -> Result<Vec<Vec<String>>, LineError> {
    let field = Some("answers");
    let outer = match value {
        Some(Value::Array(outer)) => outer,
        Some(_) => return Err(LineError::new(line, field, "expected a list of answer lists")),
        None => return Err(LineError::new(line, field, "missing")),
    };
    if outer.is_empty() {
        return Err(LineError::new(line, field, "needs at least one annotator entry"));
    }
    outer
        .iter()
        .enumerate()
        .map(|(a, inner)| match inner {
            Value::Array(items) => items
                .iter()
                .map(|item| match item {
                    Value::String(s) => Ok(s.clone()),
                    _ => Err(LineError::new(
                        line,
                        field,
                        format!("annotator {a}: answers must be strings"),
                    )),
                })
                .collect(),
            _ => Err(LineError::new(line, field, format!("annotator {a}: expected a list"))),
        })
        .collect()
}

/// Parse QA JSONL contents, reporting every malformed line.
pub fn parse_qa_dataset(contents: &str, dataset: Dataset) -> Result<Vec<QaExample>, CorpusError> {
    let (objects, mut errors) = jsonl::parse_objects(contents);
    let mut seen = HashSet::new();
    let mut examples = Vec::with_capacity(objects.len());
    for (line, obj) in objects {
        let parsed = (|| {
            jsonl::reject_unknown(&obj, &["id", "question", "answers"], line)?;
            let id = jsonl::require_str(&obj, "id", line)?;
            let question = jsonl::require_str(&obj, "question", line)?;
            if question.is_empty() {
                return Err(LineError::new(line, Some("question"), "must be non-empty"));
            }
            let annotator_answers = parse_answers(obj.get("answers"), line)?;
            if !seen.insert(id.to_string()) {
                return Err(LineError::new(line, Some("id"), format!("duplicate id `{id}`")));
            }
            Ok(QaExample {
                id: id.to_string(),
                question: question.to_string(),
                annotator_answers,
                dataset,
            })
        })();
        match parsed {
            Ok(ex) => examples.push(ex),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(examples)
    } else {
        errors.sort_by_key(|e| e.line);
        Err(CorpusError::Schema(errors))
    }
}

pub fn load_qa_dataset(path: &Path, dataset: Dataset) -> Result<Vec<QaExample>, CorpusError> {
    parse_qa_dataset(&read(path)?, dataset)
}

/// Serialize one example in the canonical schema (no trailing newline).
pub fn qa_to_line(example: &QaExample) -> String {
    serde_json::json!({
        "id": example.id,
        "question": example.question,
        "answers": example.annotator_answers,
    })
    .to_string()
}

pub fn parse_corpus(contents: &str) -> Result<Vec<CorpusDocument>, CorpusError> {
    let (objects, mut errors) = jsonl::parse_objects(contents);
    let mut docs = Vec::with_capacity(objects.len());
    for (line, obj) in objects {
        let parsed = (|| {
            jsonl::reject_unknown(&obj, &["doc_id", "text"], line)?;
            let doc_id = jsonl::require_str(&obj, "doc_id", line)?;
            let text = jsonl::require_str(&obj, "text", line)?;
            if text.is_empty() {
                return Err(LineError::new(line, Some("text"), "must be non-empty"));
            }
            Ok(CorpusDocument {
                doc_id: doc_id.to_string(),
                text: text.to_string(),
            })
        })();
        match parsed {
            Ok(d) => docs.push(d),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(docs)
    } else {
        Err(CorpusError::Schema(errors))
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusDocument>, CorpusError> {
    parse_corpus(&read(path)?)
}

/// Deterministic train/validation partition with `round(fraction * n)` held out.
///
/// Both halves keep the input order.
pub fn make_holdout_split(
    examples: &[QaExample],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<QaExample>, Vec<QaExample>), CorpusError> {
    if examples.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let n = examples.len();
    if !(fraction > 0.0 && fraction < 1.0) || fraction * (n as f64) < 1.0 {
        return Err(CorpusError::InvalidFraction { fraction, count: n });
    }
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 0x484f_4c44));
    let mut held = vec![false; n];
    for &i in &order[..n_val] {
        held[i] = true;
    }
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (ex, is_val) in examples.iter().zip(held) {
        if is_val {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, val))
}

/// The single training target of the open-domain variant: the first answer of the
/// first annotator with a non-empty list, unless it is longer than five tokens.
pub fn open_domain_target(example: &QaExample) -> Option<String> {
    let first = example
        .annotator_answers
        .iter()
        .find(|answers| !answers.is_empty())?
        .first()?;
    (first.split_whitespace().count() <= MAX_TARGET_TOKENS).then(|| first.clone())
}

/// All answers of one annotator as `answer: A1 answer: A2 ...`.
pub fn multi_answer_target(example: &QaExample, annotator: usize) -> Result<String, CorpusError> {
    let answers = example
        .annotator_answers
        .get(annotator)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| CorpusError::EmptyAnnotation {
            id: example.id.clone(),
            annotator,
        })?;
    Ok(answers
        .iter()
        .map(|a| format!("{ANSWER_DELIMITER} {a}"))
        .collect::<Vec<_>>()
        .join(" "))
}

/// Questions with fewer than two non-null annotations are unanswerable in the
/// multi-answer variant.
pub fn is_multi_answerable(example: &QaExample) -> bool {
    example.non_null_annotations() >= 2
}

const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "mt.", "jr.", "sr.", "vs.", "etc.", "e.g.",
    "i.e.", "inc.", "ltd.", "co.", "corp.", "gen.", "col.", "lt.", "sgt.", "capt.", "gov.",
    "sen.", "rep.", "rev.", "no.", "u.s.", "u.k.", "jan.", "feb.", "mar.", "apr.", "jun.",
    "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.", "fig.", "approx.",
];

fn is_abbreviation(text: &str, period_at: usize) -> bool {
    let word_start = text[..period_at]
        .rfind(char::is_whitespace)
        .map(|i| i + text[i..].chars().next().map_or(1, char::len_utf8))
        .unwrap_or(0);
    let word = text[word_start..=period_at].to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Split a document into sentences.
///
/// A boundary is terminal punctuation (`.`, `!`, `?`) followed by whitespace and
/// an uppercase letter, unless the word ending in `.` is a known abbreviation.
pub fn sentence_split(doc: &CorpusDocument) -> Vec<SentenceRecord> {
    let text = doc.text.as_str();
    let mut sentences = Vec::new();
    let mut push = |piece: &str| {
        let piece = piece.trim();
        if !piece.is_empty() {
            sentences.push(SentenceRecord {
                doc_id: doc.doc_id.clone(),
                index: sentences.len(),
                text: piece.to_string(),
            });
        }
    };
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(at, c)) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        let mut j = k + 1;
        if j >= chars.len() || !chars[j].1.is_whitespace() {
            continue;
        }
        while j < chars.len() && chars[j].1.is_whitespace() {
            j += 1;
        }
        if j >= chars.len() || !chars[j].1.is_uppercase() {
            continue;
        }
        if c == '.' && is_abbreviation(text, at) {
            continue;
        }
        push(&text[start..=at]);
        start = at + 1;
    }
    push(&text[start..]);
    sentences
}
