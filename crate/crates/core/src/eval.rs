//! Answer normalization, exact match and multi-answer recall.

use crate::corpus::{is_multi_answerable, QaExample, ANSWER_DELIMITER};
use crate::jsonl::{self, LineError};
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::LazyLock;

static PUNCTUATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\p{P}").expect("valid regex"));

const ARTICLES: [&str; 3] = ["a", "an", "the"];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("duplicate prediction for id `{0}`")]
    DuplicatePrediction(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation: {}", jsonl::join_errors(.0))]
    Schema(Vec<LineError>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    OpenDomainEm,
    MultiAnswerRecall,
}

impl EvalMode {
    pub fn label(self) -> &'static str {
        match self {
            EvalMode::OpenDomainEm => "EM",
            EvalMode::MultiAnswerRecall => "Recall",
        }
    }
}

/// Lowercase, delete punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let stripped = PUNCTUATION.replace_all(&lower, "");
    stripped
        .split_whitespace()
        .filter(|tok| !ARTICLES.contains(tok))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Index of the first annotator with an answer matching `prediction` after normalization.
pub fn exact_match_annotator(prediction: &str, example: &QaExample) -> Option<usize> {
    let p = normalize(prediction);
    example
        .annotator_answers
        .iter()
        .position(|answers| answers.iter().any(|a| normalize(a) == p))
}

pub fn exact_match(prediction: &str, example: &QaExample) -> bool {
    exact_match_annotator(prediction, example).is_some()
}

/// Split a multi-answer prediction on the `answer:` delimiter.
///
/// Pieces are trimmed and empty pieces dropped, so a prediction with no
/// delimiter is a single answer.
pub fn split_answers(prediction: &str) -> Vec<String> {
    prediction
        .split(ANSWER_DELIMITER)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Recall-mode match: `None` when the example has fewer than two non-null
/// annotations, otherwise the first annotator whose answers are all predicted.
pub fn multi_answer_recall_annotator(prediction: &str, example: &QaExample) -> Option<Option<usize>> {
    if !is_multi_answerable(example) {
        return None;
    }
    let predicted: HashSet<String> = split_answers(prediction).iter().map(|a| normalize(a)).collect();
    Some(example.annotator_answers.iter().position(|answers| {
        !answers.is_empty() && answers.iter().all(|a| predicted.contains(&normalize(a)))
    }))
}

pub fn multi_answer_recall_match(prediction: &str, example: &QaExample) -> Option<bool> {
    multi_answer_recall_annotator(prediction, example).map(|m| m.is_some())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub id: String,
    pub prediction: String,
    pub matched: bool,
    pub matched_annotator: Option<usize>,
    /// Excluded from the denominator (recall mode, unanswerable).
    pub skipped: bool,
    /// No prediction was supplied; scored as unmatched.
    pub missing_prediction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: EvalMode,
    /// Percentage of evaluated examples matched (0 when nothing was evaluated).
    pub score: f64,
    pub matched: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_example: Vec<ExampleOutcome>,
    pub aggregate: Aggregate,
    /// Prediction ids that do not occur in the dataset.
    pub unknown_ids: Vec<String>,
}

impl EvalReport {
    pub fn summary_line(&self) -> String {
        format!("{}: {:.2}", self.aggregate.mode.label(), self.aggregate.score)
    }

    pub fn unmatched(&self) -> impl Iterator<Item = &ExampleOutcome> {
        self.per_example.iter().filter(|o| !o.matched && !o.skipped)
    }
}

/// Score `predictions` (id, text) against `dataset` in file order.
pub fn evaluate(
    predictions: &[(String, String)],
    dataset: &[QaExample],
    mode: EvalMode,
) -> Result<EvalReport, EvalError> {
    let mut by_id: HashMap<&str, &str> = HashMap::with_capacity(predictions.len());
    for (id, pred) in predictions {
        if by_id.insert(id, pred).is_some() {
            return Err(EvalError::DuplicatePrediction(id.clone()));
        }
    }
    let known: HashSet<&str> = dataset.iter().map(|e| e.id.as_str()).collect();
    let unknown_ids = predictions
        .iter()
        .filter(|(id, _)| !known.contains(id.as_str()))
        .map(|(id, _)| id.clone())
        .collect();
    let per_example: Vec<ExampleOutcome> = dataset
        .iter()
        .map(|ex| {
            let pred = by_id.get(ex.id.as_str()).copied();
            let text = pred.unwrap_or("");
            let (skipped, annotator) = match mode {
                EvalMode::OpenDomainEm => (false, exact_match_annotator(text, ex)),
                EvalMode::MultiAnswerRecall => match multi_answer_recall_annotator(text, ex) {
                    None => (true, None),
                    Some(a) => (false, a),
                },
            };
            let annotator = if pred.is_some() { annotator } else { None };
            ExampleOutcome {
                id: ex.id.clone(),
                prediction: text.to_string(),
                matched: annotator.is_some(),
                matched_annotator: annotator,
                skipped,
                missing_prediction: pred.is_none(),
            }
        })
        .collect();
    let evaluated = per_example.iter().filter(|o| !o.skipped).count();
    let matched = per_example.iter().filter(|o| o.matched).count();
    let score = if evaluated == 0 {
        0.0
    } else {
        100.0 * matched as f64 / evaluated as f64
    };
    let aggregate = Aggregate {
        mode,
        score,
        matched,
        evaluated,
        skipped: per_example.len() - evaluated,
        missing: per_example.iter().filter(|o| o.missing_prediction).count(),
    };
    Ok(EvalReport {
        per_example,
        aggregate,
        unknown_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
}

pub fn parse_predictions(contents: &str) -> Result<Vec<(String, String)>, EvalError> {
    let (objects, mut errors) = jsonl::parse_objects(contents);
    let mut out = Vec::with_capacity(objects.len());
    for (line, obj) in &objects {
        let fields = jsonl::reject_unknown(obj, &["id", "prediction"], *line).and_then(|_| {
            Ok((
                jsonl::require_str(obj, "id", *line)?,
                jsonl::require_str(obj, "prediction", *line)?,
            ))
        });
        match fields {
            Ok((id, p)) => out.push((id.to_string(), p.to_string())),
            Err(e) => errors.push(e),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        errors.sort_by_key(|e| e.line);
        Err(EvalError::Schema(errors))
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<(String, String)>, EvalError> {
    let contents = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_predictions(&contents)
}
