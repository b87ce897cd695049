//! False-negative adjudication.
//!
//! Incorrect predictions are sampled into an append-only journal store where a
//! human assigns one of four categories. The store replays its journal on open,
//! so a crash can lose at most the line being written.

use crate::corpus::QaExample;
use crate::eval::{normalize, EvalReport};
use crate::rng::stream_rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

const SAMPLE_STREAM: u64 = 0x4155_4449;
const HIGH_OVERLAP: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("journal {path} line {line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("journal {0} already exists")]
    Exists(String),
    #[error("only {available} unmatched examples, cannot sample {requested}")]
    TooFewUnmatched { available: usize, requested: usize },
    #[error("example `{0}` is not in the report's dataset")]
    MissingExample(String),
    #[error("unknown example id `{0}`")]
    UnknownId(String),
    #[error("example `{id}` is already labeled {label}; pass overwrite to relabel")]
    AlreadyLabeled { id: String, label: Category },
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("no labeled records")]
    NoLabels,
    #[error("invalid base score: {correct} correct of {total}")]
    InvalidBase { correct: usize, total: usize },
    #[error("adjusted denominator is zero (every incorrect example removed)")]
    ZeroDenominator,
    #[error("audit TSV line {line}: {message}")]
    Tsv { line: usize, message: String },
}

/// The four false-negative categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    TrueNegative,
    PhrasingMismatch,
    IncompleteAnnotation,
    Unanswerable,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::TrueNegative,
        Category::PhrasingMismatch,
        Category::IncompleteAnnotation,
        Category::Unanswerable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::TrueNegative => "TrueNegative",
            Category::PhrasingMismatch => "PhrasingMismatch",
            Category::IncompleteAnnotation => "IncompleteAnnotation",
            Category::Unanswerable => "Unanswerable",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                format!("unknown category `{s}` (expected TrueNegative, PhrasingMismatch, IncompleteAnnotation or Unanswerable)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AutoFlag {
    HighOverlap,
    GoldContainsPred,
    PredContainsGold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub example_id: String,
    pub question: String,
    pub gold_answers: Vec<Vec<String>>,
    pub prediction: String,
    pub auto_flags: BTreeSet<AutoFlag>,
    pub label: Option<Category>,
    pub reference: Option<String>,
    /// Unix seconds of the latest label.
    pub labeled_at: Option<u64>,
}

impl AuditRecord {
    pub fn new(example: &QaExample, prediction: &str) -> Self {
        AuditRecord {
            example_id: example.id.clone(),
            question: example.question.clone(),
            gold_answers: example.annotator_answers.clone(),
            prediction: prediction.to_string(),
            auto_flags: auto_flags(prediction, example.all_answers()),
            label: None,
            reference: None,
            labeled_at: None,
        }
    }

    /// Record content that survives an export/import round trip.
    pub fn without_timestamp(&self) -> AuditRecord {
        AuditRecord {
            labeled_at: None,
            ..self.clone()
        }
    }
}

fn jaccard(a: &str, b: &str) -> f64 {
    let x: HashSet<&str> = a.split(' ').filter(|t| !t.is_empty()).collect();
    let y: HashSet<&str> = b.split(' ').filter(|t| !t.is_empty()).collect();
    let union = x.union(&y).count();
    if union == 0 {
        return 0.0;
    }
    x.intersection(&y).count() as f64 / union as f64
}

/// Triage hints from normalized token overlap and substring containment.
pub fn auto_flags<'a>(prediction: &str, gold: impl IntoIterator<Item = &'a str>) -> BTreeSet<AutoFlag> {
    let p = normalize(prediction);
    let mut flags = BTreeSet::new();
    for g in gold {
        let g = normalize(g);
        if jaccard(&p, &g) >= HIGH_OVERLAP {
            flags.insert(AutoFlag::HighOverlap);
        }
        if !p.is_empty() && g.contains(&p) {
            flags.insert(AutoFlag::GoldContainsPred);
        }
        if !g.is_empty() && p.contains(&g) {
            flags.insert(AutoFlag::PredContainsGold);
        }
    }
    flags
}

/// Uniform, seeded sample of the report's unmatched (and not skipped) examples.
///
/// Records keep the report's order.
pub fn surface_candidates(
    report: &EvalReport,
    dataset: &[QaExample],
    sample_size: usize,
    seed: u64,
) -> Result<Vec<AuditRecord>, AuditError> {
    let unmatched: Vec<_> = report.unmatched().collect();
    if unmatched.len() < sample_size {
        return Err(AuditError::TooFewUnmatched {
            available: unmatched.len(),
            requested: sample_size,
        });
    }
    let by_id: HashMap<&str, &QaExample> = dataset.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut rng = stream_rng(seed, SAMPLE_STREAM);
    let mut picked = rand::seq::index::sample(&mut rng, unmatched.len(), sample_size).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let o = unmatched[i];
            let ex = by_id.get(o.id.as_str()).ok_or_else(|| AuditError::MissingExample(o.id.clone()))?;
            Ok(AuditRecord::new(ex, &o.prediction))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseScore {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub counts: BTreeMap<Category, usize>,
    /// Percentages of labeled records, rounded to one decimal.
    pub percentages: BTreeMap<Category, f64>,
    pub labeled: usize,
}

impl CategorySummary {
    pub fn from_counts(counts: BTreeMap<Category, usize>) -> Result<Self, AuditError> {
        let mut full: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
        full.extend(counts);
        let labeled: usize = full.values().sum();
        if labeled == 0 {
            return Err(AuditError::NoLabels);
        }
        let percentages = full
            .iter()
            .map(|(&c, &n)| (c, (1000.0 * n as f64 / labeled as f64).round() / 10.0))
            .collect();
        Ok(CategorySummary {
            counts: full,
            percentages,
            labeled,
        })
    }

    /// Exact fraction of labeled records in `category`.
    pub fn fraction(&self, category: Category) -> f64 {
        self.counts[&category] as f64 / self.labeled as f64
    }
}

/// Fractions of incorrect predictions per false-negative category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseNegativeRates {
    pub phrasing: f64,
    pub incomplete: f64,
    pub unanswerable: f64,
}

impl From<&CategorySummary> for FalseNegativeRates {
    fn from(s: &CategorySummary) -> Self {
        FalseNegativeRates {
            phrasing: s.fraction(Category::PhrasingMismatch),
            incomplete: s.fraction(Category::IncompleteAnnotation),
            unanswerable: s.fraction(Category::Unanswerable),
        }
    }
}

/// Accuracy after crediting phrasing and incomplete-annotation false negatives
/// and removing unanswerable questions, extrapolating the sampled rates to all
/// `base_total - base_correct` incorrect predictions:
///
/// `100 * (c + I * (p_phr + p_inc)) / (total - I * p_unans)` with `I = total - c`.
pub fn adjusted_accuracy_with(
    base_correct: usize,
    base_total: usize,
    rates: FalseNegativeRates,
) -> Result<f64, AuditError> {
    if base_total == 0 || base_correct >= base_total {
        return Err(AuditError::InvalidBase {
            correct: base_correct,
            total: base_total,
        });
    }
    let incorrect = (base_total - base_correct) as f64;
    let denom = base_total as f64 - incorrect * rates.unanswerable;
    if denom.abs() < 1e-12 {
        return Err(AuditError::ZeroDenominator);
    }
    Ok(100.0 * (base_correct as f64 + incorrect * (rates.phrasing + rates.incomplete)) / denom)
}

pub fn adjusted_accuracy(base_correct: usize, base_total: usize, summary: &CategorySummary) -> Result<f64, AuditError> {
    adjusted_accuracy_with(base_correct, base_total, summary.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Create {
        base: BaseScore,
        records: Vec<AuditRecord>,
    },
    Label {
        example_id: String,
        label: Category,
        reference: Option<String>,
        labeled_at: u64,
        overwrite: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JournalLine {
    revision: u64,
    #[serde(flatten)]
    event: Event,
}

/// Labeled records in sample order plus the base score they refine.
#[derive(Debug)]
pub struct AuditStore {
    path: Option<PathBuf>,
    journal: Option<File>,
    revision: u64,
    base: BaseScore,
    records: Vec<AuditRecord>,
    index: HashMap<String, usize>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AuditError + '_ {
    move |source| AuditError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl AuditStore {
    fn build(base: BaseScore, records: Vec<AuditRecord>) -> Result<Self, AuditError> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.example_id.clone(), i).is_some() {
                return Err(AuditError::DuplicateId(r.example_id.clone()));
            }
        }
        Ok(AuditStore {
            path: None,
            journal: None,
            revision: 1,
            base,
            records,
            index,
        })
    }

    /// A store without a journal (nothing is persisted).
    pub fn in_memory(base: BaseScore, records: Vec<AuditRecord>) -> Result<Self, AuditError> {
        Self::build(base, records)
    }

    /// Start a new journal at `path`; fails if the file exists.
    pub fn create(path: &Path, base: BaseScore, records: Vec<AuditRecord>) -> Result<Self, AuditError> {
        let mut store = Self::build(base, records)?;
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => AuditError::Exists(path.display().to_string()),
                _ => io_err(path)(e),
            })?;
        let line = JournalLine {
            revision: 1,
            event: Event::Create {
                base,
                records: store.records.clone(),
            },
        };
        append(&mut file, &line).map_err(io_err(path))?;
        store.path = Some(path.to_path_buf());
        store.journal = Some(file);
        Ok(store)
    }

    /// Replay a journal. An unterminated final line (a write cut short) is
    /// discarded and truncated away.
    pub fn open(path: &Path) -> Result<Self, AuditError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let corrupt = |line: usize, message: String| AuditError::Corrupt {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut store: Option<AuditStore> = None;
        let mut good_len = 0u64;
        let mut buf = String::new();
        let mut lineno = 0;
        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(io_err(path))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            if !buf.ends_with('\n') {
                break;
            }
            let entry: JournalLine =
                serde_json::from_str(&buf[..buf.len() - 1]).map_err(|e| corrupt(lineno, e.to_string()))?;
            match (&mut store, entry.event) {
                (None, Event::Create { base, records }) => {
                    if entry.revision != 1 {
                        return Err(corrupt(lineno, "create event must be revision 1".into()));
                    }
                    store = Some(Self::build(base, records)?);
                }
                (None, _) => return Err(corrupt(lineno, "journal must start with a create event".into())),
                (Some(_), Event::Create { .. }) => return Err(corrupt(lineno, "second create event".into())),
                (Some(s), Event::Label { example_id, label, reference, labeled_at, overwrite }) => {
                    if entry.revision != s.revision + 1 {
                        return Err(corrupt(lineno, format!("revision {} after {}", entry.revision, s.revision)));
                    }
                    s.apply_label(&example_id, label, reference, labeled_at, overwrite)
                        .map_err(|e| corrupt(lineno, e.to_string()))?;
                }
            }
            good_len += n as u64;
        }
        let mut store = store.ok_or_else(|| corrupt(0, "empty journal".into()))?;
        let mut file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        if file.metadata().map_err(io_err(path))?.len() != good_len {
            file.set_len(good_len).map_err(io_err(path))?;
            file.seek(std::io::SeekFrom::End(0)).map_err(io_err(path))?;
        }
        store.path = Some(path.to_path_buf());
        store.journal = Some(file);
        Ok(store)
    }

    fn apply_label(
        &mut self,
        id: &str,
        label: Category,
        reference: Option<String>,
        labeled_at: u64,
        overwrite: bool,
    ) -> Result<(), AuditError> {
        let i = *self.index.get(id).ok_or_else(|| AuditError::UnknownId(id.to_string()))?;
        let rec = &mut self.records[i];
        if let (Some(existing), false) = (rec.label, overwrite) {
            return Err(AuditError::AlreadyLabeled {
                id: id.to_string(),
                label: existing,
            });
        }
        rec.label = Some(label);
        rec.reference = reference;
        rec.labeled_at = Some(labeled_at);
        self.revision += 1;
        Ok(())
    }

    /// Persist a label and return the new revision.
    ///
    /// Relabeling requires `overwrite`. The journal line is synced before the
    /// in-memory record changes.
    pub fn record_label(
        &mut self,
        example_id: &str,
        label: Category,
        reference: Option<String>,
        overwrite: bool,
    ) -> Result<u64, AuditError> {
        self.record_label_at(example_id, label, reference, overwrite, now_unix())
    }

    pub fn record_label_at(
        &mut self,
        example_id: &str,
        label: Category,
        reference: Option<String>,
        overwrite: bool,
        labeled_at: u64,
    ) -> Result<u64, AuditError> {
        let reference = reference.filter(|r| !r.is_empty());
        let rec = self
            .get(example_id)
            .ok_or_else(|| AuditError::UnknownId(example_id.to_string()))?;
        if let (Some(existing), false) = (rec.label, overwrite) {
            return Err(AuditError::AlreadyLabeled {
                id: example_id.to_string(),
                label: existing,
            });
        }
        if let (Some(file), Some(path)) = (self.journal.as_mut(), self.path.as_ref()) {
            let line = JournalLine {
                revision: self.revision + 1,
                event: Event::Label {
                    example_id: example_id.to_string(),
                    label,
                    reference: reference.clone(),
                    labeled_at,
                    overwrite,
                },
            };
            append(file, &line).map_err(io_err(path))?;
        }
        self.apply_label(example_id, label, reference, labeled_at, overwrite)?;
        Ok(self.revision)
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn base(&self) -> BaseScore {
        self.base
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&AuditRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// Unlabeled records, oldest (earliest sampled) first.
    pub fn queue(&self) -> Vec<&AuditRecord> {
        self.records.iter().filter(|r| r.label.is_none()).collect()
    }

    pub fn summary(&self) -> Result<CategorySummary, AuditError> {
        let mut counts = BTreeMap::new();
        for label in self.records.iter().filter_map(|r| r.label) {
            *counts.entry(label).or_insert(0) += 1;
        }
        CategorySummary::from_counts(counts)
    }

    pub fn adjusted_accuracy(&self) -> Result<f64, AuditError> {
        adjusted_accuracy(self.base.correct, self.base.total, &self.summary()?)
    }
}

fn append(file: &mut File, line: &JournalLine) -> std::io::Result<()> {
    let mut bytes = serde_json::to_vec(line)?;
    bytes.push(b'\n');
    file.write_all(&bytes)?;
    file.sync_data()
}

const TSV_HEADER: [&str; 6] = ["example_id", "question", "targets", "prediction", "category", "reference"];

/// Write every record as TSV, sorted by example id.
///
/// `targets` holds the annotator answer lists as compact JSON; unlabeled
/// records have an empty category and a missing reference is an empty cell.
pub fn export_audit(store: &AuditStore, w: impl Write) -> Result<(), AuditError> {
    let tsv_err = |e: csv::Error| AuditError::Tsv { line: 0, message: e.to_string() };
    let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
    out.write_record(TSV_HEADER).map_err(tsv_err)?;
    let mut rows: Vec<&AuditRecord> = store.records().iter().collect();
    rows.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    for r in rows {
        let targets = serde_json::to_string(&r.gold_answers).expect("strings serialize");
        out.write_record([
            r.example_id.as_str(),
            r.question.as_str(),
            targets.as_str(),
            r.prediction.as_str(),
            r.label.map(Category::name).unwrap_or(""),
            r.reference.as_deref().unwrap_or(""),
        ])
        .map_err(tsv_err)?;
    }
    out.flush().map_err(|e| AuditError::Tsv { line: 0, message: e.to_string() })?;
    Ok(())
}

/// Parse an exported TSV back into records (flags are recomputed).
pub fn import_audit(r: impl std::io::Read) -> Result<Vec<AuditRecord>, AuditError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(r);
    let header = reader
        .headers()
        .map_err(|e| AuditError::Tsv { line: 1, message: e.to_string() })?;
    if header.iter().ne(TSV_HEADER) {
        return Err(AuditError::Tsv {
            line: 1,
            message: format!("expected header {}", TSV_HEADER.join("\\t")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let bad = |message: String| AuditError::Tsv { line, message };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let gold: Vec<Vec<String>> =
            serde_json::from_str(&row[2]).map_err(|e| bad(format!("targets: {e}")))?;
        let label = match &row[4] {
            "" => None,
            s => Some(s.parse::<Category>().map_err(bad)?),
        };
        let prediction = row[3].to_string();
        let flags = auto_flags(&prediction, gold.iter().flatten().map(String::as_str));
        out.push(AuditRecord {
            example_id: row[0].to_string(),
            question: row[1].to_string(),
            gold_answers: gold,
            prediction,
            auto_flags: flags,
            label,
            reference: Some(row[5].to_string()).filter(|s| !s.is_empty()),
            labeled_at: None,
        });
    }
    Ok(out)
}
