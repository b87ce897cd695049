use cbqa_core::audit::*;
use cbqa_core::corpus::{Dataset, QaExample};
use cbqa_core::eval::{evaluate, EvalMode};
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::io::Write;

fn ex(id: &str, question: &str, answers: &[&str]) -> QaExample {
    QaExample {
        id: id.into(),
        question: question.into(),
        annotator_answers: vec![answers.iter().map(|s| s.to_string()).collect()],
        dataset: Dataset::Nq,
    }
}

fn table_rows() -> Vec<AuditRecord> {
    vec![
        AuditRecord::new(&ex("ghost", "who is the ghost of christmas present", &["little warmth", "warmth"]), "confetti"),
        AuditRecord::new(&ex("oitnb", "who plays red on orange is the new black", &["kate mulgrew"]), "katherine kiernan maria mulgrew"),
        AuditRecord::new(&ex("shuttle", "where does the us launch space shuttles from", &["florida"]), "kennedy lc39b"),
    ]
}

fn counts(tn: usize, ph: usize, inc: usize, un: usize) -> BTreeMap<Category, usize> {
    [
        (Category::TrueNegative, tn),
        (Category::PhrasingMismatch, ph),
        (Category::IncompleteAnnotation, inc),
        (Category::Unanswerable, un),
    ]
    .into_iter()
    .collect()
}

#[test]
fn hand_evaluation_percentages() {
    let s = CategorySummary::from_counts(counts(93, 20, 20, 17)).unwrap();
    assert_eq!(s.labeled, 150);
    assert_eq!(s.percentages[&Category::TrueNegative], 62.0);
    assert_eq!(s.percentages[&Category::PhrasingMismatch], 13.3);
    assert_eq!(s.percentages[&Category::IncompleteAnnotation], 13.3);
    assert_eq!(s.percentages[&Category::Unanswerable], 11.3);
    let all_tn = CategorySummary::from_counts(counts(150, 0, 0, 0)).unwrap();
    assert_eq!(all_tn.percentages.values().copied().collect::<Vec<_>>(), vec![100.0, 0.0, 0.0, 0.0]);
    assert!(matches!(CategorySummary::from_counts(BTreeMap::new()), Err(AuditError::NoLabels)));
}

#[test]
fn adjusted_accuracy_cases() {
    let all_tn = CategorySummary::from_counts(counts(150, 0, 0, 0)).unwrap();
    assert_eq!(adjusted_accuracy(350, 1000, &all_tn).unwrap(), 35.0);
    let only_unans = FalseNegativeRates { phrasing: 0.0, incomplete: 0.0, unanswerable: 1.0 };
    assert_eq!(adjusted_accuracy_with(350, 1000, only_unans).unwrap(), 100.0 * 350.0 / (1000.0 - 650.0));
    // Sampled rates 0.620 / 0.133 / 0.133 / 0.113 extrapolated to 650 incorrect of 1000.
    let rates = FalseNegativeRates { phrasing: 0.133, incomplete: 0.133, unanswerable: 0.113 };
    let expected = 100.0 * (350.0 + 650.0 * 0.266) / (1000.0 - 650.0 * 0.113);
    let got = adjusted_accuracy_with(350, 1000, rates).unwrap();
    assert!((got - expected).abs() < 1e-9);
    assert!((got - 56.435).abs() < 1e-3);
    assert!(matches!(adjusted_accuracy_with(0, 10, only_unans), Err(AuditError::ZeroDenominator)));
    assert!(matches!(adjusted_accuracy_with(10, 10, only_unans), Err(AuditError::InvalidBase { .. })));
}

#[test]
fn table_rows_carry_no_flags() {
    for r in table_rows() {
        assert!(r.auto_flags.is_empty(), "{}", r.example_id);
    }
}

#[test]
fn sample_of_unmatched() {
    let data: Vec<QaExample> = (0..800).map(|i| ex(&format!("q{i:03}"), "q", &["gold"])).collect();
    let preds: Vec<(String, String)> = data
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id.clone(), if i % 4 == 0 { "gold".into() } else { format!("wrong {i}") }))
        .collect();
    let report = evaluate(&preds, &data, EvalMode::OpenDomainEm).unwrap();
    assert_eq!(report.unmatched().count(), 600);
    let a = surface_candidates(&report, &data, 150, 7).unwrap();
    assert_eq!(a.len(), 150);
    assert!(a.iter().all(|r| r.prediction.starts_with("wrong")));
    assert!(a.windows(2).all(|w| w[0].example_id < w[1].example_id));
    assert_eq!(a, surface_candidates(&report, &data, 150, 7).unwrap());
    assert_ne!(a, surface_candidates(&report, &data, 150, 8).unwrap());
    assert!(matches!(
        surface_candidates(&report, &data, 601, 7),
        Err(AuditError::TooFewUnmatched { available: 600, requested: 601 })
    ));
}

#[test]
fn labels_persist_and_are_write_once() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    let base = BaseScore { correct: 350, total: 1000 };
    let mut store = AuditStore::create(&path, base, table_rows()).unwrap();
    assert!(matches!(AuditStore::create(&path, base, table_rows()), Err(AuditError::Exists(_))));
    assert_eq!(store.revision(), 1);
    let url = "https://en.wikipedia.org/wiki/Kennedy_Space_Center_Launch_Complex_39";
    let rev = store
        .record_label_at("shuttle", Category::IncompleteAnnotation, Some(url.into()), false, 1_600_000_000)
        .unwrap();
    assert_eq!(rev, 2);
    assert!(matches!(
        store.record_label("shuttle", Category::TrueNegative, None, false),
        Err(AuditError::AlreadyLabeled { .. })
    ));
    assert!(matches!(store.record_label("nope", Category::TrueNegative, None, false), Err(AuditError::UnknownId(_))));
    assert_eq!(store.revision(), 2);
    let labeled = store.get("shuttle").unwrap().clone();
    assert_eq!(labeled.reference.as_deref(), Some(url));
    assert_eq!(store.queue().len(), 2);
    assert_eq!(store.queue()[0].example_id, "ghost");
    drop(store);

    let reopened = AuditStore::open(&path).unwrap();
    assert_eq!(reopened.get("shuttle").unwrap(), &labeled);
    assert_eq!(reopened.revision(), 2);
}

#[test]
fn overwrite_and_torn_tail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    let mut store = AuditStore::create(&path, BaseScore { correct: 1, total: 4 }, table_rows()).unwrap();
    store.record_label("ghost", Category::TrueNegative, None, false).unwrap();
    store.record_label("ghost", Category::PhrasingMismatch, Some(String::new()), true).unwrap();
    drop(store);
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"revision\":4,\"event\":\"lab").unwrap();
    drop(f);
    let mut store = AuditStore::open(&path).unwrap();
    assert_eq!(store.revision(), 3);
    let ghost = store.get("ghost").unwrap();
    assert_eq!((ghost.label, ghost.reference.clone()), (Some(Category::PhrasingMismatch), None));
    store.record_label("oitnb", Category::Unanswerable, None, false).unwrap();
    drop(store);
    let store = AuditStore::open(&path).unwrap();
    assert_eq!(store.revision(), 4);
    assert_eq!(store.summary().unwrap().counts[&Category::Unanswerable], 1);
}

#[test]
fn export_format_and_round_trip() {
    let mut store = AuditStore::in_memory(BaseScore { correct: 1, total: 4 }, table_rows()).unwrap();
    store.record_label("shuttle", Category::IncompleteAnnotation, Some("https://example.org/lc39".into()), false).unwrap();
    store.record_label("oitnb", Category::PhrasingMismatch, None, false).unwrap();
    store.record_label("ghost", Category::TrueNegative, None, false).unwrap();
    let mut buf = Vec::new();
    export_audit(&store, &mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], "example_id\tquestion\ttargets\tprediction\tcategory\treference");
    assert!(lines[1].starts_with("ghost\t"));
    assert!(lines[1].ends_with("\tTrueNegative\t"));
    assert!(!text.contains("null"));
    let back = import_audit(&buf[..]).unwrap();
    let mut expected: Vec<AuditRecord> = store.records().iter().map(AuditRecord::without_timestamp).collect();
    expected.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    assert_eq!(back, expected);
}

#[test]
fn import_rejects_bad_rows() {
    let bad_header = "id\tquestion\n";
    assert!(matches!(import_audit(bad_header.as_bytes()), Err(AuditError::Tsv { line: 1, .. })));
    let bad_cat = "example_id\tquestion\ttargets\tprediction\tcategory\treference\nx\tq\t[[\"a\"]]\tp\tMaybe\t\n";
    assert!(matches!(import_audit(bad_cat.as_bytes()), Err(AuditError::Tsv { line: 2, .. })));
}

proptest! {
    #[test]
    fn adjusted_is_monotone_and_bounded(
        correct in 0usize..500,
        extra in 1usize..500,
        a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0,
        bump in 0.0f64..0.2,
    ) {
        let total = correct + extra;
        let s = a + b + c;
        let (ph, inc, un) = if s > 1.0 { (a / s * 0.99, b / s * 0.99, c / s * 0.99) } else { (a, b, c) };
        prop_assume!(correct > 0 || un < 0.99);
        let at = |ph: f64, inc: f64, un: f64| {
            adjusted_accuracy_with(correct, total, FalseNegativeRates { phrasing: ph, incomplete: inc, unanswerable: un }).unwrap()
        };
        let base = 100.0 * correct as f64 / total as f64;
        let v = at(ph, inc, un);
        prop_assert!(v >= base - 1e-9 && v <= 100.0 + 1e-9);
        prop_assert!(at(ph + bump, inc, un) >= v - 1e-9);
        prop_assert!(at(ph, inc + bump, un) >= v - 1e-9);
        if un + bump < 0.99 || correct > 0 {
            prop_assert!(at(ph, inc, (un + bump).min(1.0)) >= v - 1e-9);
        }
    }

    #[test]
    fn summary_counts_track_labels(ops in prop::collection::vec((0usize..3, 0usize..4, any::<bool>()), 1..30)) {
        let mut store = AuditStore::in_memory(BaseScore { correct: 1, total: 4 }, table_rows()).unwrap();
        for (rec, cat, overwrite) in ops {
            let id = store.records()[rec].example_id.clone();
            let _ = store.record_label(&id, Category::ALL[cat], None, overwrite);
        }
        let labeled: Vec<Category> = store.records().iter().filter_map(|r| r.label).collect();
        match store.summary() {
            Ok(s) => {
                for c in Category::ALL {
                    prop_assert_eq!(s.counts[&c], labeled.iter().filter(|&&l| l == c).count());
                }
                let total: f64 = s.percentages.values().sum();
                prop_assert!((total - 100.0).abs() <= 0.2);
            }
            Err(_) => prop_assert!(labeled.is_empty()),
        }
    }
}
