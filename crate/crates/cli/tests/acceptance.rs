#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! One line per acceptance criterion: `PASS|FAIL <name> (<seconds>s) <detail>`.
//! Exits nonzero if any criterion fails.

mod common;

use cbqa_core::audit::{adjusted_accuracy, Category, CategorySummary};
use cbqa_core::corpus::{load_corpus, make_holdout_split, multi_answer_target, Dataset, QaExample};
use cbqa_core::eval::{exact_match, split_answers};
use cbqa_core::model::{greedy_decode, loss, loss_and_grad, Batch, ModelConfig, Params, TensorSet};
use cbqa_core::optim::{AdafactorConfig, AdafactorState};
use cbqa_core::rng::stream_rng;
use cbqa_core::salient::{mask_salient, mine_sentences, MiningConfig, RuleTagger, SalientSpan, SpanKind, TaggedSentence};
use cbqa_core::span_corruption::{corrupt, decorrupt, drop_mask, CorruptionConfig};
use cbqa_core::tokenizer::EOS_ID;
use cbqa_core::trainer::{encode_pair, select_best_checkpoint, tokens_to_text, TokenPair, TrainState};
use cbqa_core::{SentenceRecord, Vocab};
use common::{differing, pipeline, read_json, try_ok, tree};
use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ex(id: &str, answers: &[&[&str]]) -> QaExample {
    QaExample {
        id: id.into(),
        question: "q".into(),
        annotator_answers: answers.iter().map(|a| a.iter().map(|s| s.to_string()).collect()).collect(),
        dataset: Dataset::Nq,
    }
}

fn metric_goldens() -> Check {
    let rows = [
        ("confetti", ex("ghost", &[&["little warmth", "warmth"]])),
        ("katherine kiernan maria mulgrew", ex("oitnb", &[&["kate mulgrew"]])),
        ("kennedy lc39b", ex("shuttle", &[&["florida"]])),
    ];
    for (pred, gold) in &rows {
        ensure!(!exact_match(pred, gold), "{pred:?} matched {:?}", gold.annotator_answers);
    }
    let beatles = ex(
        "beatles",
        &[
            &["John Lennon", "Ringo Starr", "George Harrison", "Paul McCartney"],
            &["Paul McCartney", "John Lennon"],
        ],
    );
    ensure!(exact_match("Ringo Starr", &beatles), "Ringo Starr did not match");
    let target = multi_answer_target(&beatles, 0).map_err(|e| e.to_string())?;
    let answers = split_answers(&target);
    ensure!(answers.len() == 4, "target {target:?} split into {answers:?}");
    Ok("3 table rows unmatched, Ringo Starr matched, 4 answers".into())
}

fn category_arithmetic() -> Check {
    let counts: BTreeMap<Category, usize> = Category::ALL.into_iter().zip([93, 20, 20, 17]).collect();
    let s = CategorySummary::from_counts(counts).map_err(|e| e.to_string())?;
    let got: Vec<f64> = Category::ALL.iter().map(|c| s.percentages[c]).collect();
    ensure!(got == [62.0, 13.3, 13.3, 11.3], "percentages {got:?}");
    let all_tn: BTreeMap<Category, usize> = Category::ALL.into_iter().zip([150, 0, 0, 0]).collect();
    let all_tn = CategorySummary::from_counts(all_tn).map_err(|e| e.to_string())?;
    for (correct, total) in [(350, 1000), (0, 10), (6, 7), (1, 3)] {
        let a = adjusted_accuracy(correct, total, &all_tn).map_err(|e| e.to_string())?;
        let base = 100.0 * correct as f64 / total as f64;
        ensure!(a == base, "all-TrueNegative {correct}/{total}: {a} != {base}");
    }
    Ok(format!("{got:?}; all-TrueNegative is the identity"))
}

fn span_corruption() -> Check {
    let cfg = CorruptionConfig { mask_rate: 0.15, seed: 2024 };
    let (mut dropped, mut total) = (0usize, 0usize);
    let mut stream = 0;
    while total < 1_000_000 {
        let mask = drop_mask(1000, &cfg, stream);
        dropped += mask.iter().filter(|&&d| d).count();
        total += mask.len();
        stream += 1;
    }
    let rate = dropped as f64 / total as f64;
    ensure!((0.145..=0.155).contains(&rate), "drop rate {rate}");

    let vocab = Vocab::bytes_only(100);
    let mut rng = stream_rng(9, 0);
    for i in 0..1000u64 {
        let len = rng.random_range(1..200);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(2..258)).collect();
        let pair = corrupt(&vocab, &tokens, &cfg, i).map_err(|e| format!("sequence {i}: {e}"))?;
        let back = decorrupt(&vocab, &pair).map_err(|e| format!("sequence {i}: {e}"))?;
        ensure!(back == tokens, "sequence {i} did not round-trip");
    }
    Ok(format!("drop rate {rate:.5} over {total} draws; 1000/1000 round trips"))
}

fn ssm() -> Check {
    let corpus = common::fixtures().join("corpus.jsonl");
    let docs = load_corpus(&corpus).map_err(|e| e.to_string())?;
    let vocab = Vocab::bytes_only(100);
    let (sentences, stats) = mine_sentences(docs, &RuleTagger, MiningConfig::default()).map_err(|e| e.to_string())?;
    ensure!(!sentences.is_empty(), "no sentences mined");
    for (i, s) in sentences.iter().enumerate() {
        let pair = mask_salient(s, &vocab, i as u64).map_err(|e| e.to_string())?;
        let n = pair.sentinel_count_in_inputs(&vocab);
        ensure!(n == 1, "sentence {:?} has {n} sentinels", s.sentence.text);
    }

    let text = "Claude Shannon met Alan Turing in London in 1943.";
    let span = |a: &str, kind| {
        let start = text.find(a).unwrap();
        SalientSpan { start, end: start + a.len(), kind }
    };
    let tagged = TaggedSentence {
        sentence: SentenceRecord { doc_id: "d".into(), index: 0, text: text.into() },
        spans: vec![
            span("Claude Shannon", SpanKind::Entity),
            span("Alan Turing", SpanKind::Entity),
            span("London", SpanKind::Entity),
            span("1943", SpanKind::Date),
        ],
    };
    let n = 10_000;
    let mut counts = [0usize; 4];
    for i in 0..n {
        let pair = mask_salient(&tagged, &vocab, i).map_err(|e| e.to_string())?;
        let masked = vocab.decode(&pair.targets[1..pair.targets.len() - 2]).map_err(|e| e.to_string())?;
        let k = tagged.spans.iter().position(|s| s.text(text) == masked).ok_or("unknown masked span")?;
        counts[k] += 1;
    }
    let expected = n as f64 / 4.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).map_err(|e| e.to_string())?.cdf(stat);
    ensure!(p > 0.001, "chi-square {stat:.3}, p = {p:e}, counts {counts:?}");
    Ok(format!(
        "{} pairs from {} sentences, one sentinel each; counts {counts:?}, p = {p:.3}",
        sentences.len(),
        stats.scanned
    ))
}

fn gradient_check() -> Check {
    let mut cfg = ModelConfig::desk(300);
    cfg.dropout_rate = 0.0;
    ensure!(cfg.n_enc_layers == 2 && cfg.n_dec_layers == 2, "desk config is not 2-layer");
    let p = Params::<f64>::init(&cfg, 11).map_err(|e| e.to_string())?;
    let mut rng = stream_rng(4, 0);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..2)
        .map(|_| {
            let a = (0..rng.random_range(1..12)).map(|_| rng.random_range(2..300)).collect();
            let mut b: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(2..300)).collect();
            b.push(EOS_ID);
            (a, b)
        })
        .collect();
    let batch = Batch::from_pairs(pairs.iter().map(|(a, b)| (&a[..], &b[..])));
    let (_, grad) = loss_and_grad(&p, &batch, None).map_err(|e| e.to_string())?;
    let analytic: Vec<(String, Vec<f64>)> =
        grad.tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect();
    let h = 1e-4;
    let per_tensor = 256;
    let mut q = p.clone();
    let (mut worst, mut worst_name, mut checked) = (0.0f64, String::new(), 0usize);
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let stride = (g.len() / per_tensor).max(1);
        for idx in (0..g.len()).step_by(stride) {
            let set = |q: &mut Params<f64>, v: f64| {
                let mut ts = q.tensors_mut();
                let slot = ts[ti].1.iter_mut().nth(idx).expect("index in range");
                std::mem::replace(slot, v)
            };
            let orig = set(&mut q, 0.0);
            set(&mut q, orig + h);
            let lp = loss(&q, &batch).map_err(|e| e.to_string())?;
            set(&mut q, orig - h);
            let lm = loss(&q, &batch).map_err(|e| e.to_string())?;
            set(&mut q, orig);
            let numeric = (lp - lm) / (2.0 * h);
            let err = (g[idx] - numeric).abs() / g[idx].abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                worst = err;
                worst_name = name.clone();
            }
            checked += 1;
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:e} in {worst_name}");
    Ok(format!(
        "{} tensors, {checked} coordinates, max relative error {worst:.2e}",
        analytic.len()
    ))
}

fn adafactor() -> Check {
    type Set = Vec<(String, ArrayD<f64>)>;
    let one = |t: ArrayD<f64>| -> Set { vec![("w".to_string(), t)] };
    let cfg = AdafactorConfig::default();
    let r = Array1::from(vec![0.5, -1.5, 2.0, 0.25]);
    let c = Array1::from(vec![1.0, -0.3, 0.7]);
    let g = Array2::from_shape_fn((4, 3), |(i, j)| r[i] * c[j]).into_dyn();
    let mut p = one(ArrayD::zeros(vec![4, 3]));
    let mut state = AdafactorState::init(&p).map_err(|e| e.to_string())?;
    let mut v = ArrayD::<f64>::zeros(vec![4, 3]);
    let mut worst = 0.0f64;
    for step in 1..=50u64 {
        let scaled = &g * (1.0 + 0.1 * step as f64);
        state.step(&mut p, &one(scaled.clone()), &cfg).map_err(|e| e.to_string())?;
        let beta2 = 1.0 - (step as f64).powf(-cfg.decay_exponent);
        v = &v * beta2 + &scaled.mapv(|x| x * x + cfg.eps1) * (1.0 - beta2);
        for (a, b) in state.second_moment(0).iter().zip(v.iter()) {
            worst = worst.max((a - b).abs() / b.abs());
        }
    }
    ensure!(worst <= 1e-12, "factored vs unfactored relative error {worst:e}");

    let mut p = one(Array1::from(vec![1.0]).into_dyn());
    let mut state = AdafactorState::init(&p).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    for _ in 0..102 {
        let x = p[0].1[[0]];
        losses.push(x * x);
        state
            .step(&mut p, &one(Array1::from(vec![2.0 * x]).into_dyn()), &cfg)
            .map_err(|e| e.to_string())?;
    }
    for (i, w) in losses[1..].windows(2).enumerate() {
        ensure!(w[1] < w[0], "bowl loss rose at step {}: {} -> {}", i + 2, w[0], w[1]);
    }
    Ok(format!("rank-1 error {worst:.1e}; bowl {:.3e} -> {:.3e}", losses[1], losses[101]))
}

fn overfit() -> Check {
    const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "amber", "violet", "silver"];
    const ANIMALS: [&str; 4] = ["fox", "owl", "cat", "elk"];
    let examples: Vec<QaExample> = (0..32)
        .map(|i| QaExample {
            id: format!("q{i:02}"),
            question: format!("which animal guards gate {i}"),
            annotator_answers: vec![vec![format!("{} {}", COLORS[i % 8], ANIMALS[i / 8])]],
            dataset: Dataset::Nq,
        })
        .collect();
    let texts: Vec<String> = examples
        .iter()
        .flat_map(|e| [format!("nq question: {}", e.question), e.annotator_answers[0][0].clone()])
        .collect();
    let vocab = Vocab::build(&texts, 420, 100).map_err(|e| e.to_string())?;
    let pairs: Vec<TokenPair> = examples
        .iter()
        .map(|e| encode_pair(&vocab, &format!("nq question: {}", e.question), &e.annotator_answers[0][0], 64))
        .collect::<Option<_>>()
        .ok_or("pair too long")?;
    let model = ModelConfig::desk(vocab.len());
    let opt = AdafactorConfig { learning_rate: 1e-3, ..AdafactorConfig::default() };
    let mut state = TrainState::new(Params::init(&model, 3).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let em = |params: &Params<f32>| -> Result<usize, String> {
        let mut hits = 0;
        for (e, p) in examples.iter().zip(&pairs) {
            let out = greedy_decode(params, &p.inputs, 16).map_err(|e| e.to_string())?;
            hits += usize::from(exact_match(&tokens_to_text(&vocab, &out), e));
        }
        Ok(hits)
    };
    let mut last = (0, 0);
    for step in 1..=2000u64 {
        state.train_step(&pairs, 0.0, 0, &opt).map_err(|e| e.to_string())?;
        if step % 50 == 0 {
            let hits = em(&state.params)?;
            last = (step, hits);
            if hits == examples.len() {
                return Ok(format!("100% EM on 32 pairs after {step} steps"));
            }
        }
    }
    Err(format!("{}/32 exact after {} steps", last.1, last.0))
}

fn protocol_fidelity() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    try_ok(p, &["build-vocab", "--corpus", "corpus.jsonl", "--qa", "nq=nq.jsonl", "--qa", "wq=wq.jsonl", "--size", "400", "--out", "v.txt"])?;
    try_ok(
        p,
        &[
            "finetune", "--task", "nq=nq.jsonl", "--task", "wq=wq.jsonl", "--vocab", "v.txt", "--steps", "6",
            "--checkpoint-every", "2", "--batch-tokens", "800", "--dropout", "0.1", "--decode-max-len", "4",
            "--out-dir", "ft",
        ],
    )?;
    let m = read_json(&p.join("ft/manifest.json"));
    let tasks = m["config"]["tasks"].as_array().ok_or("manifest lacks tasks")?;
    let get = |name: &str| tasks.iter().find(|t| t["task"] == name).cloned().ok_or(format!("no {name} in manifest"));
    let (nq, wq) = (get("nq")?, get("wq")?);
    ensure!(nq["batch_tokens"] == 800 && wq["batch_tokens"] == 400, "batch tokens nq {} wq {}", nq["batch_tokens"], wq["batch_tokens"]);
    ensure!(nq["dropout_rate"] == 0.1 && wq["dropout_rate"] == 0.2, "dropout nq {} wq {}", nq["dropout_rate"], wq["dropout_rate"]);

    let summary = read_json(&p.join("ft/summary.json"));
    for (t, n) in summary["tasks"].as_array().ok_or("summary lacks tasks")?.iter().zip([40, 20]) {
        let val = t["validation_examples"].as_u64().unwrap_or(0);
        let total = val + t["train_examples"].as_u64().unwrap_or(0) + t["dropped_examples"].as_u64().unwrap_or(0);
        ensure!(total == n && val * 10 == n, "{}: {val} held out of {total}", t["task"]);
    }
    for n in [10usize, 37, 40, 100, 1234] {
        let all: Vec<QaExample> = (0..n).map(|i| ex(&format!("e{i}"), &[&["a"]])).collect();
        let (train, val) = make_holdout_split(&all, 0.1, 5).map_err(|e| e.to_string())?;
        let want = (n as f64 * 0.1).round() as usize;
        ensure!(val.len() == want && train.len() + val.len() == n, "n={n}: {} held out", val.len());
    }

    let cases: [(&[(u64, f64)], usize); 4] = [
        (&[(100, 10.0), (200, 30.0), (300, 30.0), (400, 20.0)], 1),
        (&[(100, 5.0), (200, 5.0)], 0),
        (&[(100, 1.0), (200, 2.0), (300, 3.0)], 2),
        (&[(100, 0.0)], 0),
    ];
    for (scores, want) in cases {
        ensure!(select_best_checkpoint(scores) == Some(want), "selection on {scores:?}");
    }
    let checkpoints = std::fs::read_to_string(p.join("ft/validation.jsonl")).map_err(|e| e.to_string())?;
    let scores: Vec<(u64, f64)> = checkpoints
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("validation line");
            (v["step"].as_u64().unwrap(), v["score"].as_f64().unwrap())
        })
        .collect();
    let best = select_best_checkpoint(&scores).ok_or("no checkpoints")?;
    ensure!(summary["best_step"] == scores[best].0, "summary best {} vs {:?}", summary["best_step"], scores);
    Ok(format!("wq batch 400 / dropout 0.2 vs nq 800 / 0.1; holdout 4/40 and 2/20; best step {}", scores[best].0))
}

fn compare_smoke() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = dir.path();
    try_ok(p, &["build-vocab", "--corpus", "corpus.jsonl", "--qa", "nq=nq.jsonl", "--size", "400", "--out", "v.txt"])?;
    try_ok(
        p,
        &[
            "compare-objectives", "--corpus", "corpus.jsonl", "--vocab", "v.txt", "--task", "nq=nq.jsonl",
            "--blocks", "3", "--pretrain-block", "4", "--finetune-steps", "4", "--probe-checkpoint-every", "2",
            "--batch-tokens", "512", "--probe-batch-tokens", "512", "--out", "curve.csv",
        ],
    )?;
    let csv = std::fs::read_to_string(p.join("curve.csv")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = csv.lines().collect();
    ensure!(lines.first() == Some(&"objective,pretrain_step,max_val_em"), "header {:?}", lines.first());
    ensure!(lines.len() == 7, "{} data rows", lines.len() - 1);
    let mut keys = Vec::new();
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 3, "row {line:?}");
        let em: f64 = f[2].parse().map_err(|_| format!("row {line:?}"))?;
        ensure!((0.0..=100.0).contains(&em), "row {line:?}");
        keys.push(format!("{}@{}", f[0], f[1]));
    }
    ensure!(keys == ["sc@4", "sc@8", "sc@12", "ssm@4", "ssm@8", "ssm@12"], "rows {keys:?}");

    let rows = read_json(&p.join("curve.csv.rows.json"));
    ensure!(rows["probes_isolated"] == true, "probe isolation flag is false");
    for r in rows["rows"].as_array().ok_or("no rows")? {
        ensure!(r["probe_start_hash"] == r["block_hash"], "probe did not start from its block");
        ensure!(r["probe_end_hash"] != r["block_hash"], "probe did not move");
        ensure!(r["next_block_start_hash"].is_null() || r["next_block_start_hash"] == r["block_hash"], "probe leaked into pre-training");
    }
    Ok("6 rows, probes forked and discarded".into())
}

fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    pipeline(a.path(), 1)?;
    pipeline(b.path(), 4)?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let diff = differing(&ta, &tb);
    ensure!(diff.is_empty(), "differing artifacts: {diff:?}");
    Ok(format!("{} artifacts byte-identical across two runs", ta.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("metric-goldens", metric_goldens),
        ("category-arithmetic", category_arithmetic),
        ("span-corruption", span_corruption),
        ("salient-span-masking", ssm),
        ("gradient-check", gradient_check),
        ("adafactor", adafactor),
        ("end-to-end-overfit", overfit),
        ("protocol-fidelity", protocol_fidelity),
        ("compare-objectives-smoke", compare_smoke),
        ("cli-determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s) {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}
