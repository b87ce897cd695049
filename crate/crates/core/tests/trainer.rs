use cbqa_core::corpus::{load_corpus, Dataset, QaExample};
use cbqa_core::model::{Checkpoint, ModelConfig, Params};
use cbqa_core::optim::AdafactorConfig;
use cbqa_core::salient::RuleTagger;
use cbqa_core::tokenizer::Vocab;
use cbqa_core::trainer::*;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::PathBuf;

fn tiny_model(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab.len(),
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        n_enc_layers: 1,
        n_dec_layers: 1,
        max_len: 96,
        dropout_rate: 0.1,
        rel_pos_buckets: 16,
    }
}

fn qa(dataset: Dataset, n: usize) -> Vec<QaExample> {
    let words = ["red", "blue", "green", "gold", "grey"];
    (0..n)
        .map(|i| QaExample {
            id: format!("{}-{i}", dataset.name()),
            question: format!("what colour is box {i}"),
            annotator_answers: vec![vec![words[i % words.len()].to_string()]],
            dataset,
        })
        .collect()
}

fn fixture_docs() -> Vec<cbqa_core::CorpusDocument> {
    load_corpus(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ssm_corpus.jsonl")).unwrap()
}

fn small_config(steps: u64, every: u64) -> TrainConfig {
    TrainConfig {
        batch_tokens: 400,
        total_steps: steps,
        dropout_rate: 0.1,
        checkpoint_every: every,
        seed: 11,
        decode_max_len: 8,
    }
}

fn pair(n_in: usize, n_out: usize) -> TokenPair {
    TokenPair {
        inputs: vec![5; n_in],
        targets: vec![6; n_out],
    }
}

#[test]
fn greedy_packing() {
    let sizes: Vec<usize> = pack_batches(vec![pair(2, 2), pair(3, 1), pair(1, 3)], 10)
        .map(|b| b.unwrap().len())
        .collect();
    assert_eq!(sizes, [2, 1]);
    let mut it = pack_batches(vec![pair(5, 6)], 10);
    assert!(matches!(it.next(), Some(Err(TrainError::Oversized { tokens: 11, budget: 10 }))));
    assert!(it.next().is_none());
    assert_eq!(pack_batches(Vec::<TokenPair>::new(), 10).count(), 0);
}

proptest! {
    #[test]
    fn packed_batches_respect_budget(sizes in proptest::collection::vec(1usize..20, 0..60), budget in 20usize..80) {
        let pairs: Vec<TokenPair> = sizes.iter().map(|&s| pair(s, 1)).collect();
        let batches: Vec<Vec<TokenPair>> = pack_batches(pairs.clone(), budget).map(Result::unwrap).collect();
        for (i, b) in batches.iter().enumerate() {
            let used: usize = b.iter().map(TokenPair::tokens).sum();
            prop_assert!(used <= budget);
            if let Some(next) = batches.get(i + 1) {
                prop_assert!(used + next[0].tokens() > budget);
            }
        }
        let flat: Vec<TokenPair> = batches.into_iter().flatten().collect();
        prop_assert_eq!(flat, pairs);
    }
}

#[test]
fn beatles_multi_answer_target() {
    let ex = QaExample {
        id: "b".into(),
        question: "who were the members of the beatles".into(),
        annotator_answers: vec![vec![
            "John Lennon".into(),
            "Ringo Starr".into(),
            "George Harrison".into(),
            "Paul McCartney".into(),
        ]],
        dataset: Dataset::Nq,
    };
    let task = TaskSpec::new(Dataset::Nq, TargetMode::AllAnswers);
    let (input, target) = format_example(&task, &ex, 0).unwrap();
    assert_eq!(input, "nq question: who were the members of the beatles");
    assert_eq!(
        target,
        "answer: John Lennon answer: Ringo Starr answer: George Harrison answer: Paul McCartney"
    );
}

#[test]
fn webquestions_batch_and_dropout_overrides() {
    let cfg = TrainConfig::desk();
    let o = TaskOverrides::default();
    assert_eq!(effective_settings(&cfg, &o, Dataset::Wq).unwrap(), (2048, 0.2));
    assert_eq!(effective_settings(&cfg, &o, Dataset::Nq).unwrap(), (4096, 0.1));
    assert_eq!(effective_settings(&cfg, &TaskOverrides::none(), Dataset::Wq).unwrap(), (4096, 0.1));
    let paper = TrainConfig::paper();
    assert_eq!(effective_settings(&paper, &o, Dataset::Wq).unwrap(), (98_304, 0.2));
}

#[test]
fn mixture_sampler_tracks_dataset_sizes() {
    let sizes = [600.0, 300.0, 100.0];
    let sampler = MixtureSampler::new(&sizes, 3).unwrap();
    let n = 100_000u64;
    let mut counts = [0u64; 3];
    for step in 1..=n {
        counts[sampler.sample(step)] += 1;
    }
    let mut chi2 = 0.0;
    for (c, s) in counts.iter().zip(sizes) {
        let p = s / 1000.0;
        let freq = *c as f64 / n as f64;
        assert!((freq - p).abs() < 0.02 * p, "freq {freq} vs {p}");
        chi2 += (*c as f64 - p * n as f64).powi(2) / (p * n as f64);
    }
    let pval = 1.0 - ChiSquared::new(2.0).unwrap().cdf(chi2);
    assert!(pval > 0.001, "chi2 {chi2}");
    assert!(MixtureSampler::new(&[1.0, 0.0], 0).is_err());
    assert_eq!(MixtureSampler::new(&[2.0], 0).unwrap().sample(9), 0);
}

#[test]
fn mixture_validation() {
    let nq = TaskSpec::new(Dataset::Nq, TargetMode::FirstAnswer);
    let wq = TaskSpec::new(Dataset::Wq, TargetMode::FirstAnswer);
    let explicit = |w: Vec<f64>| MixtureSpec {
        tasks: vec![nq.clone(), wq.clone()],
        weights: MixtureWeights::Explicit(w),
    };
    assert!(explicit(vec![1.0, 2.0]).validate().is_ok());
    assert!(explicit(vec![1.0]).validate().is_err());
    assert!(explicit(vec![1.0, -1.0]).validate().is_err());
    let dup = MixtureSpec {
        tasks: vec![nq.clone(), nq],
        weights: MixtureWeights::Proportional,
    };
    assert!(dup.validate().is_err());
}

fn run_finetune(
    mixture: &MixtureSpec,
    data: &[Vec<QaExample>],
    cfg: &TrainConfig,
    vocab: &Vocab,
) -> Result<(FinetuneRun, TrainState), TrainError> {
    let params = Params::<f32>::init(&tiny_model(vocab), 5).unwrap();
    let mut state = TrainState::new(params)?;
    let run = finetune(
        &mut state,
        mixture,
        data,
        vocab,
        cfg,
        &TaskOverrides::default(),
        &AdafactorConfig::default(),
        |_| {},
        |_, _| Ok(()),
    )?;
    Ok((run, state))
}

#[test]
fn finetune_reports_protocol_settings() {
    let vocab = Vocab::bytes_only(100);
    let mixture = MixtureSpec {
        tasks: vec![
            TaskSpec::new(Dataset::Nq, TargetMode::FirstAnswer),
            TaskSpec::new(Dataset::Wq, TargetMode::FirstAnswer),
        ],
        weights: MixtureWeights::Proportional,
    };
    let data = vec![qa(Dataset::Nq, 60), qa(Dataset::Wq, 30)];
    let (run, state) = run_finetune(&mixture, &data, &small_config(6, 3), &vocab).unwrap();
    assert_eq!(state.step, 6);
    let nq = &run.tasks[0];
    let wq = &run.tasks[1];
    assert_eq!((nq.batch_tokens, nq.dropout_rate), (400, 0.1));
    assert_eq!((wq.batch_tokens, wq.dropout_rate), (200, 0.2));
    assert_eq!((nq.train_examples, nq.validation_examples), (54, 6));
    assert_eq!((wq.train_examples, wq.validation_examples), (27, 3));
    assert!((nq.mixture_rate - 54.0 / 81.0).abs() < 1e-12);
    assert_eq!(run.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), [3, 6]);
    assert_eq!(run.log.len(), 6);
    assert!(run.log.iter().all(|l| l.task == "nq" || l.task == "wq"));
    let best = &run.checkpoints[run.best];
    assert!(run.checkpoints.iter().all(|c| c.score <= best.score));
    assert_eq!(run.best_params.hash_hex(), best.params_hash);
}

#[test]
fn single_task_mixture_matches_explicit_weight() {
    let vocab = Vocab::bytes_only(100);
    let task = TaskSpec::new(Dataset::Tqa, TargetMode::FirstAnswer);
    let data = vec![qa(Dataset::Tqa, 20)];
    let cfg = small_config(4, 4);
    let (_, a) = run_finetune(&MixtureSpec::single(task.clone()), &data, &cfg, &vocab).unwrap();
    let explicit = MixtureSpec {
        tasks: vec![task],
        weights: MixtureWeights::Explicit(vec![3.0]),
    };
    let (_, b) = run_finetune(&explicit, &data, &cfg, &vocab).unwrap();
    assert_eq!(a.params.hash_hex(), b.params.hash_hex());
}

#[test]
fn empty_task_after_filtering() {
    let vocab = Vocab::bytes_only(100);
    let mut data = qa(Dataset::Nq, 20);
    for ex in &mut data {
        ex.annotator_answers = vec![vec!["one two three four five six".into()]];
    }
    let err = run_finetune(
        &MixtureSpec::single(TaskSpec::new(Dataset::Nq, TargetMode::FirstAnswer)),
        &[data],
        &small_config(2, 2),
        &vocab,
    )
    .unwrap_err();
    assert!(matches!(err, TrainError::EmptyTask(ref t) if t == "nq"), "{err}");
}

#[test]
fn finetune_resume_is_bit_exact() {
    let vocab = Vocab::bytes_only(100);
    let mixture = MixtureSpec {
        tasks: vec![
            TaskSpec::new(Dataset::Nq, TargetMode::RandomAnswer),
            TaskSpec::new(Dataset::Wq, TargetMode::FirstAnswer),
        ],
        weights: MixtureWeights::Proportional,
    };
    let data = vec![qa(Dataset::Nq, 40), qa(Dataset::Wq, 20)];
    let opt = AdafactorConfig::default();
    let cfg = small_config(8, 4);
    let (_, full) = run_finetune(&mixture, &data, &cfg, &vocab).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ft.ckpt");
    let mut state = TrainState::new(Params::<f32>::init(&tiny_model(&vocab), 5).unwrap()).unwrap();
    let half = TrainConfig { total_steps: 4, ..cfg.clone() };
    finetune(&mut state, &mixture, &data, &vocab, &half, &TaskOverrides::default(), &opt, |_| {}, |s, _| {
        s.checkpoint(serde_json::Value::Null).save(&path)?;
        Ok(())
    })
    .unwrap();
    let mut resumed = TrainState::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 4);
    finetune(&mut resumed, &mixture, &data, &vocab, &cfg, &TaskOverrides::default(), &opt, |_| {}, |_, _| Ok(()))
        .unwrap();
    assert_eq!(resumed, full);
}

fn run_pretrain(data: &PretrainData, vocab: &Vocab, cfg: &TrainConfig, state: &mut TrainState) -> PretrainRun {
    pretrain(state, data, vocab, cfg, &AdafactorConfig::default(), |_| {}, |_| Ok(())).unwrap()
}

#[test]
fn pretrain_resume_is_bit_exact() {
    let vocab = Vocab::bytes_only(100);
    let docs = fixture_docs();
    for objective in [Objective::Sc, Objective::Ssm] {
        let data = prepare_pretraining(&docs, &vocab, objective, &RuleTagger, 64, 0.15).unwrap();
        let init = Params::<f32>::init(&tiny_model(&vocab), 9).unwrap();
        let cfg = small_config(12, 4);

        let mut full = TrainState::new(init.clone()).unwrap();
        let run = run_pretrain(&data, &vocab, &cfg, &mut full);
        assert_eq!(run.checkpoints, [4, 8, 12]);
        assert!(run.log.iter().all(|l| l.task == objective.name()));

        let dir = tempfile::tempdir().unwrap();
        let mut partial = TrainState::new(init).unwrap();
        let mut saved = Vec::new();
        pretrain(
            &mut partial,
            &data,
            &vocab,
            &TrainConfig { total_steps: 10, ..cfg.clone() },
            &AdafactorConfig::default(),
            |_| {},
            |s| {
                let p = dir.path().join(format!("{}.ckpt", s.step));
                s.checkpoint(serde_json::json!({"objective": objective.name()})).save(&p)?;
                saved.push(p);
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(saved.len(), 3);
        let mut resumed = TrainState::from_checkpoint(Checkpoint::load(&saved[1]).unwrap()).unwrap();
        assert_eq!(resumed.step, 8);
        run_pretrain(&data, &vocab, &cfg, &mut resumed);
        assert_eq!(resumed.params.hash_hex(), full.params.hash_hex(), "{objective}");
        assert_eq!(resumed, full);
    }
}

#[test]
fn pretrain_is_deterministic_per_seed() {
    let vocab = Vocab::bytes_only(100);
    let data = prepare_pretraining(&fixture_docs(), &vocab, Objective::Sc, &RuleTagger, 48, 0.15).unwrap();
    let init = Params::<f32>::init(&tiny_model(&vocab), 1).unwrap();
    let hash = |seed| {
        let mut s = TrainState::new(init.clone()).unwrap();
        run_pretrain(&data, &vocab, &TrainConfig { seed, ..small_config(3, 3) }, &mut s);
        s.params.hash_hex()
    };
    assert_eq!(hash(1), hash(1));
    assert_ne!(hash(1), hash(2));
}

#[test]
fn ssm_data_comes_from_salient_sentences() {
    let vocab = Vocab::bytes_only(100);
    let data = prepare_pretraining(&fixture_docs(), &vocab, Objective::Ssm, &RuleTagger, 64, 0.15).unwrap();
    assert_eq!(data.objective(), Objective::Ssm);
    assert_eq!(data.len(), 31);
    let empty = [cbqa_core::CorpusDocument {
        doc_id: "x".into(),
        text: "the cat sat".into(),
    }];
    assert!(matches!(
        prepare_pretraining(&empty, &vocab, Objective::Ssm, &RuleTagger, 64, 0.15),
        Err(TrainError::EmptyCorpus)
    ));
}

#[test]
fn pretraining_lowers_the_loss() {
    let vocab = Vocab::bytes_only(100);
    let data = prepare_pretraining(&fixture_docs(), &vocab, Objective::Sc, &RuleTagger, 48, 0.15).unwrap();
    let mut state = TrainState::new(Params::<f32>::init(&tiny_model(&vocab), 2).unwrap()).unwrap();
    let cfg = TrainConfig {
        dropout_rate: 0.0,
        ..small_config(200, 200)
    };
    let run = run_pretrain(&data, &vocab, &cfg, &mut state);
    let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
    let first = mean(&run.log[..10]);
    let last = mean(&run.log[190..]);
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn resume_past_the_end_is_rejected() {
    let vocab = Vocab::bytes_only(100);
    let data = prepare_pretraining(&fixture_docs(), &vocab, Objective::Sc, &RuleTagger, 48, 0.15).unwrap();
    let mut state = TrainState::new(Params::<f32>::init(&tiny_model(&vocab), 2).unwrap()).unwrap();
    state.step = 5;
    let err = pretrain(&mut state, &data, &vocab, &small_config(3, 3), &AdafactorConfig::default(), |_| {}, |_| Ok(()))
        .unwrap_err();
    assert!(matches!(err, TrainError::ResumePastEnd { step: 5, total: 3 }));
}

#[test]
fn objective_comparison_smoke() {
    let vocab = Vocab::bytes_only(100);
    let docs = fixture_docs();
    let objectives: Vec<PretrainData> = [Objective::Ssm, Objective::Sc]
        .into_iter()
        .map(|o| prepare_pretraining(&docs, &vocab, o, &RuleTagger, 64, 0.15).unwrap())
        .collect();
    let mixture = MixtureSpec {
        tasks: vec![
            TaskSpec::new(Dataset::Nq, TargetMode::FirstAnswer),
            TaskSpec::new(Dataset::Tqa, TargetMode::FirstAnswer),
        ],
        weights: MixtureWeights::Proportional,
    };
    let probe_data = vec![qa(Dataset::Nq, 20), qa(Dataset::Tqa, 20)];
    let config = ComparisonConfig {
        blocks: 2,
        pretrain_block: 3,
        finetune_steps: 2,
        pretrain: small_config(1, 1),
        probe: small_config(1, 1),
    };
    let base = Params::<f32>::init(&tiny_model(&vocab), 4).unwrap();
    let table = run_objective_comparison(
        &base,
        &objectives,
        &vocab,
        &mixture,
        &probe_data,
        &config,
        &AdafactorConfig::default(),
        |_| {},
    )
    .unwrap();
    let keys: Vec<(Objective, u64)> = table.rows.iter().map(|r| (r.objective, r.pretrain_step)).collect();
    assert_eq!(
        keys,
        [(Objective::Ssm, 3), (Objective::Ssm, 6), (Objective::Sc, 3), (Objective::Sc, 6)]
    );
    assert!(table.probes_isolated());
    assert!(table.rows.iter().all(|r| (0.0..=100.0).contains(&r.max_val_em)));
    let csv = table.to_csv();
    assert_eq!(csv.lines().next(), Some("objective,pretrain_step,max_val_em"));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("ssm,3,"));
}
