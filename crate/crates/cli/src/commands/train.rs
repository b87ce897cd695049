use super::data::annotated_tagger;
use super::{
    ensure_dir, input, load_docs, load_qa, load_state, load_vocab, model_source, record_input, write_json, write_text,
    Ctx, ModelSource, TaskArg,
};
use crate::args::{CompareArgs, FinetuneArgs, PretrainArgs, TrainArgs};
use crate::error::{config, CliError};
use crate::manifest::{beside, sibling, RunManifest};
use anyhow::Context;
use cbqa_core::jsonl::write_lines;
use cbqa_core::model::{Checkpoint, ModelConfig, Params};
use cbqa_core::optim::AdafactorConfig;
use cbqa_core::salient::{RuleTagger, SalientTagger};
use cbqa_core::span_corruption::CorruptionConfig;
use cbqa_core::trainer::{
    self, effective_settings, prepare_pretraining, run_objective_comparison, ComparisonConfig, MixtureSpec,
    MixtureWeights, Objective, TaskOverrides, TrainConfig, TrainError, TrainState,
};
use serde_json::json;
use std::path::{Path, PathBuf};

struct Resolved {
    train: TrainConfig,
    opt: AdafactorConfig,
}

/// Training flags layered over `base`.
fn train_settings(s: &mut crate::settings::Settings, a: &TrainArgs, base: TrainConfig) -> Result<Resolved, CliError> {
    let train = TrainConfig {
        total_steps: s.get("steps", a.steps, base.total_steps)?,
        batch_tokens: s.get("batch_tokens", a.batch_tokens, base.batch_tokens)?,
        dropout_rate: s.get("dropout", a.dropout, base.dropout_rate)?,
        checkpoint_every: s.get("checkpoint_every", a.checkpoint_every, base.checkpoint_every)?,
        seed: s.get("seed", a.seed, base.seed)?,
        decode_max_len: base.decode_max_len,
    };
    let opt = AdafactorConfig {
        learning_rate: s.get("lr", a.lr, 1e-3)?,
        ..AdafactorConfig::default()
    };
    train.validate().map_err(config)?;
    opt.validate().map_err(config)?;
    Ok(Resolved { train, opt })
}

fn tagger_for(spans: Option<&Path>) -> anyhow::Result<Box<dyn SalientTagger>> {
    Ok(match spans {
        Some(p) => Box::new(annotated_tagger(p)?),
        None => Box::new(RuleTagger),
    })
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:08}.ckpt"))
}

fn save(state: &TrainState, path: &Path, meta: serde_json::Value) -> Result<(), TrainError> {
    state.checkpoint(meta).save(path)?;
    Ok(())
}

pub fn pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("pretrain")?;
    let objective: Objective = a.objective.parse().map_err(config)?;
    let mask_rate: f64 = s.get("mask_rate", a.mask_rate, 0.15)?;
    let chunk_len: usize = s.get("chunk_len", a.chunk_len, ctx.pick(96, 512))?;
    let base = TrainConfig {
        batch_tokens: ctx.pick(4096, 196_608),
        total_steps: ctx.pick(1000, 100_000),
        checkpoint_every: ctx.pick(200, 1000),
        ..TrainConfig::desk()
    };
    let Resolved { train, opt } = train_settings(&mut s, &a.train, base)?;
    s.finish()?;
    CorruptionConfig { mask_rate, seed: 0 }.validate().map_err(config)?;
    if chunk_len == 0 {
        return Err(config("--chunk-len must be positive"));
    }
    let corpus = input(&a.corpus)?;
    let vocab_path = input(&a.vocab)?;
    let spans = a.spans.as_deref().map(input).transpose()?;
    let vocab = load_vocab(&vocab_path)?;
    let (source, source_path) = model_source(&a.model, &vocab, train.seed)?;

    let mut m = ctx.manifest(
        "pretrain",
        Some(train.seed),
        json!({
            "objective": objective,
            "mask_rate": mask_rate,
            "chunk_len": chunk_len,
            "train": train,
            "optimizer": opt,
            "model": source,
            "tagger": if spans.is_some() { "annotated" } else { "rule" },
        }),
    )?;
    record_input(&mut m, &a.corpus, &corpus)?;
    record_input(&mut m, &a.vocab, &vocab_path)?;
    if let (Some(given), Some(resolved)) = (&a.spans, &spans) {
        record_input(&mut m, given, resolved)?;
    }
    record_source(&mut m, &source, source_path.as_deref())?;
    m.artifact(&a.out_dir);
    ensure_dir(&a.out_dir)?;
    let digest = m.write(&a.out_dir.join("manifest.json"))?;

    let mut state = load_state(&source, source_path.as_deref(), &vocab)?;
    let tagger = tagger_for(spans.as_deref())?;
    let docs = load_docs(&corpus)?;
    let data = prepare_pretraining(&docs, &vocab, objective, tagger.as_ref(), chunk_len, mask_rate)
        .context("preparing pre-training data")?;
    let meta = json!({ "kind": "pretrain", "objective": objective, "manifest_digest": digest });
    let run = trainer::pretrain(
        &mut state,
        &data,
        &vocab,
        &train,
        &opt,
        |_| {},
        |st| save(st, &checkpoint_path(&a.out_dir, st.step), meta.clone()),
    )
    .context("pre-training")?;
    let log_path = a.out_dir.join("train_log.jsonl");
    write_lines(&log_path, &run.log).with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "{}",
        json!({
            "step": state.step,
            "final_loss": run.log.last().map(|l| l.loss),
            "checkpoints": run.checkpoints,
            "skipped_pairs": run.skipped_pairs,
        })
    );
    Ok(())
}

fn record_source(m: &mut RunManifest, source: &ModelSource, resolved: Option<&Path>) -> anyhow::Result<()> {
    match (source, resolved) {
        (ModelSource::Init { path } | ModelSource::Resume { path }, Some(r)) => record_input(m, path, r),
        _ => Ok(()),
    }
}

fn parse_weights(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|e| config(format!("weight `{w}`: {e}"))))
        .collect()
}

pub fn finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("finetune")?;
    let tasks = a.task.iter().map(|t| TaskArg::parse(t)).collect::<Result<Vec<_>, _>>()?;
    let weights = a.weights.as_deref().map(parse_weights).transpose()?;
    let weights: Option<Vec<f64>> = s.get_opt("weights", weights)?;
    let no_overrides: bool = s.get("no_task_overrides", a.no_task_overrides.then_some(true), false)?;
    let base = ctx.pick(TrainConfig::desk(), TrainConfig::paper());
    let decode_max_len: usize = s.get("decode_max_len", a.decode_max_len, base.decode_max_len)?;
    let Resolved { mut train, opt } = train_settings(&mut s, &a.train, base)?;
    train.decode_max_len = decode_max_len;
    s.finish()?;
    if decode_max_len == 0 {
        return Err(config("--decode-max-len must be positive"));
    }
    let mixture = MixtureSpec {
        tasks: tasks.iter().map(TaskArg::spec).collect(),
        weights: weights.clone().map_or(MixtureWeights::Proportional, MixtureWeights::Explicit),
    };
    mixture.validate().map_err(config)?;
    let overrides = if no_overrides { TaskOverrides::none() } else { TaskOverrides::default() };
    let mut effective = Vec::new();
    for t in &tasks {
        let (batch_tokens, dropout_rate) = effective_settings(&train, &overrides, t.task).map_err(config)?;
        effective.push(json!({
            "task": t.task,
            "target_mode": t.mode,
            "prefix": t.spec().prefix,
            "batch_tokens": batch_tokens,
            "dropout_rate": dropout_rate,
        }));
    }
    let paths = tasks.iter().map(|t| input(&t.path)).collect::<Result<Vec<_>, _>>()?;
    let vocab_path = input(&a.vocab)?;
    let vocab = load_vocab(&vocab_path)?;
    let (source, source_path) = model_source(&a.model, &vocab, train.seed)?;

    let mut m = ctx.manifest(
        "finetune",
        Some(train.seed),
        json!({
            "tasks": effective,
            "weights": weights,
            "task_overrides": overrides.0,
            "train": train,
            "optimizer": opt,
            "model": source,
        }),
    )?;
    for (t, p) in tasks.iter().zip(&paths) {
        record_input(&mut m, &t.path, p)?;
    }
    record_input(&mut m, &a.vocab, &vocab_path)?;
    record_source(&mut m, &source, source_path.as_deref())?;
    m.artifact(&a.out_dir);
    ensure_dir(&a.out_dir)?;
    let digest = m.write(&a.out_dir.join("manifest.json"))?;

    let datasets = tasks
        .iter()
        .zip(&paths)
        .map(|(t, p)| load_qa(p, t.task))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut state = load_state(&source, source_path.as_deref(), &vocab)?;
    let meta = json!({ "kind": "finetune", "manifest_digest": digest });
    let run = trainer::finetune(
        &mut state,
        &mixture,
        &datasets,
        &vocab,
        &train,
        &overrides,
        &opt,
        |_| {},
        |st, _| save(st, &checkpoint_path(&a.out_dir, st.step), meta.clone()),
    )
    .context("fine-tuning")?;

    let best = run.best_checkpoint();
    let best_ckpt = Checkpoint {
        step: best.step,
        params: run.best_params.clone(),
        optimizer: None,
        meta: json!({ "kind": "finetune-best", "manifest_digest": digest, "score": best.score }),
    };
    let best_path = a.out_dir.join("best.ckpt");
    best_ckpt.save(&best_path).with_context(|| format!("writing {}", best_path.display()))?;
    let val_path = a.out_dir.join("validation.jsonl");
    write_lines(&val_path, &run.checkpoints).with_context(|| format!("writing {}", val_path.display()))?;
    let log_path = a.out_dir.join("train_log.jsonl");
    write_lines(&log_path, &run.log).with_context(|| format!("writing {}", log_path.display()))?;
    let summary = json!({
        "manifest_digest": digest,
        "tasks": run.tasks,
        "best_step": best.step,
        "best_score": best.score,
        "best_params_hash": best.params_hash,
        "checkpoints": run.checkpoints.len(),
    });
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    println!("{}", json!({ "best_step": best.step, "best_score": best.score }));
    Ok(())
}

pub fn compare(ctx: &Ctx, a: CompareArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("compare-objectives")?;
    let tasks = a.task.iter().map(|t| TaskArg::parse(t)).collect::<Result<Vec<_>, _>>()?;
    let seed: u64 = s.get("seed", a.seed, 0)?;
    let dropout: f64 = s.get("dropout", a.dropout, 0.1)?;
    let cfg = ComparisonConfig {
        blocks: s.get("blocks", a.blocks, ctx.pick(3, 10))?,
        pretrain_block: s.get("pretrain_block", a.pretrain_block, ctx.pick(50, 10_000))?,
        finetune_steps: s.get("finetune_steps", a.finetune_steps, ctx.pick(50, 20_000))?,
        pretrain: TrainConfig {
            batch_tokens: s.get("batch_tokens", a.batch_tokens, ctx.pick(2048, 196_608))?,
            dropout_rate: dropout,
            seed,
            ..TrainConfig::desk()
        },
        probe: TrainConfig {
            batch_tokens: s.get("probe_batch_tokens", a.probe_batch_tokens, ctx.pick(2048, 196_608))?,
            checkpoint_every: s.get("probe_checkpoint_every", a.probe_checkpoint_every, ctx.pick(25, 1000))?,
            dropout_rate: dropout,
            seed,
            ..TrainConfig::desk()
        },
    };
    let mask_rate: f64 = s.get("mask_rate", a.mask_rate, 0.15)?;
    let chunk_len: usize = s.get("chunk_len", a.chunk_len, ctx.pick(96, 512))?;
    let opt = AdafactorConfig {
        learning_rate: s.get("lr", a.lr, 1e-3)?,
        ..AdafactorConfig::default()
    };
    s.finish()?;
    cfg.validate().map_err(config)?;
    opt.validate().map_err(config)?;
    CorruptionConfig { mask_rate, seed: 0 }.validate().map_err(config)?;
    if chunk_len == 0 {
        return Err(config("--chunk-len must be positive"));
    }
    let mixture = MixtureSpec {
        tasks: tasks.iter().map(TaskArg::spec).collect(),
        weights: MixtureWeights::Proportional,
    };
    mixture.validate().map_err(config)?;

    let corpus = input(&a.corpus)?;
    let vocab_path = input(&a.vocab)?;
    let spans = a.spans.as_deref().map(input).transpose()?;
    let init = a.init.as_deref().map(input).transpose()?;
    let paths = tasks.iter().map(|t| input(&t.path)).collect::<Result<Vec<_>, _>>()?;
    let vocab = load_vocab(&vocab_path)?;
    let model = match (&a.model_config, &init) {
        (Some(p), _) => {
            let path = input(p)?;
            let text = std::fs::read_to_string(&path).map_err(|e| config(format!("{}: {e}", p.display())))?;
            let model: ModelConfig =
                serde_json::from_str(&text).map_err(|e| config(format!("model config {}: {e}", p.display())))?;
            super::check_model(&model, &vocab)?;
            Some(model)
        }
        (None, None) => Some(ModelConfig::desk(vocab.len())),
        (None, Some(_)) => None,
    };

    let rows_path = sibling(&a.out, ".rows.json");
    let mut m = ctx.manifest(
        "compare-objectives",
        Some(seed),
        json!({
            "comparison": cfg,
            "mask_rate": mask_rate,
            "chunk_len": chunk_len,
            "optimizer": opt,
            "tasks": tasks,
            "model": model,
            "init": a.init,
            "tagger": if spans.is_some() { "annotated" } else { "rule" },
        }),
    )?;
    record_input(&mut m, &a.corpus, &corpus)?;
    record_input(&mut m, &a.vocab, &vocab_path)?;
    for (t, p) in tasks.iter().zip(&paths) {
        record_input(&mut m, &t.path, p)?;
    }
    if let (Some(given), Some(resolved)) = (&a.spans, &spans) {
        record_input(&mut m, given, resolved)?;
    }
    if let (Some(given), Some(resolved)) = (&a.init, &init) {
        record_input(&mut m, given, resolved)?;
    }
    m.artifact(&a.out);
    m.artifact(&rows_path);
    let digest = m.write(&beside(&a.out))?;

    let base: Params<f32> = match (&model, &init) {
        (Some(model), _) => Params::init(model, seed).context("initializing model")?,
        (None, Some(p)) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?.params,
        (None, None) => unreachable!("a model config is always resolved without --init"),
    };
    super::same_vocab(&base, &vocab)?;
    let tagger = tagger_for(spans.as_deref())?;
    let docs = load_docs(&corpus)?;
    let objectives = [Objective::Sc, Objective::Ssm]
        .into_iter()
        .map(|o| prepare_pretraining(&docs, &vocab, o, tagger.as_ref(), chunk_len, mask_rate))
        .collect::<Result<Vec<_>, _>>()
        .context("preparing pre-training data")?;
    let datasets = tasks
        .iter()
        .zip(&paths)
        .map(|(t, p)| load_qa(p, t.task))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let table = run_objective_comparison(&base, &objectives, &vocab, &mixture, &datasets, &cfg, &opt, |row| {
        println!(
            "{}",
            json!({ "objective": row.objective, "pretrain_step": row.pretrain_step, "max_val_em": row.max_val_em })
        );
    })
    .context("comparing objectives")?;
    write_text(&a.out, &table.to_csv())?;
    write_json(
        &rows_path,
        &json!({
            "manifest_digest": digest,
            "probes_isolated": table.probes_isolated(),
            "rows": table.rows,
        }),
    )?;
    Ok(())
}
