use super::{input, load_qa, load_vocab, parse_dataset, record_input, same_vocab, write_json, Ctx};
use crate::args::{DecodeArgs, EvaluateArgs};
use crate::error::{config, CliError};
use crate::manifest::beside;
use anyhow::Context;
use cbqa_core::eval::{evaluate as score, load_predictions, EvalMode, PredictionRecord};
use cbqa_core::jsonl::write_lines;
use cbqa_core::model::{greedy_decode, Checkpoint, Params};
use cbqa_core::trainer::{tokens_to_text, TargetMode, TaskSpec};
use cbqa_core::{QaExample, Vocab};
use serde_json::json;
use std::path::PathBuf;

fn decode_one(params: &Params<f32>, vocab: &Vocab, task: &TaskSpec, ex: &QaExample, max_len: usize) -> anyhow::Result<String> {
    let limit = params.config.max_len;
    let mut inputs = vocab.encode(&format!("{}{}", task.prefix, ex.question));
    inputs.truncate(limit);
    let out = greedy_decode(params, &inputs, max_len.min(limit)).with_context(|| format!("decoding {}", ex.id))?;
    Ok(tokens_to_text(vocab, &out))
}

/// Decode in `threads` contiguous shards; output order is dataset order.
fn decode_all(
    params: &Params<f32>,
    vocab: &Vocab,
    task: &TaskSpec,
    examples: &[QaExample],
    max_len: usize,
    threads: usize,
) -> anyhow::Result<Vec<String>> {
    let shard = examples.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = examples
            .chunks(shard)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|ex| decode_one(params, vocab, task, ex, max_len))
                        .collect::<anyhow::Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

pub fn decode(ctx: &Ctx, a: DecodeArgs) -> Result<(), CliError> {
    let mut s = ctx.settings("decode")?;
    let max_len: usize = s.get("max_len", a.max_len, 32)?;
    s.finish()?;
    if max_len == 0 {
        return Err(config("--max-len must be positive"));
    }
    let dataset = parse_dataset(&a.task)?;
    let ckpt_path = input(&a.checkpoint)?;
    let vocab_path = input(&a.vocab)?;
    let data_path = input(&a.dataset)?;
    let task = TaskSpec::new(dataset, TargetMode::FirstAnswer);

    let mut m = ctx.manifest("decode", None, json!({ "task": dataset, "prefix": task.prefix, "max_len": max_len }))?;
    record_input(&mut m, &a.checkpoint, &ckpt_path)?;
    record_input(&mut m, &a.vocab, &vocab_path)?;
    record_input(&mut m, &a.dataset, &data_path)?;
    m.artifact(&a.out);
    m.write(&beside(&a.out))?;

    let vocab = load_vocab(&vocab_path)?;
    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    same_vocab(&ckpt.params, &vocab)?;
    let examples = load_qa(&data_path, dataset)?;
    let preds = decode_all(&ckpt.params, &vocab, &task, &examples, max_len, ctx.threads)?;
    let rows: Vec<PredictionRecord> = examples
        .iter()
        .zip(preds)
        .map(|(ex, prediction)| PredictionRecord {
            id: ex.id.clone(),
            prediction,
        })
        .collect();
    write_lines(&a.out, &rows).with_context(|| format!("writing {}", a.out.display()))?;
    println!("{}", json!({ "predictions": rows.len() }));
    Ok(())
}

pub fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<(), CliError> {
    let s = ctx.settings("evaluate")?;
    s.finish()?;
    let mode = match a.mode.as_str() {
        "em" => EvalMode::OpenDomainEm,
        _ => EvalMode::MultiAnswerRecall,
    };
    let dataset = parse_dataset(&a.dataset_name)?;
    let pred_path = input(&a.predictions)?;
    let data_path = input(&a.dataset)?;
    let out: PathBuf = a.out.clone().unwrap_or_else(|| a.predictions.with_extension("report.json"));
    if out == pred_path || out == data_path {
        return Err(config(format!("report path {} would overwrite an input", out.display())));
    }

    let mut m = ctx.manifest("evaluate", None, json!({ "mode": mode, "dataset": dataset }))?;
    record_input(&mut m, &a.predictions, &pred_path)?;
    record_input(&mut m, &a.dataset, &data_path)?;
    m.artifact(&out);
    let digest = m.write(&beside(&out))?;

    let preds = load_predictions(&pred_path).with_context(|| format!("loading {}", pred_path.display()))?;
    let examples = load_qa(&data_path, dataset)?;
    let report = score(&preds, &examples, mode).context("scoring predictions")?;
    write_json(&out, &json!({ "manifest_digest": digest, "dataset": dataset, "report": report }))?;
    println!("{}", report.summary_line());
    Ok(())
}
