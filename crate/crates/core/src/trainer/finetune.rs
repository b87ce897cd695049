use super::stream::{EpochStream, Packer, TokenPair};
use super::{
    encode_pair, format_example, select_best_checkpoint, tokens_to_text, StepLog, TargetMode, TaskSpec, TrainConfig,
    TrainError, TrainState,
};
use crate::corpus::{make_holdout_split, Dataset, QaExample};
use crate::eval::{evaluate, EvalMode, EvalReport};
use crate::model::{greedy_decode, Params};
use crate::optim::AdafactorConfig;
use crate::rng::{mix, stream_rng};
use crate::tokenizer::Vocab;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const HOLDOUT_FRACTION: f64 = 0.1;
const MIXTURE_STREAM: u64 = 0x4d49_5854;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureWeights {
    /// Proportional to each task's training-split size.
    Proportional,
    /// One positive rate per task, normalized.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub tasks: Vec<TaskSpec>,
    pub weights: MixtureWeights,
}

impl MixtureSpec {
    pub fn single(task: TaskSpec) -> Self {
        MixtureSpec {
            tasks: vec![task],
            weights: MixtureWeights::Proportional,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.tasks.is_empty() {
            return Err(TrainError::InvalidConfig("mixture has no tasks".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tasks {
            if !seen.insert(t.name) {
                return Err(TrainError::InvalidConfig(format!("task {} listed twice", t.name)));
            }
        }
        if let MixtureWeights::Explicit(w) = &self.weights {
            if w.len() != self.tasks.len() {
                return Err(TrainError::InvalidConfig(format!(
                    "{} weights for {} tasks",
                    w.len(),
                    self.tasks.len()
                )));
            }
            if let Some(bad) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(TrainError::InvalidConfig(format!("mixture weight {bad} is not positive")));
            }
        }
        Ok(())
    }
}

/// Multipliers applied to one task's batch budget and dropout rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskOverride {
    pub batch_scale: f64,
    pub dropout_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOverrides(pub BTreeMap<Dataset, TaskOverride>);

impl Default for TaskOverrides {
    /// WebQuestions trains with half the batch and twice the dropout.
    fn default() -> Self {
        TaskOverrides(BTreeMap::from([(
            Dataset::Wq,
            TaskOverride {
                batch_scale: 0.5,
                dropout_scale: 2.0,
            },
        )]))
    }
}

impl TaskOverrides {
    pub fn none() -> Self {
        TaskOverrides(BTreeMap::new())
    }
}

/// Batch budget and dropout rate `task` trains with.
pub fn effective_settings(
    config: &TrainConfig,
    overrides: &TaskOverrides,
    task: Dataset,
) -> Result<(usize, f64), TrainError> {
    let (batch, dropout) = match overrides.0.get(&task) {
        None => (config.batch_tokens, config.dropout_rate),
        Some(o) => (
            (config.batch_tokens as f64 * o.batch_scale).round() as usize,
            config.dropout_rate * o.dropout_scale,
        ),
    };
    if batch == 0 || !(0.0..1.0).contains(&dropout) {
        return Err(TrainError::InvalidConfig(format!(
            "override for {task} gives batch_tokens {batch}, dropout {dropout}"
        )));
    }
    Ok((batch, dropout))
}

/// Draws one task index per step with fixed probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSampler {
    cumulative: Vec<f64>,
    seed: u64,
}

impl MixtureSampler {
    pub fn new(weights: &[f64], seed: u64) -> Result<Self, TrainError> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(TrainError::InvalidConfig("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Ok(MixtureSampler { cumulative, seed })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cumulative
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    /// Task index for `step`.
    pub fn sample(&self, step: u64) -> usize {
        if self.cumulative.len() == 1 {
            return 0;
        }
        let u: f64 = stream_rng(mix(self.seed, MIXTURE_STREAM), step).random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// The settings one task actually trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTask {
    pub task: Dataset,
    pub prefix: String,
    pub target_mode: TargetMode,
    pub batch_tokens: usize,
    pub dropout_rate: f64,
    pub mixture_rate: f64,
    pub train_examples: usize,
    pub validation_examples: usize,
    /// Training examples without a usable target or too long for the model.
    pub dropped_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: Dataset,
    pub mode: EvalMode,
    pub score: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCheckpoint {
    pub step: u64,
    pub scores: Vec<TaskScore>,
    /// Mean of the per-task scores; the selection metric.
    pub score: f64,
    pub params_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRun {
    pub tasks: Vec<EffectiveTask>,
    pub checkpoints: Vec<FinetuneCheckpoint>,
    /// Index into `checkpoints` of the selected checkpoint.
    pub best: usize,
    pub best_params: Params<f32>,
    pub log: Vec<StepLog>,
}

impl FinetuneRun {
    pub fn best_checkpoint(&self) -> &FinetuneCheckpoint {
        &self.checkpoints[self.best]
    }

    pub fn max_score(&self) -> f64 {
        self.best_checkpoint().score
    }
}

fn eval_mode(mode: TargetMode) -> EvalMode {
    match mode {
        TargetMode::AllAnswers => EvalMode::MultiAnswerRecall,
        TargetMode::FirstAnswer | TargetMode::RandomAnswer => EvalMode::OpenDomainEm,
    }
}

/// Greedy-decode every example and score it under the task's metric.
pub fn evaluate_params(
    params: &Params<f32>,
    vocab: &Vocab,
    task: &TaskSpec,
    examples: &[QaExample],
    decode_max_len: usize,
) -> Result<EvalReport, TrainError> {
    let max_len = params.config.max_len;
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        let mut inputs = vocab.encode(&format!("{}{}", task.prefix, ex.question));
        inputs.truncate(max_len);
        let out = greedy_decode(params, &inputs, decode_max_len.min(max_len))?;
        preds.push((ex.id.clone(), tokens_to_text(vocab, &out)));
    }
    Ok(evaluate(&preds, examples, eval_mode(task.target_mode)).expect("ids are unique per dataset"))
}

struct Prepared {
    spec: TaskSpec,
    train: Vec<(QaExample, TokenPair)>,
    validation: Vec<QaExample>,
    effective: EffectiveTask,
}

fn prepare(
    task: &TaskSpec,
    examples: &[QaExample],
    vocab: &Vocab,
    config: &TrainConfig,
    overrides: &TaskOverrides,
    max_len: usize,
) -> Result<Prepared, TrainError> {
    let (batch_tokens, dropout_rate) = effective_settings(config, overrides, task.name)?;
    let (train_raw, validation) = make_holdout_split(examples, HOLDOUT_FRACTION, config.seed)?;
    let mut dropped = 0;
    let mut train = Vec::with_capacity(train_raw.len());
    for ex in train_raw {
        // Random-answer targets are re-drawn per epoch; this checks that at
        // least one fits and the fixed modes are formatted once.
        let pair = format_example(task, &ex, 0).and_then(|(i, t)| encode_pair(vocab, &i, &t, max_len));
        match pair {
            Some(p) if p.tokens() <= batch_tokens => train.push((ex, p)),
            _ => dropped += 1,
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyTask(task.name.to_string()));
    }
    let effective = EffectiveTask {
        task: task.name,
        prefix: task.prefix.clone(),
        target_mode: task.target_mode,
        batch_tokens,
        dropout_rate,
        mixture_rate: 0.0,
        train_examples: train.len(),
        validation_examples: validation.len(),
        dropped_examples: dropped,
    };
    Ok(Prepared {
        spec: task.clone(),
        train,
        validation,
        effective,
    })
}

/// Fine-tune on a task mixture, scoring the held-out split at every checkpoint.
///
/// Each task is split 90/10 with `config.seed`, trains with its own batch
/// budget and dropout rate, and one task is sampled per step. `datasets[i]`
/// holds the examples of `mixture.tasks[i]`. A state restored at step k
/// replays the first k scheduled batches before continuing.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    state: &mut TrainState,
    mixture: &MixtureSpec,
    datasets: &[Vec<QaExample>],
    vocab: &Vocab,
    config: &TrainConfig,
    overrides: &TaskOverrides,
    opt: &AdafactorConfig,
    mut on_step: impl FnMut(&StepLog),
    mut on_checkpoint: impl FnMut(&TrainState, &FinetuneCheckpoint) -> Result<(), TrainError>,
) -> Result<FinetuneRun, TrainError> {
    config.validate()?;
    opt.validate()?;
    mixture.validate()?;
    if datasets.len() != mixture.tasks.len() {
        return Err(TrainError::InvalidConfig(format!(
            "{} datasets for {} tasks",
            datasets.len(),
            mixture.tasks.len()
        )));
    }
    if state.step > config.total_steps {
        return Err(TrainError::ResumePastEnd {
            step: state.step,
            total: config.total_steps,
        });
    }
    let max_len = state.params.config.max_len;
    let mut prepared = mixture
        .tasks
        .iter()
        .zip(datasets)
        .map(|(t, d)| prepare(t, d, vocab, config, overrides, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let weights: Vec<f64> = match &mixture.weights {
        MixtureWeights::Proportional => prepared.iter().map(|p| p.train.len() as f64).collect(),
        MixtureWeights::Explicit(w) => w.clone(),
    };
    let sampler = MixtureSampler::new(&weights, config.seed)?;
    for (p, rate) in prepared.iter_mut().zip(sampler.probabilities()) {
        p.effective.mixture_rate = rate;
    }

    let mut streams: Vec<_> = prepared
        .iter()
        .enumerate()
        .map(|(ti, p)| {
            let spec = &p.spec;
            let seed = mix(config.seed, ti as u64);
            let pairs = EpochStream::new(&p.train, seed, move |(ex, fixed): &(QaExample, TokenPair), key| {
                if spec.target_mode != TargetMode::RandomAnswer {
                    return Ok(Some(fixed.clone()));
                }
                Ok(format_example(spec, ex, mix(seed, key))
                    .and_then(|(i, t)| encode_pair(vocab, &i, &t, max_len))
                    .or_else(|| Some(fixed.clone())))
            });
            Packer::new(pairs, p.effective.batch_tokens)
        })
        .collect();

    let mut next_batch = |step: u64| -> Result<(usize, Vec<TokenPair>), TrainError> {
        let ti = sampler.sample(step);
        let batch = streams[ti].next().ok_or(TrainError::EmptyCorpus)??;
        Ok((ti, batch))
    };
    for s in 0..state.step {
        next_batch(s + 1)?;
    }

    let mut run_log = Vec::new();
    let mut checkpoints: Vec<FinetuneCheckpoint> = Vec::new();
    let mut best_params: Option<Params<f32>> = None;
    while state.step < config.total_steps {
        let (ti, batch) = next_batch(state.step + 1)?;
        let task = &prepared[ti];
        let loss = state.train_step(&batch, task.effective.dropout_rate, config.seed, opt)?;
        let entry = StepLog {
            step: state.step,
            loss,
            task: task.spec.name.to_string(),
        };
        on_step(&entry);
        run_log.push(entry);
        if config.is_checkpoint(state.step) {
            let mut scores = Vec::with_capacity(prepared.len());
            for p in &prepared {
                let report = evaluate_params(&state.params, vocab, &p.spec, &p.validation, config.decode_max_len)?;
                scores.push(TaskScore {
                    task: p.spec.name,
                    mode: report.aggregate.mode,
                    score: report.aggregate.score,
                    evaluated: report.aggregate.evaluated,
                });
            }
            let score = scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64;
            let ckpt = FinetuneCheckpoint {
                step: state.step,
                scores,
                score,
                params_hash: state.params.hash_hex(),
            };
            on_checkpoint(state, &ckpt)?;
            if checkpoints.iter().all(|c| score > c.score) {
                best_params = Some(state.params.clone());
            }
            checkpoints.push(ckpt);
        }
    }
    drop(streams);
    let series: Vec<(u64, f64)> = checkpoints.iter().map(|c| (c.step, c.score)).collect();
    let best = select_best_checkpoint(&series).ok_or_else(|| {
        TrainError::InvalidConfig("fine-tuning emitted no checkpoint (resumed at the final step)".into())
    })?;
    Ok(FinetuneRun {
        tasks: prepared.into_iter().map(|p| p.effective).collect(),
        checkpoints,
        best,
        best_params: best_params.expect("a checkpoint exists"),
        log: run_log,
    })
}
