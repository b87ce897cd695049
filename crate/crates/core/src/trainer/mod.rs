//! Training protocol: text-to-text formatting, token-budget batching,
//! pre-training with either masking objective, multitask fine-tuning with
//! held-out checkpoint selection, and the objective comparison schedule.

mod compare;
mod finetune;
mod pretrain;
mod stream;

pub use compare::{run_objective_comparison, ComparisonConfig, ComparisonRow, ComparisonTable};
pub use finetune::{
    effective_settings, evaluate_params, finetune, EffectiveTask, FinetuneCheckpoint, FinetuneRun, MixtureSampler,
    MixtureSpec, MixtureWeights, TaskOverride, TaskOverrides, TaskScore,
};
pub use pretrain::{pretrain, prepare_pretraining, Objective, PretrainData, PretrainRun};
pub use stream::{pack_batches, EpochStream, Packer, TokenPair};

use crate::corpus::{multi_answer_target, open_domain_target, CorpusError, Dataset, QaExample};
use crate::model::{loss_and_grad, Batch, Checkpoint, CheckpointError, Dropout, ModelError, Params};
use crate::optim::{AdafactorConfig, AdafactorState, OptimError};
use crate::rng::{mix, stream_rng};
use crate::salient::SalientError;
use crate::span_corruption::CorruptionError;
use crate::tokenizer::{Vocab, EOS_ID, PAD_ID};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

const RANDOM_ANSWER_STREAM: u64 = 0x5241_4e44;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("pair of {tokens} tokens exceeds the batch budget of {budget}")]
    Oversized { tokens: usize, budget: usize },
    #[error("task {0} has no usable examples after target filtering")]
    EmptyTask(String),
    #[error("pre-training corpus yields no training pairs")]
    EmptyCorpus,
    #[error("checkpoint at step {step} is past the requested {total} steps")]
    ResumePastEnd { step: u64, total: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Salient(#[from] SalientError),
    #[error(transparent)]
    Corruption(#[from] CorruptionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetMode {
    FirstAnswer,
    AllAnswers,
    RandomAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: Dataset,
    pub prefix: String,
    pub target_mode: TargetMode,
}

impl TaskSpec {
    /// The task's question prefix (`"nq question: "` etc.) with the given target mode.
    pub fn new(name: Dataset, target_mode: TargetMode) -> Self {
        TaskSpec {
            name,
            prefix: format!("{} question: ", name.name()),
            target_mode,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let p = &self.prefix;
        if p.trim().is_empty() || !p.ends_with(' ') || p.ends_with("  ") {
            return Err(TrainError::InvalidConfig(format!(
                "task prefix {p:?} must be non-empty and end with a single space"
            )));
        }
        Ok(())
    }
}

/// Input and target text for one example, or `None` when the example has no
/// usable target under the task's mode.
pub fn format_example(task: &TaskSpec, example: &QaExample, rng_stream: u64) -> Option<(String, String)> {
    let input = format!("{}{}", task.prefix, example.question);
    let target = match task.target_mode {
        TargetMode::FirstAnswer => open_domain_target(example)?,
        TargetMode::AllAnswers => {
            let annotator = example.annotator_answers.iter().position(|a| !a.is_empty())?;
            multi_answer_target(example, annotator).ok()?
        }
        TargetMode::RandomAnswer => {
            let answers: Vec<&str> = example.all_answers().collect();
            if answers.is_empty() {
                return None;
            }
            let i = stream_rng(rng_stream, RANDOM_ANSWER_STREAM).random_range(0..answers.len());
            answers[i].to_string()
        }
    };
    Some((input, target))
}

/// Encode a formatted example; targets end with eos. `None` if either side
/// exceeds `max_len` tokens.
pub fn encode_pair(vocab: &Vocab, input: &str, target: &str, max_len: usize) -> Option<TokenPair> {
    let inputs = vocab.encode(input);
    let mut targets = vocab.encode(target);
    targets.push(EOS_ID);
    (inputs.len() <= max_len && targets.len() <= max_len).then_some(TokenPair { inputs, targets })
}

/// Decoded text up to the first eos, skipping pad and sentinel ids.
pub fn tokens_to_text(vocab: &Vocab, tokens: &[u32]) -> String {
    let body: Vec<u32> = tokens
        .iter()
        .copied()
        .take_while(|&t| t != EOS_ID)
        .filter(|&t| t != PAD_ID && vocab.sentinel_index(t).is_none() && (t as usize) < vocab.len())
        .collect();
    String::from_utf8_lossy(&vocab.decode_bytes(&body).unwrap_or_default()).into_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Token budget per batch, counting input plus target tokens.
    pub batch_tokens: usize,
    pub total_steps: u64,
    pub dropout_rate: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Longest greedy decode during validation.
    pub decode_max_len: usize,
}

impl TrainConfig {
    /// Desk-scale fine-tuning defaults.
    pub fn desk() -> Self {
        TrainConfig {
            batch_tokens: 4096,
            total_steps: 2000,
            dropout_rate: 0.1,
            checkpoint_every: 200,
            seed: 0,
            decode_max_len: 32,
        }
    }

    /// The published fine-tuning setup.
    pub fn paper() -> Self {
        TrainConfig {
            batch_tokens: 196_608,
            total_steps: 20_000,
            checkpoint_every: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub(crate) fn is_checkpoint(&self, step: u64) -> bool {
        step.is_multiple_of(self.checkpoint_every) || step == self.total_steps
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub task: String,
}

/// Parameters, optimizer state and step counter of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Params<f32>,
    pub optimizer: AdafactorState<f32>,
    pub step: u64,
}

impl TrainState {
    /// Fresh optimizer state at step 0.
    pub fn new(params: Params<f32>) -> Result<Self, TrainError> {
        let optimizer = AdafactorState::init(&params)?;
        Ok(TrainState {
            params,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        let optimizer = match ckpt.optimizer {
            Some(o) => o,
            None => AdafactorState::init(&ckpt.params)?,
        };
        Ok(TrainState {
            params: ckpt.params,
            optimizer,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
            meta,
        }
    }

    /// One optimizer step on `pairs`; dropout masks are keyed by `(seed, step)`.
    pub fn train_step(
        &mut self,
        pairs: &[TokenPair],
        dropout_rate: f64,
        seed: u64,
        opt: &AdafactorConfig,
    ) -> Result<f64, TrainError> {
        let batch = Batch::from_pairs(pairs.iter().map(|p| (&p.inputs[..], &p.targets[..])));
        let next = self.step + 1;
        let dropout = (dropout_rate > 0.0).then(|| Dropout {
            rate: dropout_rate,
            stream: mix(seed, next),
        });
        let (loss, grads) = loss_and_grad(&self.params, &batch, dropout)?;
        self.optimizer.step(&mut self.params, &grads, opt)?;
        self.step = next;
        Ok(loss)
    }
}

/// Index of the best score; ties go to the earliest entry.
pub fn select_best_checkpoint(scores: &[(u64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &(step, score)) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let (bstep, bscore) = scores[b];
                if score > bscore || (score == bscore && step < bstep) {
                    best = Some(i);
                }
            }
        }
    }
    best
}
