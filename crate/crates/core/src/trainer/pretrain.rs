use super::stream::{EpochStream, Packer, TokenPair};
use super::{StepLog, TrainConfig, TrainError, TrainState};
use crate::corpus::CorpusDocument;
use crate::optim::AdafactorConfig;
use crate::rng::mix;
use crate::salient::{mask_salient, mine_sentences, MiningConfig, SalientTagger, TaggedSentence};
use crate::span_corruption::{corrupt, CorruptionConfig};
use crate::tokenizer::Vocab;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Random 15% token dropping.
    Sc,
    /// One named entity or date per sentence.
    Ssm,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Sc => "sc",
            Objective::Ssm => "ssm",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(Objective::Sc),
            "ssm" => Ok(Objective::Ssm),
            other => Err(format!("unknown objective `{other}` (expected sc or ssm)")),
        }
    }
}

/// Pre-training material prepared once per run.
#[derive(Debug, Clone, PartialEq)]
pub enum PretrainData {
    /// Token chunks of documents, corrupted afresh every epoch.
    Chunks { chunks: Vec<Vec<u32>>, mask_rate: f64 },
    /// Mined sentences, one span re-drawn every epoch.
    Sentences(Vec<TaggedSentence>),
}

impl PretrainData {
    pub fn objective(&self) -> Objective {
        match self {
            PretrainData::Chunks { .. } => Objective::Sc,
            PretrainData::Sentences(_) => Objective::Ssm,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PretrainData::Chunks { chunks, .. } => chunks.len(),
            PretrainData::Sentences(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tokenize documents into `chunk_len` pieces (span corruption) or mine
/// salient sentences (salient span masking).
pub fn prepare_pretraining(
    docs: &[CorpusDocument],
    vocab: &Vocab,
    objective: Objective,
    tagger: &dyn SalientTagger,
    chunk_len: usize,
    mask_rate: f64,
) -> Result<PretrainData, TrainError> {
    if chunk_len == 0 {
        return Err(TrainError::InvalidConfig("chunk length must be positive".into()));
    }
    let data = match objective {
        Objective::Sc => {
            CorruptionConfig { mask_rate, seed: 0 }.validate()?;
            let chunks = docs
                .iter()
                .flat_map(|d| {
                    let ids = vocab.encode(&d.text);
                    ids.chunks(chunk_len).map(<[u32]>::to_vec).collect::<Vec<_>>()
                })
                .collect();
            PretrainData::Chunks { chunks, mask_rate }
        }
        Objective::Ssm => {
            let (sentences, _) = mine_sentences(docs.iter().cloned(), tagger, MiningConfig::default())?;
            PretrainData::Sentences(sentences)
        }
    };
    if data.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    Ok(data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRun {
    pub log: Vec<StepLog>,
    /// Steps at which a checkpoint was emitted.
    pub checkpoints: Vec<u64>,
    /// Pairs skipped for exceeding the model's maximum length.
    pub skipped_pairs: usize,
}

fn pair_stream<'a>(
    data: &'a PretrainData,
    vocab: &'a Vocab,
    seed: u64,
    max_len: usize,
    skipped: &'a std::cell::Cell<usize>,
) -> Box<dyn Iterator<Item = Result<TokenPair, TrainError>> + 'a> {
    let fits = move |inputs: Vec<u32>, targets: Vec<u32>| {
        if inputs.len() <= max_len && targets.len() <= max_len {
            Some(TokenPair { inputs, targets })
        } else {
            skipped.set(skipped.get() + 1);
            None
        }
    };
    match data {
        PretrainData::Chunks { chunks, mask_rate } => {
            let cfg = CorruptionConfig {
                mask_rate: *mask_rate,
                seed,
            };
            Box::new(EpochStream::new(chunks, seed, move |chunk: &Vec<u32>, key| {
                let p = corrupt(vocab, chunk, &cfg, key)?;
                Ok(fits(p.inputs, p.targets))
            }))
        }
        PretrainData::Sentences(sentences) => Box::new(EpochStream::new(sentences, seed, move |s: &TaggedSentence, key| {
            let p = mask_salient(s, vocab, mix(seed, key))?;
            Ok(fits(p.inputs, p.targets))
        })),
    }
}

/// Pre-train `state` up to `config.total_steps`.
///
/// The batch sequence is a pure function of the data and `config.seed`, so a
/// state restored from a checkpoint at step k replays the schedule past its
/// first k batches and continues bit-identically. `on_checkpoint` sees the
/// state every `checkpoint_every` steps and at the final step.
pub fn pretrain(
    state: &mut TrainState,
    data: &PretrainData,
    vocab: &Vocab,
    config: &TrainConfig,
    opt: &AdafactorConfig,
    mut on_step: impl FnMut(&StepLog),
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<(), TrainError>,
) -> Result<PretrainRun, TrainError> {
    config.validate()?;
    opt.validate()?;
    if state.step > config.total_steps {
        return Err(TrainError::ResumePastEnd {
            step: state.step,
            total: config.total_steps,
        });
    }
    let skipped = std::cell::Cell::new(0);
    let max_len = state.params.config.max_len;
    let mut batches = Packer::new(pair_stream(data, vocab, config.seed, max_len, &skipped), config.batch_tokens);
    for _ in 0..state.step {
        batches.next().ok_or(TrainError::EmptyCorpus)??;
    }
    let task = data.objective().name();
    let mut run = PretrainRun {
        log: Vec::new(),
        checkpoints: Vec::new(),
        skipped_pairs: 0,
    };
    while state.step < config.total_steps {
        let batch = batches.next().ok_or(TrainError::EmptyCorpus)??;
        let loss = state.train_step(&batch, config.dropout_rate, config.seed, opt)?;
        let entry = StepLog {
            step: state.step,
            loss,
            task: task.to_string(),
        };
        on_step(&entry);
        run.log.push(entry);
        if config.is_checkpoint(state.step) {
            on_checkpoint(state)?;
            run.checkpoints.push(state.step);
        }
    }
    run.skipped_pairs = skipped.get();
    Ok(run)
}
