//! Random span corruption.
//!
//! Each token is dropped independently with probability `mask_rate`; every
//! maximal run of dropped tokens is replaced in the inputs by one sentinel and
//! reproduced in the targets after the same sentinel. Targets end with a closing
//! sentinel and eos, so `n` spans use `n + 1` sentinels.

use crate::rng::stream_rng;
use crate::tokenizer::{TokenizerError, Vocab, EOS_ID, PAD_ID};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CorruptionError {
    #[error("mask rate {0} is outside (0, 1)")]
    InvalidMaskRate(f64),
    #[error("cannot corrupt an empty sequence")]
    EmptyInput,
    #[error("token {id} at position {position} is a pad, eos or sentinel id")]
    ReservedToken { id: u32, position: usize },
    #[error("{spans} spans need {needed} sentinels but only {available} are reserved")]
    SentinelCapacity {
        spans: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed pair: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            mask_rate: 0.15,
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<(), CorruptionError> {
        if self.mask_rate > 0.0 && self.mask_rate < 1.0 {
            Ok(())
        } else {
            Err(CorruptionError::InvalidMaskRate(self.mask_rate))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedPair {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl CorruptedPair {
    pub fn sentinel_count_in_inputs(&self, vocab: &Vocab) -> usize {
        self.inputs.iter().filter(|&&t| vocab.sentinel_index(t).is_some()).count()
    }
}

/// One emitted pre-training pair in the JSONL interchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub origin: String,
}

impl PairRecord {
    pub fn new(pair: CorruptedPair, origin: impl Into<String>) -> Self {
        PairRecord {
            inputs: pair.inputs,
            targets: pair.targets,
            origin: origin.into(),
        }
    }
}

/// Draw the drop mask for `tokens.len()` positions from the `(seed, stream_index)` stream.
///
/// If nothing was dropped one position is forced, chosen uniformly.
pub fn drop_mask(len: usize, config: &CorruptionConfig, stream_index: u64) -> Vec<bool> {
    let mut rng = stream_rng(config.seed, stream_index);
    let mut mask: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < config.mask_rate).collect();
    if len > 0 && !mask.contains(&true) {
        mask[rng.random_range(0..len)] = true;
    }
    mask
}

pub fn corrupt(
    vocab: &Vocab,
    tokens: &[u32],
    config: &CorruptionConfig,
    stream_index: u64,
) -> Result<CorruptedPair, CorruptionError> {
    config.validate()?;
    let mask = drop_mask(tokens.len(), config, stream_index);
    corrupt_with_mask(vocab, tokens, &mask)
}

/// Apply an explicit drop mask; `mask[i]` drops `tokens[i]`.
pub fn corrupt_with_mask(
    vocab: &Vocab,
    tokens: &[u32],
    mask: &[bool],
) -> Result<CorruptedPair, CorruptionError> {
    if tokens.is_empty() {
        return Err(CorruptionError::EmptyInput);
    }
    assert_eq!(tokens.len(), mask.len(), "mask length must match tokens");
    if let Some((position, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t == PAD_ID || t == EOS_ID || vocab.sentinel_index(t).is_some() || t as usize >= vocab.len())
    {
        return Err(CorruptionError::ReservedToken { id, position });
    }
    let spans = mask
        .iter()
        .enumerate()
        .filter(|&(i, &m)| m && (i == 0 || !mask[i - 1]))
        .count();
    if spans == 0 {
        return Err(CorruptionError::Malformed("no token dropped".into()));
    }
    if spans + 1 > vocab.sentinel_count() {
        return Err(CorruptionError::SentinelCapacity {
            spans,
            needed: spans + 1,
            available: vocab.sentinel_count(),
        });
    }
    let mut inputs = Vec::with_capacity(tokens.len());
    let mut targets = Vec::with_capacity(tokens.len() / 4 + 2 * spans + 2);
    let mut next = 0;
    for (i, (&tok, &dropped)) in tokens.iter().zip(mask).enumerate() {
        if dropped {
            if i == 0 || !mask[i - 1] {
                let s = vocab.sentinel_id(next)?;
                inputs.push(s);
                targets.push(s);
                next += 1;
            }
            targets.push(tok);
        } else {
            inputs.push(tok);
        }
    }
    targets.push(vocab.sentinel_id(next)?);
    targets.push(EOS_ID);
    Ok(CorruptedPair { inputs, targets })
}

/// Splice every target span back over its sentinel.
pub fn decorrupt(vocab: &Vocab, pair: &CorruptedPair) -> Result<Vec<u32>, CorruptionError> {
    let malformed = |m: &str| CorruptionError::Malformed(m.to_string());
    let input_sentinels: Vec<usize> =
        pair.inputs.iter().filter_map(|&t| vocab.sentinel_index(t)).collect();
    if input_sentinels.is_empty() {
        return Err(malformed("inputs contain no sentinel"));
    }
    if input_sentinels.iter().enumerate().any(|(i, &k)| i != k) {
        return Err(malformed("input sentinels are not 0, 1, 2, ... in order"));
    }
    let body = pair
        .targets
        .strip_suffix(&[EOS_ID])
        .ok_or_else(|| malformed("targets do not end with eos"))?;
    let mut spans: Vec<&[u32]> = Vec::with_capacity(input_sentinels.len());
    let mut expected = 0;
    let mut start = None;
    for (i, &t) in body.iter().enumerate() {
        match vocab.sentinel_index(t) {
            Some(k) if k == expected => {
                if let Some(s) = start {
                    spans.push(&body[s..i]);
                }
                start = Some(i + 1);
                expected += 1;
            }
            Some(_) => return Err(malformed("target sentinel out of order")),
            None if start.is_none() => return Err(malformed("targets must start with a sentinel")),
            None => {}
        }
    }
    if start != Some(body.len()) || spans.len() != input_sentinels.len() {
        return Err(malformed("sentinel order mismatch between inputs and targets"));
    }
    let mut out = Vec::with_capacity(pair.inputs.len() + body.len());
    for &t in &pair.inputs {
        match vocab.sentinel_index(t) {
            Some(k) => out.extend_from_slice(spans[k]),
            None => out.push(t),
        }
    }
    Ok(out)
}
