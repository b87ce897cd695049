use super::TrainError;
use crate::rng::{mix, stream_rng};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Encoded input and target ids of one training example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl TokenPair {
    /// Tokens this pair charges against a batch budget.
    pub fn tokens(&self) -> usize {
        self.inputs.len() + self.targets.len()
    }
}

/// Greedy token-budget packer over a fallible pair stream; see [`pack_batches`].
pub struct Packer<I> {
    pairs: I,
    budget: usize,
    held: Option<TokenPair>,
    pending_err: Option<TrainError>,
    done: bool,
}

impl<I: Iterator<Item = Result<TokenPair, TrainError>>> Packer<I> {
    pub fn new(pairs: I, budget: usize) -> Self {
        Packer {
            pairs,
            budget,
            held: None,
            pending_err: None,
            done: false,
        }
    }
}

/// Pack pairs into batches in stream order, closing a batch when the next
/// pair would push it over `budget` tokens. A pair larger than the budget
/// yields an error and ends the stream.
pub fn pack_batches<I: IntoIterator<Item = TokenPair>>(
    pairs: I,
    budget: usize,
) -> Packer<impl Iterator<Item = Result<TokenPair, TrainError>>> {
    Packer::new(pairs.into_iter().map(Ok), budget)
}

impl<I: Iterator<Item = Result<TokenPair, TrainError>>> Iterator for Packer<I> {
    type Item = Result<Vec<TokenPair>, TrainError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if let Some(e) = self.pending_err.take() {
            self.done = true;
            return Some(Err(e));
        }
        let mut batch: Vec<TokenPair> = Vec::new();
        let mut used = 0;
        loop {
            let pair = match self.held.take().map(Ok).or_else(|| self.pairs.next()) {
                Some(Ok(p)) => p,
                Some(Err(e)) if batch.is_empty() => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Err(e)) => {
                    self.pending_err = Some(e);
                    return Some(Ok(batch));
                }
                None => {
                    self.done = true;
                    return (!batch.is_empty()).then_some(Ok(batch));
                }
            };
            let n = pair.tokens();
            if n > self.budget && batch.is_empty() {
                self.done = true;
                return Some(Err(TrainError::Oversized {
                    tokens: n,
                    budget: self.budget,
                }));
            }
            if used + n > self.budget {
                self.held = Some(pair);
                return Some(Ok(batch));
            }
            used += n;
            batch.push(pair);
        }
    }
}

/// Endless pass over `items`, reshuffled each epoch from `(seed, epoch)`.
///
/// `make` turns an item into a pair given a per-item stream key that is fresh
/// each epoch; returning `Ok(None)` skips the item. An epoch that produces
/// nothing ends the stream with [`TrainError::EmptyCorpus`].
pub struct EpochStream<'a, T, F> {
    items: &'a [T],
    make: F,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
    produced: bool,
    done: bool,
}

impl<'a, T, F> EpochStream<'a, T, F>
where
    F: FnMut(&T, u64) -> Result<Option<TokenPair>, TrainError>,
{
    pub fn new(items: &'a [T], seed: u64, make: F) -> Self {
        let mut s = EpochStream {
            items,
            make,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
            produced: false,
            done: false,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = (0..self.items.len()).collect();
        self.order.shuffle(&mut stream_rng(self.seed, self.epoch));
        self.pos = 0;
        self.produced = false;
    }
}

impl<T, F> Iterator for EpochStream<'_, T, F>
where
    F: FnMut(&T, u64) -> Result<Option<TokenPair>, TrainError>,
{
    type Item = Result<TokenPair, TrainError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            if self.pos == self.order.len() {
                if !self.produced {
                    self.done = true;
                    return Some(Err(TrainError::EmptyCorpus));
                }
                self.epoch += 1;
                self.shuffle();
            }
            let idx = self.order[self.pos];
            self.pos += 1;
            match (self.make)(&self.items[idx], mix(self.epoch, idx as u64)) {
                Ok(Some(pair)) => {
                    self.produced = true;
                    return Some(Ok(pair));
                }
                Ok(None) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
    }
}
