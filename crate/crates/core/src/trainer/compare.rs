use super::finetune::{finetune, MixtureSpec, TaskOverrides};
use super::pretrain::{pretrain, Objective, PretrainData};
use super::{TrainConfig, TrainError, TrainState};
use crate::corpus::QaExample;
use crate::model::Params;
use crate::optim::AdafactorConfig;
use crate::tokenizer::Vocab;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub blocks: usize,
    /// Pre-training steps between probes.
    pub pretrain_block: u64,
    /// Fine-tuning steps per probe.
    pub finetune_steps: u64,
    /// Batch budget, dropout and seed of pre-training.
    pub pretrain: TrainConfig,
    /// Batch budget, dropout, seed and checkpoint cadence of every probe.
    pub probe: TrainConfig,
}

impl ComparisonConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.blocks == 0 || self.pretrain_block == 0 || self.finetune_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "blocks, pretrain_block and finetune_steps must be positive".into(),
            ));
        }
        self.pretrain.validate()?;
        self.probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub objective: Objective,
    pub pretrain_step: u64,
    /// Best held-out exact match over the probe's checkpoints.
    pub max_val_em: f64,
    /// Parameters at the end of the pre-training block.
    pub block_hash: String,
    /// Parameters the probe started from.
    pub probe_start_hash: String,
    /// Parameters after the probe's last step.
    pub probe_end_hash: String,
    /// Parameters the next pre-training block resumed from, if any.
    pub next_block_start_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// `objective,pretrain_step,max_val_em` with one row per probe.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("objective,pretrain_step,max_val_em\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.2}\n", r.objective, r.pretrain_step, r.max_val_em));
        }
        out
    }

    /// Every probe started from its block's parameters, moved away from them,
    /// and the next block resumed from the block's parameters, not the probe's.
    pub fn probes_isolated(&self) -> bool {
        self.rows.iter().all(|r| {
            r.probe_start_hash == r.block_hash
                && r.probe_end_hash != r.block_hash
                && r.next_block_start_hash.as_ref().is_none_or(|h| *h == r.block_hash)
        })
    }
}

/// Alternate pre-training blocks with forked fine-tuning probes for each
/// objective, starting every objective from `base`.
///
/// `probe_data[i]` holds the examples of `mixture.tasks[i]`. Probes get a
/// fresh optimizer and their weights are discarded after scoring.
#[allow(clippy::too_many_arguments)]
pub fn run_objective_comparison(
    base: &Params<f32>,
    objectives: &[PretrainData],
    vocab: &Vocab,
    mixture: &MixtureSpec,
    probe_data: &[Vec<QaExample>],
    config: &ComparisonConfig,
    opt: &AdafactorConfig,
    mut progress: impl FnMut(&ComparisonRow),
) -> Result<ComparisonTable, TrainError> {
    config.validate()?;
    let overrides = TaskOverrides::default();
    let mut rows: Vec<ComparisonRow> = Vec::with_capacity(objectives.len() * config.blocks);
    for data in objectives {
        let mut state = TrainState::new(base.clone())?;
        let first_row = rows.len();
        for b in 1..=config.blocks as u64 {
            let step = b * config.pretrain_block;
            let block_cfg = TrainConfig {
                total_steps: step,
                checkpoint_every: config.pretrain_block,
                ..config.pretrain.clone()
            };
            let start_hash = state.params.hash_hex();
            if rows.len() > first_row {
                if let Some(prev) = rows.last_mut() {
                    prev.next_block_start_hash = Some(start_hash);
                }
            }
            pretrain(&mut state, data, vocab, &block_cfg, opt, |_| {}, |_| Ok(()))?;
            let block_hash = state.params.hash_hex();

            let mut probe = TrainState::new(state.params.clone())?;
            let probe_start_hash = probe.params.hash_hex();
            let probe_cfg = TrainConfig {
                total_steps: config.finetune_steps,
                ..config.probe.clone()
            };
            let run = finetune(&mut probe, mixture, probe_data, vocab, &probe_cfg, &overrides, opt, |_| {}, |_, _| Ok(()))?;
            let row = ComparisonRow {
                objective: data.objective(),
                pretrain_step: step,
                max_val_em: run.max_score(),
                block_hash,
                probe_start_hash,
                probe_end_hash: probe.params.hash_hex(),
                next_block_start_hash: None,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(ComparisonTable { rows })
}
