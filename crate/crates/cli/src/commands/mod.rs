mod audit;
mod data;
mod infer;
mod train;

use crate::args::{AuditCommand, Cli, Command, ModelArgs, Preset};
use crate::error::{config, CliError};
use crate::manifest::RunManifest;
use crate::settings::{input_path, Settings};
use anyhow::{Context, Result};
use cbqa_core::corpus::{load_corpus, load_qa_dataset};
use cbqa_core::model::{Checkpoint, ModelConfig, Params};
use cbqa_core::trainer::{TargetMode, TaskSpec, TrainState};
use cbqa_core::{CorpusDocument, Dataset, QaExample, Vocab};
use serde::Serialize;
use std::path::{Path, PathBuf};

pub struct Ctx {
    pub preset: Preset,
    pub threads: usize,
    pub config: Option<PathBuf>,
}

impl Ctx {
    fn settings(&self, subcommand: &str) -> Result<Settings, CliError> {
        Settings::load(self.config.as_deref(), subcommand)
    }

    fn preset_name(&self) -> &'static str {
        match self.preset {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    fn paper(&self) -> bool {
        self.preset == Preset::Paper
    }

    /// Desk or paper value for the active preset.
    fn pick<T>(&self, desk: T, paper: T) -> T {
        if self.paper() {
            paper
        } else {
            desk
        }
    }

    fn manifest(&self, subcommand: &str, seed: Option<u64>, config: impl Serialize) -> Result<RunManifest, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Run(e.into()))?;
        Ok(RunManifest::new(subcommand, self.preset_name(), seed, config))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = Ctx {
        preset: cli.preset,
        threads: usize::from(cli.threads),
        config: cli.config,
    };
    match cli.command {
        Command::BuildVocab(a) => data::build_vocab(&ctx, a),
        Command::Corrupt(a) => data::corrupt(&ctx, a),
        Command::MineSsm(a) => data::mine_ssm(&ctx, a),
        Command::Pretrain(a) => train::pretrain(&ctx, a),
        Command::Finetune(a) => train::finetune(&ctx, a),
        Command::CompareObjectives(a) => train::compare(&ctx, a),
        Command::Decode(a) => infer::decode(&ctx, a),
        Command::Evaluate(a) => infer::evaluate(&ctx, a),
        Command::Audit(AuditCommand::Sample(a)) => audit::sample(&ctx, a),
        Command::Audit(AuditCommand::Export(a)) => audit::export(&ctx, a),
        Command::Audit(AuditCommand::Import(a)) => audit::import(&ctx, a),
        Command::Serve(a) => audit::serve(&ctx, a),
    }
}

/// An input file: resolved against the data directory, and required to exist.
fn input(path: &Path) -> Result<PathBuf, CliError> {
    let resolved = input_path(path);
    if resolved.is_file() {
        Ok(resolved)
    } else {
        Err(config(format!("input file {} does not exist", path.display())))
    }
}

/// Record an input under the name it was given, hashing the resolved file.
fn record_input(manifest: &mut crate::manifest::RunManifest, given: &Path, resolved: &Path) -> Result<()> {
    manifest.input(resolved)?;
    if let Some(last) = manifest.inputs.last_mut() {
        last.path = given.display().to_string();
    }
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_docs(path: &Path) -> Result<Vec<CorpusDocument>> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_qa(path: &Path, dataset: Dataset) -> Result<Vec<QaExample>> {
    load_qa_dataset(path, dataset).with_context(|| format!("loading {dataset} dataset {}", path.display()))
}

fn parse_dataset(name: &str) -> Result<Dataset, CliError> {
    name.parse().map_err(config)
}

/// `NAME[:MODE]=PATH`.
#[derive(Debug, Clone, Serialize)]
struct TaskArg {
    task: Dataset,
    mode: TargetMode,
    path: PathBuf,
}

impl TaskArg {
    fn parse(s: &str) -> Result<Self, CliError> {
        let (head, path) = s
            .split_once('=')
            .ok_or_else(|| config(format!("task `{s}` must look like NAME[:MODE]=PATH")))?;
        let (name, mode) = head.split_once(':').unwrap_or((head, ""));
        let task = parse_dataset(name)?;
        let mode = match mode {
            "" | "first" => TargetMode::FirstAnswer,
            "all" => TargetMode::AllAnswers,
            "random" => TargetMode::RandomAnswer,
            other => return Err(config(format!("unknown target mode `{other}` (expected first, all or random)"))),
        };
        Ok(TaskArg { task, mode, path: PathBuf::from(path) })
    }

    fn spec(&self) -> TaskSpec {
        TaskSpec::new(self.task, self.mode)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Where training starts: a fresh model, another run's weights, or a resumed run.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "from", rename_all = "snake_case")]
enum ModelSource {
    Fresh { model: ModelConfig, init_seed: u64 },
    Init { path: PathBuf },
    Resume { path: PathBuf },
}

fn model_source(args: &ModelArgs, vocab: &Vocab, seed: u64) -> Result<(ModelSource, Option<PathBuf>), CliError> {
    if let Some(p) = &args.resume {
        return Ok((ModelSource::Resume { path: p.clone() }, Some(input(p)?)));
    }
    if let Some(p) = &args.init {
        return Ok((ModelSource::Init { path: p.clone() }, Some(input(p)?)));
    }
    let model = match &args.model_config {
        Some(p) => {
            let path = input(p)?;
            let text = std::fs::read_to_string(&path).map_err(|e| config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config(format!("model config {}: {e}", p.display())))?
        }
        None => ModelConfig::desk(vocab.len()),
    };
    check_model(&model, vocab)?;
    Ok((ModelSource::Fresh { model, init_seed: seed }, None))
}

fn check_model(model: &ModelConfig, vocab: &Vocab) -> Result<(), CliError> {
    model.validate().map_err(config)?;
    if model.vocab_size != vocab.len() {
        return Err(config(format!(
            "model vocab_size {} does not match the vocabulary's {} ids",
            model.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn load_state(source: &ModelSource, resolved: Option<&Path>, vocab: &Vocab) -> Result<TrainState> {
    let state = match (source, resolved) {
        (ModelSource::Fresh { model, init_seed }, _) => TrainState::new(Params::init(model, *init_seed)?)?,
        (ModelSource::Init { .. }, Some(p)) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            TrainState::new(ckpt.params)?
        }
        (ModelSource::Resume { .. }, Some(p)) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            TrainState::from_checkpoint(ckpt)?
        }
        _ => unreachable!("checkpoint sources carry a resolved path"),
    };
    same_vocab(&state.params, vocab)?;
    Ok(state)
}

fn same_vocab(params: &Params<f32>, vocab: &Vocab) -> Result<()> {
    anyhow::ensure!(
        params.config.vocab_size == vocab.len(),
        "checkpoint vocab_size {} does not match the vocabulary's {} ids",
        params.config.vocab_size,
        vocab.len()
    );
    Ok(())
}
