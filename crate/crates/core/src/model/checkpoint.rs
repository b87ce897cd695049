//! Checkpoint files.
//!
//! Layout: the line `CBQA-CKPT v1`, one line of compact JSON describing the
//! config, step counters, metadata and tensor table, then every tensor's
//! values as little-endian `f32` in table order. Parameters come first;
//! optimizer accumulators follow as `opt.<param>.row`, `opt.<param>.col` or
//! `opt.<param>.v`.

use super::{ModelConfig, Params, TensorSet};
use crate::optim::{AdafactorState, Moment};
use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &str = "CBQA-CKPT v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic line)")]
    BadMagic,
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint tensor table does not match the config: {0}")]
    Layout(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: Params<f32>,
    pub optimizer: Option<AdafactorState<f32>>,
    /// Free-form provenance (run manifest digest, task, ...).
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
    optimizer_step: Option<u64>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn collect(ckpt: &Checkpoint) -> Vec<(String, ArrayD<f32>)> {
    let mut out: Vec<(String, ArrayD<f32>)> =
        ckpt.params.tensors().into_iter().map(|(n, t)| (n, t.to_owned())).collect();
    if let Some(opt) = &ckpt.optimizer {
        for (name, m) in opt.names.iter().zip(&opt.moments) {
            match m {
                Moment::Factored { row, col } => {
                    out.push((format!("opt.{name}.row"), row.clone().into_dyn()));
                    out.push((format!("opt.{name}.col"), col.clone().into_dyn()));
                }
                Moment::Full(v) => out.push((format!("opt.{name}.v"), v.clone())),
            }
        }
    }
    out
}

pub fn write_checkpoint(w: impl Write, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let tensors = collect(ckpt);
    let header = Header {
        config: ckpt.params.config.clone(),
        step: ckpt.step,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        meta: ckpt.meta.clone(),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let mut w = BufWriter::new(w);
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (_, t) in &tensors {
        for &x in t.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end_matches('\n') != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end_matches('\n'))?;
    let mut params = Params::<f32>::init(&header.config, 0)
        .map_err(|e| CheckpointError::Layout(e.to_string()))?;
    let mut loaded: Vec<(String, ArrayD<f32>)> = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let values: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| CheckpointError::Layout(e.to_string()))?;
        loaded.push((entry.name.clone(), arr));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Layout("trailing bytes after last tensor".into()));
    }
    let mut it = loaded.into_iter();
    for (name, mut dst) in params.tensors_mut() {
        let (src_name, src) = it
            .next()
            .ok_or_else(|| CheckpointError::Layout(format!("missing tensor {name}")))?;
        if src_name != name || src.shape() != dst.shape() {
            return Err(CheckpointError::Layout(format!(
                "expected {name} {:?}, found {src_name} {:?}",
                dst.shape(),
                src.shape()
            )));
        }
        dst.assign(&src);
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut state = AdafactorState::init(&params).map_err(|e| CheckpointError::Layout(e.to_string()))?;
            state.step = step;
            for (name, m) in state.names.iter().zip(state.moments.iter_mut()) {
                let mut take = |suffix: &str| -> Result<ArrayD<f32>, CheckpointError> {
                    let expected = format!("opt.{name}.{suffix}");
                    match it.next() {
                        Some((n, t)) if n == expected => Ok(t),
                        other => Err(CheckpointError::Layout(format!(
                            "expected {expected}, found {:?}",
                            other.map(|(n, _)| n)
                        ))),
                    }
                };
                match m {
                    Moment::Factored { row, col } => {
                        let r = take("row")?;
                        let c = take("col")?;
                        if r.len() != row.len() || c.len() != col.len() {
                            return Err(CheckpointError::Layout(format!("accumulator shape for {name}")));
                        }
                        *row = Array1::from_iter(r.iter().copied());
                        *col = Array1::from_iter(c.iter().copied());
                    }
                    Moment::Full(v) => {
                        let t = take("v")?;
                        if t.shape() != v.shape() {
                            return Err(CheckpointError::Layout(format!("accumulator shape for {name}")));
                        }
                        *v = t;
                    }
                }
            }
            Some(state)
        }
    };
    if let Some((n, _)) = it.next() {
        return Err(CheckpointError::Layout(format!("unexpected tensor {n}")));
    }
    Ok(Checkpoint {
        step: header.step,
        params,
        optimizer,
        meta: header.meta,
    })
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("tmp");
        write_checkpoint(std::fs::File::create(&tmp)?, self)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        read_checkpoint(std::fs::File::open(path)?)
    }
}
