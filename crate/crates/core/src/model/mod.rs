//! A small encoder-decoder transformer with hand-written backward passes.
//!
//! Architecture: shared input/output embedding, pre-norm RMSNorm residual
//! blocks, multi-head attention with bucketed relative-position biases (one
//! table per stack, shared by its layers), GELU feed-forward blocks, and a
//! decoder with causal self-attention plus cross-attention. Dropout, when on,
//! is applied to attention probabilities and to the feed-forward activation.
//!
//! Everything is generic over [`Real`] so gradient checks can run in `f64`
//! while training runs in `f32`.

mod checkpoint;
mod layers;
mod transformer;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use layers::relative_position_bucket;
pub use transformer::{
    attention_maps, decoder_logits, greedy_decode, loss, loss_and_grad, Dropout,
};

use crate::rng::stream_rng;
use crate::tokenizer::PAD_ID;
use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} is out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("batch has no target tokens")]
    EmptyBatch,
    #[error("non-finite loss; first offending tensor: {tensor}")]
    NonFinite { tensor: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub rel_pos_buckets: usize,
}

impl ModelConfig {
    /// The default desk-scale architecture.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_len: 128,
            dropout_rate: 0.1,
            rel_pos_buckets: 32,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("d_model, n_heads, d_ff and max_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("at least one encoder and one decoder layer required".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.rel_pos_buckets < 4 {
            return bad("rel_pos_buckets must be at least 4".into());
        }
        Ok(())
    }
}

/// Query/key/value/output projections, each `[d_model, d_model]` (input-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    pub o: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub wi: Array2<F>,
    pub wo: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<F> {
    pub attn_norm: Array1<F>,
    pub attn: Attention<F>,
    pub ff_norm: Array1<F>,
    pub ff: FeedForward<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<F> {
    pub self_norm: Array1<F>,
    pub self_attn: Attention<F>,
    pub cross_norm: Array1<F>,
    pub cross_attn: Attention<F>,
    pub ff_norm: Array1<F>,
    pub ff: FeedForward<F>,
}

/// All weights of the model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    /// `[vocab_size, d_model]`, shared by both embeddings and the output layer.
    pub embed: Array2<F>,
    /// `[rel_pos_buckets, n_heads]`
    pub enc_rel_bias: Array2<F>,
    pub dec_rel_bias: Array2<F>,
    pub encoder: Vec<EncoderLayer<F>>,
    pub enc_final_norm: Array1<F>,
    pub decoder: Vec<DecoderLayer<F>>,
    pub dec_final_norm: Array1<F>,
}

macro_rules! visit_tensors {
    ($p:expr, $f:ident, $view:ident, $iter:ident) => {{
        $f("embed".to_string(), $p.embed.$view().into_dyn());
        $f("encoder.rel_bias".to_string(), $p.enc_rel_bias.$view().into_dyn());
        $f("decoder.rel_bias".to_string(), $p.dec_rel_bias.$view().into_dyn());
        for (i, l) in $p.encoder.$iter().enumerate() {
            $f(format!("encoder.{i}.attn_norm"), l.attn_norm.$view().into_dyn());
            $f(format!("encoder.{i}.attn.q"), l.attn.q.$view().into_dyn());
            $f(format!("encoder.{i}.attn.k"), l.attn.k.$view().into_dyn());
            $f(format!("encoder.{i}.attn.v"), l.attn.v.$view().into_dyn());
            $f(format!("encoder.{i}.attn.o"), l.attn.o.$view().into_dyn());
            $f(format!("encoder.{i}.ff_norm"), l.ff_norm.$view().into_dyn());
            $f(format!("encoder.{i}.ff.wi"), l.ff.wi.$view().into_dyn());
            $f(format!("encoder.{i}.ff.wo"), l.ff.wo.$view().into_dyn());
        }
        $f("encoder.final_norm".to_string(), $p.enc_final_norm.$view().into_dyn());
        for (i, l) in $p.decoder.$iter().enumerate() {
            $f(format!("decoder.{i}.self_norm"), l.self_norm.$view().into_dyn());
            $f(format!("decoder.{i}.self_attn.q"), l.self_attn.q.$view().into_dyn());
            $f(format!("decoder.{i}.self_attn.k"), l.self_attn.k.$view().into_dyn());
            $f(format!("decoder.{i}.self_attn.v"), l.self_attn.v.$view().into_dyn());
            $f(format!("decoder.{i}.self_attn.o"), l.self_attn.o.$view().into_dyn());
            $f(format!("decoder.{i}.cross_norm"), l.cross_norm.$view().into_dyn());
            $f(format!("decoder.{i}.cross_attn.q"), l.cross_attn.q.$view().into_dyn());
            $f(format!("decoder.{i}.cross_attn.k"), l.cross_attn.k.$view().into_dyn());
            $f(format!("decoder.{i}.cross_attn.v"), l.cross_attn.v.$view().into_dyn());
            $f(format!("decoder.{i}.cross_attn.o"), l.cross_attn.o.$view().into_dyn());
            $f(format!("decoder.{i}.ff_norm"), l.ff_norm.$view().into_dyn());
            $f(format!("decoder.{i}.ff.wi"), l.ff.wi.$view().into_dyn());
            $f(format!("decoder.{i}.ff.wo"), l.ff.wo.$view().into_dyn());
        }
        $f("decoder.final_norm".to_string(), $p.dec_final_norm.$view().into_dyn());
    }};
}

/// A named, ordered collection of tensors (parameters, gradients, ...).
pub trait TensorSet<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)>;
}

impl<F: Real> TensorSet<F> for Params<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        let mut push = |name, view| out.push((name, view));
        visit_tensors!(self, push, view, iter);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        let mut push = |name, view| out.push((name, view));
        visit_tensors!(self, push, view_mut, iter_mut);
        out
    }
}

impl<F: Real> TensorSet<F> for Vec<(String, ndarray::ArrayD<F>)> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        self.iter().map(|(n, a)| (n.clone(), a.view())).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        self.iter_mut().map(|(n, a)| (n.clone(), a.view_mut())).collect()
    }
}

struct Init<'r, R: rand::Rng> {
    rng: &'r mut R,
}

impl<R: rand::Rng> Init<'_, R> {
    fn normal<F: Real>(&mut self, shape: (usize, usize), std: f64) -> Array2<F> {
        Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(self.rng);
            cst(z * std)
        })
    }

    fn projection<F: Real>(&mut self, fan_in: usize, fan_out: usize) -> Array2<F> {
        self.normal((fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())
    }

    fn attention<F: Real>(&mut self, d: usize) -> Attention<F> {
        Attention {
            q: self.projection(d, d),
            k: self.projection(d, d),
            v: self.projection(d, d),
            o: self.projection(d, d),
        }
    }

    fn ff<F: Real>(&mut self, d: usize, d_ff: usize) -> FeedForward<F> {
        FeedForward {
            wi: self.projection(d, d_ff),
            wo: self.projection(d_ff, d),
        }
    }
}

impl<F: Real> Params<F> {
    /// Deterministic initialization under `(config, seed)`.
    ///
    /// Projections are N(0, 1/fan_in); the shared embedding is N(0, 1/(4 d_model)),
    /// which keeps untrained logits near uniform; norm gains start at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0x494e_4954);
        let mut init = Init { rng: &mut rng };
        let d = config.d_model;
        let ones = || Array1::from_elem(d, F::one());
        let embed = init.normal((config.vocab_size, d), 0.5 / (d as f64).sqrt());
        let bias_std = 1.0 / (d as f64).sqrt();
        let enc_rel_bias = init.normal((config.rel_pos_buckets, config.n_heads), bias_std);
        let dec_rel_bias = init.normal((config.rel_pos_buckets, config.n_heads), bias_std);
        let encoder = (0..config.n_enc_layers)
            .map(|_| EncoderLayer {
                attn_norm: ones(),
                attn: init.attention(d),
                ff_norm: ones(),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        let decoder = (0..config.n_dec_layers)
            .map(|_| DecoderLayer {
                self_norm: ones(),
                self_attn: init.attention(d),
                cross_norm: ones(),
                cross_attn: init.attention(d),
                ff_norm: ones(),
                ff: init.ff(d, config.d_ff),
            })
            .collect();
        Ok(Params {
            config: config.clone(),
            embed,
            enc_rel_bias,
            dec_rel_bias,
            encoder,
            enc_final_norm: ones(),
            decoder,
            dec_final_norm: ones(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    pub fn add_assign(&mut self, other: &Self) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    /// Element-wise conversion to another float type.
    pub fn cast<G: Real>(&self) -> Params<G> {
        let c1 = |a: &Array1<F>| a.mapv(|x| cst::<G>(x.to_f64().unwrap_or(f64::NAN)));
        let c2 = |a: &Array2<F>| a.mapv(|x| cst::<G>(x.to_f64().unwrap_or(f64::NAN)));
        let attn = |a: &Attention<F>| Attention { q: c2(&a.q), k: c2(&a.k), v: c2(&a.v), o: c2(&a.o) };
        let ff = |f: &FeedForward<F>| FeedForward { wi: c2(&f.wi), wo: c2(&f.wo) };
        Params {
            config: self.config.clone(),
            embed: c2(&self.embed),
            enc_rel_bias: c2(&self.enc_rel_bias),
            dec_rel_bias: c2(&self.dec_rel_bias),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayer {
                    attn_norm: c1(&l.attn_norm),
                    attn: attn(&l.attn),
                    ff_norm: c1(&l.ff_norm),
                    ff: ff(&l.ff),
                })
                .collect(),
            enc_final_norm: c1(&self.enc_final_norm),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayer {
                    self_norm: c1(&l.self_norm),
                    self_attn: attn(&l.self_attn),
                    cross_norm: c1(&l.cross_norm),
                    cross_attn: attn(&l.cross_attn),
                    ff_norm: c1(&l.ff_norm),
                    ff: ff(&l.ff),
                })
                .collect(),
            dec_final_norm: c1(&self.dec_final_norm),
        }
    }

    /// SHA-256 over tensor names and their values rounded to little-endian f32.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            for &x in t.iter() {
                h.update(x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex_digest(h)
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Padded token matrices plus the true lengths of each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub input_lens: Vec<usize>,
    pub targets: Vec<Vec<u32>>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    /// Pad `(inputs, targets)` pairs to the longest row with the pad id.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [u32], &'a [u32])>) -> Self {
        let (inputs, targets): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(i, t)| (i.to_vec(), t.to_vec())).unzip();
        let input_lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let target_lens: Vec<usize> = targets.iter().map(Vec::len).collect();
        let pad = |rows: Vec<Vec<u32>>, width: usize| {
            rows.into_iter()
                .map(|mut r| {
                    r.resize(width, PAD_ID);
                    r
                })
                .collect()
        };
        let wi = input_lens.iter().copied().max().unwrap_or(0);
        let wt = target_lens.iter().copied().max().unwrap_or(0);
        Batch {
            inputs: pad(inputs, wi),
            input_lens,
            targets: pad(targets, wt),
            target_lens,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn example(&self, i: usize) -> (&[u32], &[u32]) {
        (&self.inputs[i][..self.input_lens[i]], &self.targets[i][..self.target_lens[i]])
    }

    pub fn target_tokens(&self) -> usize {
        self.target_lens.iter().sum()
    }

    /// Widen every row with extra pad columns; lengths are unchanged.
    pub fn with_extra_padding(&self, extra_inputs: usize, extra_targets: usize) -> Self {
        let mut b = self.clone();
        for r in &mut b.inputs {
            r.extend(std::iter::repeat_n(PAD_ID, extra_inputs));
        }
        for r in &mut b.targets {
            r.extend(std::iter::repeat_n(PAD_ID, extra_targets));
        }
        b
    }
}
