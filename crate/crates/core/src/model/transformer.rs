use super::layers::{
    attention, attention_backward, bucket_matrix, feed_forward, feed_forward_backward, rms_norm,
    rms_norm_backward, AttnCache, DropSite, FfCache, NormCache, PositionBias,
};
use super::{cst, Batch, ModelError, Params, Real};
use crate::rng::mix;
use crate::tokenizer::{EOS_ID, PAD_ID};
use ndarray::{Array2, Axis};

/// Dropout settings for one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
    /// Masks for example `i`, layer `l` and site `s` derive from `(stream, i, l, s)`.
    pub stream: u64,
}

#[derive(Clone, Copy)]
struct DropCtx {
    rate: f64,
    seed: u64,
}

impl DropCtx {
    fn site(self, site: u64) -> DropSite {
        DropSite {
            rate: self.rate,
            seed: self.seed,
            site,
        }
    }
}

fn drop_site(ctx: Option<DropCtx>, site: u64) -> Option<DropSite> {
    ctx.map(|c| c.site(site))
}

struct EncLayerCache<F> {
    n1: NormCache<F>,
    attn: AttnCache<F>,
    n2: NormCache<F>,
    ff: FfCache<F>,
}

struct EncCache<F> {
    buckets: Array2<usize>,
    layers: Vec<EncLayerCache<F>>,
    final_norm: NormCache<F>,
}

struct DecLayerCache<F> {
    n1: NormCache<F>,
    self_attn: AttnCache<F>,
    n2: NormCache<F>,
    cross: AttnCache<F>,
    n3: NormCache<F>,
    ff: FfCache<F>,
}

struct DecCache<F> {
    buckets: Array2<usize>,
    layers: Vec<DecLayerCache<F>>,
    final_norm: NormCache<F>,
}

fn embed<F: Real>(p: &Params<F>, tokens: &[u32]) -> Array2<F> {
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    p.embed.select(Axis(0), &idx)
}

fn embed_backward<F: Real>(grad: &mut Params<F>, tokens: &[u32], dx: &Array2<F>) {
    for (&t, row) in tokens.iter().zip(dx.rows()) {
        let mut g = grad.embed.row_mut(t as usize);
        g += &row;
    }
}

fn encode<F: Real>(p: &Params<F>, tokens: &[u32], drop: Option<DropCtx>) -> (Array2<F>, EncCache<F>) {
    let cfg = &p.config;
    let n = tokens.len();
    let buckets = bucket_matrix(n, n, true, cfg.rel_pos_buckets);
    let bias = PositionBias {
        table: &p.enc_rel_bias,
        buckets: &buckets,
    };
    let mut x = embed(p, tokens);
    let mut layers = Vec::with_capacity(p.encoder.len());
    for (l, layer) in p.encoder.iter().enumerate() {
        let site = 10 * l as u64;
        let (h, n1) = rms_norm(&x, &layer.attn_norm);
        let (a, attn) = attention(&h, &h, &layer.attn, cfg.n_heads, Some(&bias), false, drop_site(drop, site + 1));
        x += &a;
        let (h, n2) = rms_norm(&x, &layer.ff_norm);
        let (f, ff) = feed_forward(&h, &layer.ff, drop_site(drop, site + 2));
        x += &f;
        layers.push(EncLayerCache { n1, attn, n2, ff });
    }
    let (out, final_norm) = rms_norm(&x, &p.enc_final_norm);
    (out, EncCache { buckets, layers, final_norm })
}

fn encode_backward<F: Real>(p: &Params<F>, tokens: &[u32], dout: &Array2<F>, cache: &EncCache<F>, grad: &mut Params<F>) {
    let mut dx = rms_norm_backward(dout, &p.enc_final_norm, &cache.final_norm, &mut grad.enc_final_norm);
    for (l, c) in cache.layers.iter().enumerate().rev() {
        let layer = &p.encoder[l];
        let g = &mut grad.encoder[l];
        let dh = feed_forward_backward(&dx, &layer.ff, &c.ff, &mut g.ff);
        dx += &rms_norm_backward(&dh, &layer.ff_norm, &c.n2, &mut g.ff_norm);
        let (dq, dkv) = attention_backward(&dx, &layer.attn, &c.attn, Some(&cache.buckets), &mut g.attn, Some(&mut grad.enc_rel_bias));
        let dh = dq + dkv;
        dx += &rms_norm_backward(&dh, &layer.attn_norm, &c.n1, &mut g.attn_norm);
    }
    embed_backward(grad, tokens, &dx);
}

/// Teacher-forced decoder inputs: a pad start token, then the targets shifted right.
fn decoder_inputs(targets: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(targets.len());
    if !targets.is_empty() {
        v.push(PAD_ID);
        v.extend_from_slice(&targets[..targets.len() - 1]);
    }
    v
}

fn decode<F: Real>(
    p: &Params<F>,
    dec_in: &[u32],
    memory: &Array2<F>,
    drop: Option<DropCtx>,
) -> (Array2<F>, DecCache<F>) {
    let cfg = &p.config;
    let m = dec_in.len();
    let buckets = bucket_matrix(m, m, false, cfg.rel_pos_buckets);
    let bias = PositionBias {
        table: &p.dec_rel_bias,
        buckets: &buckets,
    };
    let mut y = embed(p, dec_in);
    let mut layers = Vec::with_capacity(p.decoder.len());
    for (l, layer) in p.decoder.iter().enumerate() {
        let site = 1000 + 10 * l as u64;
        let (h, n1) = rms_norm(&y, &layer.self_norm);
        let (a, self_attn) =
            attention(&h, &h, &layer.self_attn, cfg.n_heads, Some(&bias), true, drop_site(drop, site + 1));
        y += &a;
        let (h, n2) = rms_norm(&y, &layer.cross_norm);
        let (a, cross) = attention(&h, memory, &layer.cross_attn, cfg.n_heads, None, false, drop_site(drop, site + 2));
        y += &a;
        let (h, n3) = rms_norm(&y, &layer.ff_norm);
        let (f, ff) = feed_forward(&h, &layer.ff, drop_site(drop, site + 3));
        y += &f;
        layers.push(DecLayerCache { n1, self_attn, n2, cross, n3, ff });
    }
    let (out, final_norm) = rms_norm(&y, &p.dec_final_norm);
    (out, DecCache { buckets, layers, final_norm })
}

/// Returns the gradient with respect to the encoder output.
fn decode_backward<F: Real>(
    p: &Params<F>,
    dec_in: &[u32],
    dout: &Array2<F>,
    cache: &DecCache<F>,
    memory_rows: usize,
    grad: &mut Params<F>,
) -> Array2<F> {
    let mut dmem = Array2::zeros((memory_rows, p.config.d_model));
    let mut dy = rms_norm_backward(dout, &p.dec_final_norm, &cache.final_norm, &mut grad.dec_final_norm);
    for (l, c) in cache.layers.iter().enumerate().rev() {
        let layer = &p.decoder[l];
        let g = &mut grad.decoder[l];
        let dh = feed_forward_backward(&dy, &layer.ff, &c.ff, &mut g.ff);
        dy += &rms_norm_backward(&dh, &layer.ff_norm, &c.n3, &mut g.ff_norm);
        let (dq, dkv) = attention_backward(&dy, &layer.cross_attn, &c.cross, None, &mut g.cross_attn, None);
        dmem += &dkv;
        dy += &rms_norm_backward(&dq, &layer.cross_norm, &c.n2, &mut g.cross_norm);
        let (dq, dkv) = attention_backward(
            &dy,
            &layer.self_attn,
            &c.self_attn,
            Some(&cache.buckets),
            &mut g.self_attn,
            Some(&mut grad.dec_rel_bias),
        );
        let dh = dq + dkv;
        dy += &rms_norm_backward(&dh, &layer.self_norm, &c.n1, &mut g.self_norm);
    }
    embed_backward(grad, dec_in, &dy);
    dmem
}

fn check_tokens(p: &Params<impl Real>, tokens: &[u32]) -> Result<(), ModelError> {
    let cfg = &p.config;
    if tokens.len() > cfg.max_len {
        return Err(ModelError::TooLong {
            len: tokens.len(),
            max_len: cfg.max_len,
        });
    }
    match tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        Some(&id) => Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        }),
        None => Ok(()),
    }
}

fn check_batch<F: Real>(p: &Params<F>, batch: &Batch) -> Result<usize, ModelError> {
    for i in 0..batch.len() {
        let (inp, tgt) = batch.example(i);
        check_tokens(p, inp)?;
        check_tokens(p, tgt)?;
    }
    match batch.target_tokens() {
        0 => Err(ModelError::EmptyBatch),
        n => Ok(n),
    }
}

/// Summed cross-entropy of one example; fills `dlogits` with its gradient when asked.
fn cross_entropy<F: Real>(logits: &Array2<F>, targets: &[u32], dlogits: Option<&mut Array2<F>>) -> f64 {
    let mut total = 0.0;
    let mut probs = dlogits;
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let sum = row.iter().fold(F::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + sum.ln();
        total += (lse - row[t as usize]).to_f64().unwrap_or(f64::NAN);
        if let Some(d) = probs.as_deref_mut() {
            let mut drow = d.row_mut(i);
            drow.zip_mut_with(&row, |g, &v| *g = (v - lse).exp());
            drow[t as usize] -= F::one();
        }
    }
    total
}

fn example_loss<F: Real>(
    p: &Params<F>,
    inputs: &[u32],
    targets: &[u32],
    drop: Option<DropCtx>,
    grad: Option<&mut Params<F>>,
) -> f64 {
    let (memory, enc_cache) = encode(p, inputs, drop);
    let dec_in = decoder_inputs(targets);
    let (hidden, dec_cache) = decode(p, &dec_in, &memory, drop);
    let logits = hidden.dot(&p.embed.t());
    let Some(grad) = grad else {
        return cross_entropy(&logits, targets, None);
    };
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let loss = cross_entropy(&logits, targets, Some(&mut dlogits));
    grad.embed += &dlogits.t().dot(&hidden);
    let dhidden = dlogits.dot(&p.embed);
    let dmem = decode_backward(p, &dec_in, &dhidden, &dec_cache, memory.nrows(), grad);
    encode_backward(p, inputs, &dmem, &enc_cache, grad);
    loss
}

fn example_drop(dropout: Option<Dropout>, example: usize) -> Option<DropCtx> {
    dropout.filter(|d| d.rate > 0.0).map(|d| DropCtx {
        rate: d.rate,
        seed: mix(d.stream, example as u64),
    })
}

/// Mean token cross-entropy over all non-pad target positions, and its exact gradient.
///
/// Examples are processed in batch order and gradients summed in that order,
/// so results are bitwise reproducible. With `dropout` set to `None` the map
/// is deterministic in `(params, batch)`.
pub fn loss_and_grad<F: Real>(
    params: &Params<F>,
    batch: &Batch,
    dropout: Option<Dropout>,
) -> Result<(f64, Params<F>), ModelError> {
    let n_tokens = check_batch(params, batch)?;
    let mut grad = params.zeros_like();
    let mut total = 0.0;
    for i in 0..batch.len() {
        let (inputs, targets) = batch.example(i);
        if targets.is_empty() {
            continue;
        }
        total += example_loss(params, inputs, targets, example_drop(dropout, i), Some(&mut grad));
    }
    let scale = cst::<F>(1.0 / n_tokens as f64);
    for (_, mut t) in super::TensorSet::tensors_mut(&mut grad) {
        t *= scale;
    }
    let loss = total / n_tokens as f64;
    if !loss.is_finite() {
        let tensor = params
            .first_non_finite()
            .or_else(|| grad.first_non_finite())
            .unwrap_or_else(|| "logits".to_string());
        return Err(ModelError::NonFinite { tensor });
    }
    Ok((loss, grad))
}

/// Forward-only version of [`loss_and_grad`] without dropout.
pub fn loss<F: Real>(params: &Params<F>, batch: &Batch) -> Result<f64, ModelError> {
    let n_tokens = check_batch(params, batch)?;
    let total: f64 = (0..batch.len())
        .map(|i| batch.example(i))
        .filter(|(_, t)| !t.is_empty())
        .map(|(inp, tgt)| example_loss(params, inp, tgt, None, None))
        .sum();
    Ok(total / n_tokens as f64)
}

/// Teacher-forced logits `[targets.len(), vocab_size]` for one example.
pub fn decoder_logits<F: Real>(params: &Params<F>, inputs: &[u32], targets: &[u32]) -> Result<Array2<F>, ModelError> {
    check_tokens(params, inputs)?;
    check_tokens(params, targets)?;
    let (memory, _) = encode(params, inputs, None);
    let (hidden, _) = decode(params, &decoder_inputs(targets), &memory, None);
    Ok(hidden.dot(&params.embed.t()))
}

/// Every attention probability matrix (all stacks, layers and heads) for one example.
pub fn attention_maps<F: Real>(params: &Params<F>, inputs: &[u32], targets: &[u32]) -> Result<Vec<Array2<F>>, ModelError> {
    check_tokens(params, inputs)?;
    check_tokens(params, targets)?;
    let (memory, enc) = encode(params, inputs, None);
    let (_, dec) = decode(params, &decoder_inputs(targets), &memory, None);
    let mut maps = Vec::new();
    for c in &enc.layers {
        maps.extend(c.attn.probs().iter().cloned());
    }
    for c in &dec.layers {
        maps.extend(c.self_attn.probs().iter().cloned());
        maps.extend(c.cross.probs().iter().cloned());
    }
    Ok(maps)
}

/// Emit the argmax token (lowest id on ties) until eos or `max_len` tokens.
///
/// The returned tokens include the final eos when one was produced.
pub fn greedy_decode<F: Real>(params: &Params<F>, inputs: &[u32], max_len: usize) -> Result<Vec<u32>, ModelError> {
    check_tokens(params, inputs)?;
    let (memory, _) = encode(params, inputs, None);
    let mut out: Vec<u32> = Vec::new();
    let mut dec_in = vec![PAD_ID];
    while out.len() < max_len {
        let (hidden, _) = decode(params, &dec_in, &memory, None);
        let last = hidden.row(hidden.nrows() - 1);
        let logits = params.embed.dot(&last);
        let mut best = 0usize;
        for (id, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = id;
            }
        }
        let tok = best as u32;
        out.push(tok);
        if tok == EOS_ID {
            break;
        }
        dec_in.push(tok);
    }
    Ok(out)
}
