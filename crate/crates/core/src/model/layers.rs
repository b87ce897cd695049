//! Per-sequence building blocks with explicit backward passes.
//!
//! Sequences are processed unpadded, one at a time, so no attention masks for
//! padding are needed. Each `forward` returns a cache consumed by `backward`.

use super::{cst, Attention, FeedForward, Real};
use crate::rng::stream_rng;
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

const NORM_EPS: f64 = 1e-6;
const MAX_DISTANCE: usize = 128;

/// Map `key_pos - query_pos` to a bias bucket.
///
/// Half of the buckets are exact offsets, the rest grow logarithmically up to
/// a fixed maximum distance. Bidirectional tables split the buckets between
/// the two directions; unidirectional ones only see the past.
pub fn relative_position_bucket(relative: i64, bidirectional: bool, num_buckets: usize) -> usize {
    let mut nb = num_buckets as i64;
    let mut ret = 0;
    let mut n = -relative;
    if bidirectional {
        nb /= 2;
        if n < 0 {
            ret += nb;
        }
        n = n.abs();
    } else {
        n = n.max(0);
    }
    let max_exact = nb / 2;
    if n < max_exact {
        return (ret + n) as usize;
    }
    let scaled = (n as f64 / max_exact as f64).ln() / (MAX_DISTANCE as f64 / max_exact as f64).ln();
    let large = max_exact + (scaled * (nb - max_exact) as f64) as i64;
    (ret + large.min(nb - 1)) as usize
}

pub(crate) fn bucket_matrix(nq: usize, nk: usize, bidirectional: bool, num_buckets: usize) -> Array2<usize> {
    Array2::from_shape_fn((nq, nk), |(i, j)| {
        relative_position_bucket(j as i64 - i as i64, bidirectional, num_buckets)
    })
}

pub(crate) struct NormCache<F> {
    xhat: Array2<F>,
    inv_rms: Array1<F>,
}

pub(crate) fn rms_norm<F: Real>(x: &Array2<F>, gain: &Array1<F>) -> (Array2<F>, NormCache<F>) {
    let d = cst::<F>(x.ncols() as f64);
    let eps = cst::<F>(NORM_EPS);
    let inv_rms = x.map_axis(Axis(1), |row| {
        let ms = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / d;
        F::one() / (ms + eps).sqrt()
    });
    let xhat = x * &inv_rms.view().insert_axis(Axis(1));
    let y = &xhat * gain;
    (y, NormCache { xhat, inv_rms })
}

pub(crate) fn rms_norm_backward<F: Real>(
    dy: &Array2<F>,
    gain: &Array1<F>,
    cache: &NormCache<F>,
    dgain: &mut Array1<F>,
) -> Array2<F> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    let dxhat = dy * gain;
    let d = cst::<F>(dy.ncols() as f64);
    let proj = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &(&cache.xhat * &proj.view().insert_axis(Axis(1)));
    dx *= &cache.inv_rms.view().insert_axis(Axis(1));
    dx
}

fn gelu<F: Real>(x: F) -> (F, F) {
    let c = cst::<F>((2.0 / std::f64::consts::PI).sqrt());
    let a = cst::<F>(0.044715);
    let half = cst::<F>(0.5);
    let three = cst::<F>(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x);
    (y, dy)
}

/// Scaled keep-mask for inverted dropout: `1 / (1 - rate)` where kept, zero where dropped.
pub(crate) fn dropout_mask<F: Real>(shape: (usize, usize), rate: f64, seed: u64, site: u64) -> Array2<F> {
    let mut rng = stream_rng(seed, site);
    let keep = cst::<F>(1.0 / (1.0 - rate));
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { F::zero() } else { keep })
}

pub(crate) struct DropSite {
    pub rate: f64,
    pub seed: u64,
    pub site: u64,
}

pub(crate) struct FfCache<F> {
    h: Array2<F>,
    dact: Array2<F>,
    act: Array2<F>,
    mask: Option<Array2<F>>,
}

pub(crate) fn feed_forward<F: Real>(
    h: &Array2<F>,
    ff: &FeedForward<F>,
    drop: Option<DropSite>,
) -> (Array2<F>, FfCache<F>) {
    let pre = h.dot(&ff.wi);
    let mut act = Array2::zeros(pre.raw_dim());
    let mut dact = Array2::zeros(pre.raw_dim());
    Zip::from(&mut act).and(&mut dact).and(&pre).for_each(|a, da, &p| {
        (*a, *da) = gelu(p);
    });
    let mask = drop.map(|d| dropout_mask::<F>(act.dim(), d.rate, d.seed, d.site * 64 + 63));
    if let Some(m) = &mask {
        act *= m;
    }
    let out = act.dot(&ff.wo);
    (out, FfCache { h: h.clone(), dact, act, mask })
}

pub(crate) fn feed_forward_backward<F: Real>(
    dout: &Array2<F>,
    ff: &FeedForward<F>,
    cache: &FfCache<F>,
    grad: &mut FeedForward<F>,
) -> Array2<F> {
    grad.wo += &cache.act.t().dot(dout);
    let mut dpre = dout.dot(&ff.wo.t());
    if let Some(m) = &cache.mask {
        dpre *= m;
    }
    dpre *= &cache.dact;
    grad.wi += &cache.h.t().dot(&dpre);
    dpre.dot(&ff.wi.t())
}

/// Additive attention bias shared by all layers of one stack.
pub(crate) struct PositionBias<'a, F> {
    pub table: &'a Array2<F>,
    pub buckets: &'a Array2<usize>,
}

pub(crate) struct AttnCache<F> {
    hq: Array2<F>,
    hkv: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    probs: Vec<Array2<F>>,
    masks: Option<Vec<Array2<F>>>,
    ctx: Array2<F>,
}

impl<F> AttnCache<F> {
    pub fn probs(&self) -> &[Array2<F>] {
        &self.probs
    }
}

fn softmax_rows<F: Real>(s: &mut Array2<F>) {
    for mut row in s.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<F: Real>(
    hq: &Array2<F>,
    hkv: &Array2<F>,
    w: &Attention<F>,
    n_heads: usize,
    bias: Option<&PositionBias<'_, F>>,
    causal: bool,
    drop: Option<DropSite>,
) -> (Array2<F>, AttnCache<F>) {
    let q = hq.dot(&w.q);
    let k = hkv.dot(&w.k);
    let v = hkv.dot(&w.v);
    let (nq, nk) = (hq.nrows(), hkv.nrows());
    let dh = q.ncols() / n_heads;
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    let mut ctx = Array2::zeros((nq, q.ncols()));
    let mut probs = Vec::with_capacity(n_heads);
    let mut masks = drop.as_ref().map(|_| Vec::with_capacity(n_heads));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if let Some(b) = bias {
            Zip::from(&mut scores).and(b.buckets).for_each(|sc, &bk| *sc += b.table[[bk, h]]);
        }
        if causal {
            for i in 0..nq {
                for j in i + 1..nk {
                    scores[[i, j]] = F::neg_infinity();
                }
            }
        }
        softmax_rows(&mut scores);
        let p = match (&drop, &mut masks) {
            (Some(d), Some(ms)) => {
                let m = dropout_mask::<F>((nq, nk), d.rate, d.seed, d.site * 64 + h as u64);
                let p = &scores * &m;
                ms.push(m);
                p
            }
            _ => scores.clone(),
        };
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = ctx.dot(&w.o);
    let cache = AttnCache {
        hq: hq.clone(),
        hkv: hkv.clone(),
        q,
        k,
        v,
        probs,
        masks,
        ctx,
    };
    (out, cache)
}

/// Returns `(d_hq, d_hkv)`; bias-table gradients are added to `dtable`.
pub(crate) fn attention_backward<F: Real>(
    dout: &Array2<F>,
    w: &Attention<F>,
    cache: &AttnCache<F>,
    buckets: Option<&Array2<usize>>,
    grad: &mut Attention<F>,
    dtable: Option<&mut Array2<F>>,
) -> (Array2<F>, Array2<F>) {
    let n_heads = cache.probs.len();
    let dh = cache.q.ncols() / n_heads;
    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
    grad.o += &cache.ctx.t().dot(dout);
    let dctx = dout.dot(&w.o.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    let mut dtable = dtable;
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let dctx_h = dctx.slice(cols);
        let mut dp = dctx_h.dot(&cache.v.slice(cols).t());
        match &cache.masks {
            Some(ms) => {
                dv.slice_mut(cols).assign(&(p * &ms[h]).t().dot(&dctx_h));
                dp *= &ms[h];
            }
            None => dv.slice_mut(cols).assign(&p.t().dot(&dctx_h)),
        }
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let ds = (dp - &row_dot.insert_axis(Axis(1))) * p;
        if let (Some(b), Some(t)) = (buckets, dtable.as_deref_mut()) {
            Zip::from(&ds).and(b).for_each(|&g, &bk| t[[bk, h]] += g);
        }
        dq.slice_mut(cols).assign(&(ds.dot(&cache.k.slice(cols)) * scale));
        dk.slice_mut(cols).assign(&(ds.t().dot(&cache.q.slice(cols)) * scale));
    }
    grad.q += &cache.hq.t().dot(&dq);
    grad.k += &cache.hkv.t().dot(&dk);
    grad.v += &cache.hkv.t().dot(&dv);
    let dhq = dq.dot(&w.q.t());
    let dhkv = dk.dot(&w.k.t()) + dv.dot(&w.v.t());
    (dhq, dhkv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_layout() {
        assert_eq!(relative_position_bucket(0, true, 32), 0);
        assert_eq!(relative_position_bucket(-3, true, 32), 3);
        assert_eq!(relative_position_bucket(3, true, 32), 19);
        assert_eq!(relative_position_bucket(-1000, true, 32), 15);
        assert_eq!(relative_position_bucket(1000, true, 32), 31);
        assert_eq!(relative_position_bucket(5, false, 32), 0);
        assert_eq!(relative_position_bucket(-1000, false, 32), 31);
        for r in -300..300 {
            assert!(relative_position_bucket(r, true, 32) < 32);
            assert!(relative_position_bucket(r, false, 32) < 32);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h).0 - gelu(x - h).0) / (2.0 * h);
            assert!((num - gelu(x).1).abs() < 1e-8);
        }
    }

    #[test]
    fn norm_output_has_unit_rms() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 - 7.0);
        let (y, _) = rms_norm(&x, &Array1::ones(8));
        for row in y.rows() {
            let ms = row.mapv(|v| v * v).mean().unwrap();
            assert!((ms - 1.0).abs() < 1e-4);
        }
    }
}
