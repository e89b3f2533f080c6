//! Forward/backward primitives over `[rows, width]` matrices.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{AttnIds, FfnIds, Gradients, LinearIds, NormIds, Parameters};

const NORM_EPS: f64 = 1e-5;

pub(crate) fn linear(p: &Parameters, ids: LinearIds, x: ArrayView2<f64>) -> Array2<f64> {
    x.dot(p.t(ids.w)) + p.t(ids.b)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn linear_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: LinearIds,
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    *g.t_mut(ids.w) += &x.t().dot(&dy);
    *g.t_mut(ids.b) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    dy.dot(&p.t(ids.w).t())
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(p: &Parameters, ids: NormIds, x: ArrayView2<f64>) -> (Array2<f64>, NormCache) {
    let width = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    let y = &xhat * p.t(ids.gain) + p.t(ids.bias);
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: NormIds,
    cache: &NormCache,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    *g.t_mut(ids.gain) += &(&dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *g.t_mut(ids.bias) += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = &dy * p.t(ids.gain);
    let width = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
        let dh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_dh = dh.sum() / width;
        let mean_dh_xh = dh.dot(&xh) / width;
        let inv = cache.inv_std[r];
        for c in 0..out.len() {
            out[c] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
        }
    }
    dx
}

pub(crate) struct AttnCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Multi-head scaled dot-product attention of `xq` over `xkv`. With
/// `causal`, query `i` sees keys `0..=i`.
pub(crate) fn attention(
    p: &Parameters,
    ids: AttnIds,
    heads: usize,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let q = linear(p, ids.q, xq);
    let k = linear(p, ids.k, xkv);
    let v = linear(p, ids.v, xkv);
    let width = q.ncols();
    let hw = width / heads;
    let scale = (hw as f64).powf(-0.5);
    let mut concat = Array2::zeros((q.nrows(), width));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hw..(h + 1) * hw];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|v| v * scale);
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let visible = if causal { i + 1 } else { row.len() };
            let max = row.iter().take(visible).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (j, s) in row.iter_mut().enumerate() {
                *s = if j < visible { (*s - max).exp() } else { 0.0 };
                sum += *s;
            }
            row.mapv_inplace(|v| v / sum);
        }
        concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let out = linear(p, ids.o, concat.view());
    (out, AttnCache { q, k, v, probs, concat })
}

/// Returns `(d_xq, d_xkv)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: AttnIds,
    heads: usize,
    xq: ArrayView2<f64>,
    xkv: ArrayView2<f64>,
    cache: &AttnCache,
    dy: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dconcat = linear_back(p, g, ids.o, cache.concat.view(), dy);
    let width = cache.q.ncols();
    let hw = width / heads;
    let scale = (hw as f64).powf(-0.5);
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * hw..(h + 1) * hw];
        let probs = &cache.probs[h];
        let dout = dconcat.slice(cols);
        let dprobs = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dout));
        let mut dscores = probs * &dprobs;
        for (mut row, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let dot: f64 = row.sum();
            row.zip_mut_with(&prow, |d, &pv| *d -= pv * dot);
        }
        dscores.mapv_inplace(|v| v * scale);
        dq.slice_mut(cols).assign(&dscores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&cache.q.slice(cols)));
    }
    let dxq = linear_back(p, g, ids.q, xq, dq.view());
    let dxkv = linear_back(p, g, ids.k, xkv, dk.view()) + linear_back(p, g, ids.v, xkv, dv.view());
    (dxq, dxkv)
}

pub(crate) struct FfnCache {
    hidden: Array2<f64>,
}

pub(crate) fn ffn(p: &Parameters, ids: FfnIds, x: ArrayView2<f64>) -> (Array2<f64>, FfnCache) {
    let mut hidden = linear(p, ids.up, x);
    hidden.mapv_inplace(|v| v.max(0.0));
    let out = linear(p, ids.down, hidden.view());
    (out, FfnCache { hidden })
}

pub(crate) fn ffn_back(
    p: &Parameters,
    g: &mut Gradients,
    ids: FfnIds,
    x: ArrayView2<f64>,
    cache: &FfnCache,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dh = linear_back(p, g, ids.down, cache.hidden.view(), dy);
    dh.zip_mut_with(&cache.hidden, |d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
    linear_back(p, g, ids.up, x, dh.view())
}
