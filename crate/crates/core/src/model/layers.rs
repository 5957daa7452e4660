//! Forward and reverse-mode passes of the transformer building blocks.
//!
//! Activations are row-major `rows x dim` buffers. Backward functions
//! accumulate parameter gradients into a `ModelParams` of the same layout
//! and return the gradient with respect to their input.

use super::linalg::{gemm, View, ViewMut};
use super::params::{BlockIdx, LinearIdx, ModelParams, NormIdx};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn linear_fwd(p: &ModelParams, idx: LinearIdx, x: &[f64], rows: usize) -> Vec<f64> {
    let (i, o) = (idx.in_dim, idx.out_dim);
    let bias = p.data(idx.b);
    let mut y: Vec<f64> = Vec::with_capacity(rows * o);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(1.0, View::new(x, rows, i), View::new(p.data(idx.w), i, o), 1.0, ViewMut::new(&mut y, rows, o));
    y
}

pub(crate) fn linear_bwd(
    p: &ModelParams,
    g: &mut ModelParams,
    idx: LinearIdx,
    x: &[f64],
    dy: &[f64],
    rows: usize,
) -> Vec<f64> {
    let (i, o) = (idx.in_dim, idx.out_dim);
    gemm(1.0, View::new(x, rows, i).t(), View::new(dy, rows, o), 1.0, ViewMut::new(g.data_mut(idx.w), i, o));
    let db = g.data_mut(idx.b);
    for row in dy.chunks_exact(o) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = vec![0.0; rows * i];
    gemm(1.0, View::new(dy, rows, o), View::new(p.data(idx.w), i, o).t(), 0.0, ViewMut::new(&mut dx, rows, i));
    dx
}

pub(crate) struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

pub(crate) fn norm_fwd(p: &ModelParams, idx: NormIdx, x: &[f64], dim: usize) -> (Vec<f64>, NormCache) {
    let (gamma, beta) = (p.data(idx.g), p.data(idx.b));
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for c in 0..dim {
            let h = (row[c] - mean) * s;
            xhat[r * dim + c] = h;
            y[r * dim + c] = h * gamma[c] + beta[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn norm_bwd(
    p: &ModelParams,
    g: &mut ModelParams,
    idx: NormIdx,
    cache: &NormCache,
    dy: &[f64],
    dim: usize,
) -> Vec<f64> {
    let gamma = p.data(idx.g);
    let rows = dy.len() / dim;
    let mut dgamma = vec![0.0; dim];
    let mut dbeta = vec![0.0; dim];
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let dyr = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for c in 0..dim {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let s = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = s * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    add_into(g.data_mut(idx.g), &dgamma);
    add_into(g.data_mut(idx.b), &dbeta);
    dx
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct BlockCache {
    rows: usize,
    ln1: NormCache,
    xn1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads x rows x rows` softmax rows.
    pub probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: NormCache,
    xn2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// Pre-norm transformer block: `h = x + attn(ln1(x))`, `y = h + mlp(ln2(h))`
/// with full self-attention over all rows.
pub(crate) fn block_fwd(
    p: &ModelParams,
    idx: &BlockIdx,
    heads: usize,
    x: &[f64],
    rows: usize,
) -> (Vec<f64>, BlockCache) {
    let dim = idx.q.in_dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (xn1, ln1) = norm_fwd(p, idx.ln1, x, dim);
    let q = linear_fwd(p, idx.q, &xn1, rows);
    let k = linear_fwd(p, idx.k, &xn1, rows);
    let v = linear_fwd(p, idx.v, &xn1, rows);

    let mut probs = vec![0.0; heads * rows * rows];
    let mut attn = vec![0.0; rows * dim];
    for h in 0..heads {
        let s = &mut probs[h * rows * rows..(h + 1) * rows * rows];
        gemm(
            scale,
            View::cols(&q, rows, dim, h * dh, dh),
            View::cols(&k, rows, dim, h * dh, dh).t(),
            0.0,
            ViewMut::new(s, rows, rows),
        );
        for row in s.chunks_exact_mut(rows) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        gemm(
            1.0,
            View::new(s, rows, rows),
            View::cols(&v, rows, dim, h * dh, dh),
            0.0,
            ViewMut::cols(&mut attn, rows, dim, h * dh, dh),
        );
    }
    let proj = linear_fwd(p, idx.o, &attn, rows);
    let hres: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

    let (xn2, ln2) = norm_fwd(p, idx.ln2, &hres, dim);
    let pre = linear_fwd(p, idx.fc1, &xn2, rows);
    let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
    let mlp = linear_fwd(p, idx.fc2, &act, rows);
    let y = hres.iter().zip(&mlp).map(|(a, b)| a + b).collect();

    (
        y,
        BlockCache {
            rows,
            ln1,
            xn1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            xn2,
            pre,
            act,
        },
    )
}

pub(crate) fn block_bwd(
    p: &ModelParams,
    g: &mut ModelParams,
    idx: &BlockIdx,
    heads: usize,
    cache: &BlockCache,
    dy: &[f64],
) -> Vec<f64> {
    let rows = cache.rows;
    let dim = idx.q.in_dim;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch; the residual passes dy straight to h.
    let dact = linear_bwd(p, g, idx.fc2, &cache.act, dy, rows);
    let dpre: Vec<f64> = dact
        .iter()
        .zip(&cache.pre)
        .map(|(d, x)| d * gelu_grad(*x))
        .collect();
    let dxn2 = linear_bwd(p, g, idx.fc1, &cache.xn2, &dpre, rows);
    let mut dh_res = norm_bwd(p, g, idx.ln2, &cache.ln2, &dxn2, dim);
    add_into(&mut dh_res, dy);

    // Attention branch.
    let dattn = linear_bwd(p, g, idx.o, &cache.attn, &dh_res, rows);
    let mut dq = vec![0.0; rows * dim];
    let mut dk = vec![0.0; rows * dim];
    let mut dv = vec![0.0; rows * dim];
    let mut dp = vec![0.0; rows * rows];
    for h in 0..heads {
        let probs = &cache.probs[h * rows * rows..(h + 1) * rows * rows];
        // dV_h = P^T dO_h
        gemm(
            1.0,
            View::new(probs, rows, rows).t(),
            View::cols(&dattn, rows, dim, h * dh, dh),
            0.0,
            ViewMut::cols(&mut dv, rows, dim, h * dh, dh),
        );
        // dP = dO_h V_h^T
        gemm(
            1.0,
            View::cols(&dattn, rows, dim, h * dh, dh),
            View::cols(&cache.v, rows, dim, h * dh, dh).t(),
            0.0,
            ViewMut::new(&mut dp, rows, rows),
        );
        // Softmax backward in place: dS = P * (dP - rowsum(dP * P)).
        for (dpr, pr) in dp.chunks_exact_mut(rows).zip(probs.chunks_exact(rows)) {
            let dot: f64 = dpr.iter().zip(pr).map(|(a, b)| a * b).sum();
            for (d, pv) in dpr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        gemm(
            scale,
            View::new(&dp, rows, rows),
            View::cols(&cache.k, rows, dim, h * dh, dh),
            0.0,
            ViewMut::cols(&mut dq, rows, dim, h * dh, dh),
        );
        gemm(
            scale,
            View::new(&dp, rows, rows).t(),
            View::cols(&cache.q, rows, dim, h * dh, dh),
            0.0,
            ViewMut::cols(&mut dk, rows, dim, h * dh, dh),
        );
    }
    let mut dxn1 = linear_bwd(p, g, idx.q, &cache.xn1, &dq, rows);
    add_into(&mut dxn1, &linear_bwd(p, g, idx.k, &cache.xn1, &dk, rows));
    add_into(&mut dxn1, &linear_bwd(p, g, idx.v, &cache.xn1, &dv, rows));
    let mut dx = norm_bwd(p, g, idx.ln1, &cache.ln1, &dxn1, dim);
    add_into(&mut dx, &dh_res);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }
}
