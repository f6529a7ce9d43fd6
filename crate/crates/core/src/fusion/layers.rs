//! Forward and reverse-mode kernels: attention, layer norm, 3×3 convolution.

use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::scalar::Scalar;

use super::mask::AttentionMask;
use super::tensor::{dot, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Below this, a masked attention row is considered to have lost all mass.
pub const RENORM_FLOOR: f64 = 1e-30;

/// Where the visibility mask enters the attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Softmax over the full row, multiply by the mask, renormalize each row.
    #[default]
    Renormalize,
    /// Masked logits set to −∞ before the softmax.
    Additive,
}

/// Multi-head scaled dot-product attention with a binary mask.
///
/// `q` is `N × C`, `k` is `M × C` and `v` is `M × Cv`; the mask is `N × M`
/// (square here). Head `h` uses channels `[h·C/H, (h+1)·C/H)` of `q`/`k` and
/// `[h·Cv/H, (h+1)·Cv/H)` of `v`; logits are scaled by `1/√(C/H)`.
/// Returns the `N × Cv` output and the per-head attention weights.
pub fn attention_forward<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: &AttentionMask,
    heads: usize,
    mode: MaskMode,
) -> Result<(Mat<T>, Vec<Mat<T>>), FusionError> {
    check_attention_shapes(q, k, v, mask, heads)?;
    let (n, m) = (q.rows(), k.rows());
    let dk = q.cols() / heads;
    let dv = v.cols() / heads;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut out = Mat::zeros(n, v.cols());
    let mut all_weights = Vec::with_capacity(heads);
    let mut logits = vec![T::zero(); m];
    for h in 0..heads {
        let qh = h * dk..(h + 1) * dk;
        let mut weights = Mat::zeros(n, m);
        for i in 0..n {
            let qi = &q.row(i)[qh.clone()];
            for (j, s) in logits.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[qh.clone()]) * scale;
            }
            let w = weights.row_mut(i);
            match mode {
                MaskMode::Renormalize => {
                    let top = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let mut z = T::zero();
                    for (wj, &s) in w.iter_mut().zip(&logits) {
                        *wj = (s - top).exp();
                        z += *wj;
                    }
                    let mut kept = T::zero();
                    for (j, wj) in w.iter_mut().enumerate() {
                        *wj = if mask.allows(i, j) { *wj / z } else { T::zero() };
                        kept += *wj;
                    }
                    if !(kept >= T::lit(RENORM_FLOOR)) {
                        return Err(FusionError::MaskAllZeroRow { row: i });
                    }
                    for wj in w.iter_mut() {
                        *wj /= kept;
                    }
                }
                MaskMode::Additive => {
                    let top = logits
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| mask.allows(i, j))
                        .fold(T::neg_infinity(), |a, (_, &b)| a.max(b));
                    let mut z = T::zero();
                    for (j, (wj, &s)) in w.iter_mut().zip(&logits).enumerate() {
                        *wj = if mask.allows(i, j) { (s - top).exp() } else { T::zero() };
                        z += *wj;
                    }
                    if !(z >= T::lit(RENORM_FLOOR)) {
                        return Err(FusionError::MaskAllZeroRow { row: i });
                    }
                    for wj in w.iter_mut() {
                        *wj /= z;
                    }
                }
            }
            let o = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
            for (j, &wj) in weights.row(i).iter().enumerate() {
                if wj == T::zero() {
                    continue;
                }
                for (o, &vj) in o.iter_mut().zip(&v.row(j)[h * dv..(h + 1) * dv]) {
                    *o += wj * vj;
                }
            }
        }
        all_weights.push(weights);
    }
    Ok((out, all_weights))
}

fn check_attention_shapes<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<(), FusionError> {
    let bad = |msg: String| Err(FusionError::DimensionMismatch(msg));
    if heads == 0 || q.cols() % heads != 0 || v.cols() % heads != 0 {
        return bad(format!("{heads} heads do not divide q/v widths {}/{}", q.cols(), v.cols()));
    }
    if q.cols() != k.cols() {
        return bad(format!("query width {} != key width {}", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return bad(format!("{} keys but {} values", k.rows(), v.rows()));
    }
    if mask.len() != q.rows() || mask.len() != k.rows() {
        return bad(format!("mask size {} for {} queries and {} keys", mask.len(), q.rows(), k.rows()));
    }
    Ok(())
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
///
/// Uses `dS = W ⊙ (dW − rowsum(W ⊙ dW))`, which is the Jacobian of both mask
/// modes; masked-out logits receive exactly zero gradient.
pub fn attention_backward<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    weights: &[Mat<T>],
    d_out: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let heads = weights.len();
    let (n, m) = (q.rows(), k.rows());
    let dk = q.cols() / heads;
    let dv = v.cols() / heads;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut dq = Mat::zeros(n, q.cols());
    let mut dkm = Mat::zeros(m, k.cols());
    let mut dvm = Mat::zeros(m, v.cols());
    let mut dw = vec![T::zero(); m];
    for (h, w) in weights.iter().enumerate() {
        let qh = h * dk..(h + 1) * dk;
        let vh = h * dv..(h + 1) * dv;
        for i in 0..n {
            let doi = &d_out.row(i)[vh.clone()];
            let wi = w.row(i);
            let mut mix = T::zero();
            for j in 0..m {
                if wi[j] == T::zero() {
                    dw[j] = T::zero();
                    continue;
                }
                dw[j] = dot(doi, &v.row(j)[vh.clone()]);
                mix += wi[j] * dw[j];
                for (g, &d) in dvm.row_mut(j)[vh.clone()].iter_mut().zip(doi) {
                    *g += wi[j] * d;
                }
            }
            for j in 0..m {
                if wi[j] == T::zero() {
                    continue;
                }
                let ds = wi[j] * (dw[j] - mix) * scale;
                let kj = &k.row(j)[qh.clone()];
                for (g, &kv) in dq.row_mut(i)[qh.clone()].iter_mut().zip(kj) {
                    *g += ds * kv;
                }
                let qi = &q.row(i)[qh.clone()];
                for (g, &qv) in dkm.row_mut(j)[qh.clone()].iter_mut().zip(qi) {
                    *g += ds * qv;
                }
            }
        }
    }
    (dq, dkm, dvm)
}

/// Per-channel scale and shift applied after normalizing each row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(channels: usize) -> Self {
        Self { gamma: vec![T::one(); channels], beta: vec![T::zero(); channels] }
    }

    pub fn zeros(channels: usize) -> Self {
        Self { gamma: vec![T::zero(); channels], beta: vec![T::zero(); channels] }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> LayerNormCache<T> {
    /// Smallest per-row standard deviation (with the epsilon) seen by the norm.
    pub fn min_std(&self) -> T {
        self.inv_std.iter().fold(T::infinity(), |m, &is| m.min(T::one() / is))
    }
}

pub fn layer_norm_forward<T: Scalar>(x: &Mat<T>, p: &LayerNorm<T>) -> (Mat<T>, LayerNormCache<T>) {
    let c = T::from_usize(x.cols()).unwrap();
    let mut y = Mat::zeros(x.rows(), x.cols());
    let mut xhat = Mat::zeros(x.rows(), x.cols());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / c;
        let is = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
        inv_std.push(is);
        for (ch, &v) in row.iter().enumerate() {
            let xh = (v - mean) * is;
            xhat.set(r, ch, xh);
            y.set(r, ch, xh * p.gamma[ch] + p.beta[ch]);
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &Mat<T>,
    cache: &LayerNormCache<T>,
    p: &LayerNorm<T>,
    grad: &mut LayerNorm<T>,
) -> Mat<T> {
    let cols = dy.cols();
    let c = T::from_usize(cols).unwrap();
    let mut dx = Mat::zeros(dy.rows(), cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..dy.rows() {
        let xh = cache.xhat.row(r);
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for ch in 0..cols {
            let g = dy.get(r, ch);
            grad.gamma[ch] += g * xh[ch];
            grad.beta[ch] += g;
            dxhat[ch] = g * p.gamma[ch];
            sum += dxhat[ch];
            sum_x += dxhat[ch] * xh[ch];
        }
        let is = cache.inv_std[r];
        for ch in 0..cols {
            dx.set(r, ch, is / c * (c * dxhat[ch] - sum - xh[ch] * sum_x));
        }
    }
    dx
}

/// 3×3 same-padded convolution (cross-correlation) over a `hs × ws` grid.
/// Kernel layout is `[c_out][c_in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv3x3<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, kernel: vec![T::zero(); c_in * c_out * 9], bias: vec![T::zero(); c_out] }
    }

    #[inline]
    fn idx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * 3 + ky) * 3 + kx
    }

    pub fn tap(&self, co: usize, ci: usize, ky: usize, kx: usize) -> T {
        self.kernel[self.idx(co, ci, ky, kx)]
    }

    pub fn set_tap(&mut self, co: usize, ci: usize, ky: usize, kx: usize, v: T) {
        let i = self.idx(co, ci, ky, kx);
        self.kernel[i] = v;
    }
}

#[inline]
fn neighbor(r: usize, c: usize, ky: usize, kx: usize, ws: usize, hs: usize) -> Option<usize> {
    let rr = (r + ky).checked_sub(1)?;
    let cc = (c + kx).checked_sub(1)?;
    (rr < hs && cc < ws).then_some(rr * ws + cc)
}

pub fn conv3x3_forward<T: Scalar>(x: &Mat<T>, ws: usize, hs: usize, p: &Conv3x3<T>) -> Mat<T> {
    debug_assert_eq!(x.rows(), ws * hs);
    debug_assert_eq!(x.cols(), p.c_in);
    let mut y = Mat::zeros(ws * hs, p.c_out);
    for r in 0..hs {
        for c in 0..ws {
            let out = r * ws + c;
            for co in 0..p.c_out {
                let mut acc = p.bias[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(src) = neighbor(r, c, ky, kx, ws, hs) {
                            let xs = x.row(src);
                            for (ci, &xv) in xs.iter().enumerate() {
                                acc += p.kernel[p.idx(co, ci, ky, kx)] * xv;
                            }
                        }
                    }
                }
                y.set(out, co, acc);
            }
        }
    }
    y
}

pub fn conv3x3_backward<T: Scalar>(
    x: &Mat<T>,
    ws: usize,
    hs: usize,
    p: &Conv3x3<T>,
    dy: &Mat<T>,
    grad: &mut Conv3x3<T>,
) -> Mat<T> {
    let mut dx = Mat::zeros(x.rows(), x.cols());
    for r in 0..hs {
        for c in 0..ws {
            let out = r * ws + c;
            for co in 0..p.c_out {
                let g = dy.get(out, co);
                if g == T::zero() {
                    continue;
                }
                grad.bias[co] += g;
                for ky in 0..3 {
                    for kx in 0..3 {
                        if let Some(src) = neighbor(r, c, ky, kx, ws, hs) {
                            for ci in 0..p.c_in {
                                let idx = p.idx(co, ci, ky, kx);
                                grad.kernel[idx] += g * x.get(src, ci);
                                let cur = dx.get(src, ci);
                                dx.set(src, ci, cur + g * p.kernel[idx]);
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
