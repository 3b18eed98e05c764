//! Forward/backward kernels for every layer primitive.
//!
//! All backward rules accumulate into the destination gradient buffers, so
//! a value consumed by several downstream ops receives the summed gradient.

use super::matmul::{matmul, matmul_nt, matmul_tn};
use crate::element::Element;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics of one batchnorm layer, persisted across batches.
#[derive(Debug, Clone)]
pub struct BnState<F: Element> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Element> BnState<F> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
        }
    }
}

// ---------------------------------------------------------------- conv2d

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub filters: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        padding: Padding,
    ) -> Result<ConvDims> {
        let (&[n, c_in, h, w], &[filters, kc, kh, kw]) = match (x_shape, w_shape) {
            (x @ &[_, _, _, _], k @ &[_, _, _, _]) => (
                <&[usize; 4]>::try_from(x).unwrap(),
                <&[usize; 4]>::try_from(k).unwrap(),
            ),
            _ => return Err(Error::shape("conv2d", &[4, 4], &[x_shape.len(), w_shape.len()])),
        };
        if kh != kw {
            return Err(Error::shape("conv2d: square kernel", &[kh, kh], &[kh, kw]));
        }
        if kc != c_in {
            return Err(Error::shape("conv2d: input channels", w_shape, x_shape));
        }
        let k = kh;
        let (h_out, w_out, pad) = match padding {
            Padding::Same => (h, w, (k - 1) / 2),
            Padding::Valid => {
                if k > h || k > w {
                    return Err(Error::shape("conv2d: valid padding", &[k, k], &[h, w]));
                }
                (h - k + 1, w - k + 1, 0)
            }
        };
        Ok(ConvDims {
            n,
            c_in,
            h,
            w,
            filters,
            k,
            h_out,
            w_out,
            pad,
        })
    }
}

/// Scatter one sample into im2col layout: col[(c*k*k + ky*k + kx), oy*w_out + ox].
fn im2col<F: Element>(x: &[F], d: &ConvDims, col: &mut [F]) {
    let hw_out = d.h_out * d.w_out;
    let mut q = 0;
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let dst = &mut col[q * hw_out..(q + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy + ky) as isize - d.pad as isize;
                    let row = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in row.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                q += 1;
            }
        }
    }
}

/// Transpose of im2col: accumulate column gradients back onto the image.
fn col2im_add<F: Element>(col: &[F], d: &ConvDims, dx: &mut [F]) {
    let hw_out = d.h_out * d.w_out;
    let mut q = 0;
    for c in 0..d.c_in {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let src = &col[q * hw_out..(q + 1) * hw_out];
                for oy in 0..d.h_out {
                    let iy = (oy + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    let src_row = &src[oy * d.w_out..(oy + 1) * d.w_out];
                    for (ox, &g) in src_row.iter().enumerate() {
                        let ix = (ox + kx) as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            dst_row[ix as usize] += g;
                        }
                    }
                }
                q += 1;
            }
        }
    }
}

/// Cross-correlation (no kernel flip), stride 1.
pub fn conv2d_forward<F: Element>(x: &[F], w: &[F], b: &[F], d: &ConvDims) -> Vec<F> {
    let hw_out = d.h_out * d.w_out;
    let ck2 = d.c_in * d.k * d.k;
    let mut out = vec![F::zero(); d.n * d.filters * hw_out];
    let mut col = vec![F::zero(); ck2 * hw_out];
    for s in 0..d.n {
        im2col(&x[s * d.c_in * d.h * d.w..], d, &mut col);
        let out_s = &mut out[s * d.filters * hw_out..(s + 1) * d.filters * hw_out];
        matmul(w, &col, d.filters, ck2, hw_out, out_s);
        for f in 0..d.filters {
            let bias = b[f];
            for v in &mut out_s[f * hw_out..(f + 1) * hw_out] {
                *v += bias;
            }
        }
    }
    out
}

pub fn conv2d_backward<F: Element>(
    x: &[F],
    w: &[F],
    d: &ConvDims,
    dout: &[F],
    mut dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
) {
    let hw_out = d.h_out * d.w_out;
    let ck2 = d.c_in * d.k * d.k;
    let mut col = vec![F::zero(); ck2 * hw_out];
    let mut dcol = vec![F::zero(); ck2 * hw_out];
    for s in 0..d.n {
        let x_s = &x[s * d.c_in * d.h * d.w..];
        let dout_s = &dout[s * d.filters * hw_out..(s + 1) * d.filters * hw_out];
        im2col(x_s, d, &mut col);
        // dW[f,q] += sum_s dout[f,s] col[q,s]
        matmul_nt(dout_s, &col, d.filters, hw_out, ck2, dw);
        if let Some(dx) = dx.as_deref_mut() {
            // dcol[q,s] = sum_f w[f,q] dout[f,s]
            dcol.iter_mut().for_each(|v| *v = F::zero());
            matmul_tn(w, dout_s, ck2, d.filters, hw_out, &mut dcol);
            col2im_add(&dcol, d, &mut dx[s * d.c_in * d.h * d.w..]);
        }
        for f in 0..d.filters {
            let mut s_b = F::zero();
            for &g in &dout_s[f * hw_out..(f + 1) * hw_out] {
                s_b += g;
            }
            db[f] += s_b;
        }
    }
}

// ------------------------------------------------------------- batchnorm

pub struct BnSaved<F: Element> {
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    pub counted: usize,
}

/// Per-channel normalization over (N, H, W). Train mode uses batch statistics
/// (biased variance) and folds them into the running buffers; infer mode uses
/// the running buffers as-is.
pub fn batchnorm_forward<F: Element>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    dims: (usize, usize, usize, usize),
    mode: BnMode,
    state: &mut BnState<F>,
) -> Result<(Vec<F>, BnSaved<F>)> {
    let (n, c, h, w) = dims;
    let m = n * h * w;
    if mode == BnMode::Train && m < 2 {
        return Err(Error::DegenerateVariance(m));
    }
    let eps = F::from_f64(BN_EPS);
    let mom = F::from_f64(BN_MOMENTUM);
    let plane = h * w;
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); c];
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut s = F::zero();
                for s_i in 0..n {
                    let base = (s_i * c + ch) * plane;
                    for &v in &x[base..base + plane] {
                        s += v;
                    }
                }
                let mean = s / F::from_usize(m);
                let mut v_acc = F::zero();
                for s_i in 0..n {
                    let base = (s_i * c + ch) * plane;
                    for &v in &x[base..base + plane] {
                        let d = v - mean;
                        v_acc += d * d;
                    }
                }
                let var = v_acc / F::from_usize(m);
                state.running_mean[ch] = (F::one() - mom) * state.running_mean[ch] + mom * mean;
                state.running_var[ch] = (F::one() - mom) * state.running_var[ch] + mom * var;
                (mean, var)
            }
            BnMode::Infer => (state.running_mean[ch], state.running_var[ch]),
        };
        let istd = F::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        let g = gamma[ch];
        let b = beta[ch];
        for s_i in 0..n {
            let base = (s_i * c + ch) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok((
        out,
        BnSaved {
            xhat,
            inv_std,
            counted: m,
        },
    ))
}

pub fn batchnorm_backward<F: Element>(
    saved: &BnSaved<F>,
    gamma: &[F],
    dims: (usize, usize, usize, usize),
    mode: BnMode,
    dout: &[F],
    dx: &mut [F],
    dgamma: &mut [F],
    dbeta: &mut [F],
) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let m = F::from_usize(saved.counted);
    for ch in 0..c {
        let mut sum_dy = F::zero();
        let mut sum_dy_xhat = F::zero();
        for s_i in 0..n {
            let base = (s_i * c + ch) * plane;
            for i in base..base + plane {
                sum_dy += dout[i];
                sum_dy_xhat += dout[i] * saved.xhat[i];
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let g_istd = gamma[ch] * saved.inv_std[ch];
        for s_i in 0..n {
            let base = (s_i * c + ch) * plane;
            for i in base..base + plane {
                dx[i] += match mode {
                    // Batch statistics depend on x, hence the centering terms.
                    BnMode::Train => {
                        g_istd / m * (m * dout[i] - sum_dy - saved.xhat[i] * sum_dy_xhat)
                    }
                    BnMode::Infer => g_istd * dout[i],
                };
            }
        }
    }
}

// ------------------------------------------------------ pooling / dropout

pub fn maxpool_forward<F: Element>(
    x: &[F],
    dims: (usize, usize, usize, usize),
    k: usize,
) -> (Vec<F>, Vec<usize>, (usize, usize)) {
    let (n, c, h, w) = dims;
    let h_out = h / k;
    let w_out = w / k;
    let mut out = vec![F::zero(); n * c * h_out * w_out];
    let mut idx = vec![0usize; out.len()];
    let mut o = 0;
    for s in 0..n {
        for ch in 0..c {
            let plane = (s * c + ch) * h * w;
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut best = x[plane + oy * k * w + ox * k];
                    let mut best_i = plane + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dxq in 0..k {
                            let i = plane + (oy * k + dy) * w + ox * k + dxq;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o] = best;
                    idx[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    (out, idx, (h_out, w_out))
}

pub fn maxpool_backward<F: Element>(idx: &[usize], dout: &[F], dx: &mut [F]) {
    for (&i, &g) in idx.iter().zip(dout) {
        dx[i] += g;
    }
}

pub fn global_avg_pool_forward<F: Element>(
    x: &[F],
    dims: (usize, usize, usize, usize),
) -> Vec<F> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let inv = F::one() / F::from_usize(plane);
    let mut out = vec![F::zero(); n * c];
    for (o, chunk) in out.iter_mut().zip(x.chunks(plane)) {
        let mut s = F::zero();
        for &v in chunk {
            s += v;
        }
        *o = s * inv;
    }
    let _ = (n, c);
    out
}

pub fn global_avg_pool_backward<F: Element>(
    dout: &[F],
    dims: (usize, usize, usize, usize),
    dx: &mut [F],
) {
    let (_, _, h, w) = dims;
    let plane = h * w;
    let inv = F::one() / F::from_usize(plane);
    for (g, chunk) in dout.iter().zip(dx.chunks_mut(plane)) {
        let gv = *g * inv;
        for v in chunk {
            *v += gv;
        }
    }
}

/// Channel mask for spatial dropout: one keep/drop decision per (sample,
/// channel), survivors scaled by 1/(1-rate).
pub fn dropout_mask<F: Element, R: rand::Rng>(
    n: usize,
    c: usize,
    rate: f64,
    rng: &mut R,
) -> Vec<F> {
    let scale = F::from_f64(1.0 / (1.0 - rate));
    (0..n * c)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                F::zero()
            } else {
                scale
            }
        })
        .collect()
}

pub fn dropout_apply<F: Element>(x: &[F], mask: &[F], plane: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (i, (o_chunk, x_chunk)) in out.chunks_mut(plane).zip(x.chunks(plane)).enumerate() {
        let m = mask[i];
        for (o, &v) in o_chunk.iter_mut().zip(x_chunk) {
            *o = v * m;
        }
    }
    out
}

pub fn dropout_backward<F: Element>(mask: &[F], plane: usize, dout: &[F], dx: &mut [F]) {
    for (i, (dx_chunk, g_chunk)) in dx.chunks_mut(plane).zip(dout.chunks(plane)).enumerate() {
        let m = mask[i];
        for (d, &g) in dx_chunk.iter_mut().zip(g_chunk) {
            *d += g * m;
        }
    }
}

// ----------------------------------------------------- dense / activations

/// y[rows, out] = x[rows, in] * w[in, out] + b
pub fn dense_forward<F: Element>(
    x: &[F],
    w: &[F],
    b: &[F],
    rows: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); rows * d_out];
    matmul(x, w, rows, d_in, d_out, &mut out);
    for r in out.chunks_mut(d_out) {
        for (v, &bias) in r.iter_mut().zip(b) {
            *v += bias;
        }
    }
    out
}

pub fn dense_backward<F: Element>(
    x: &[F],
    w: &[F],
    rows: usize,
    d_in: usize,
    d_out: usize,
    dout: &[F],
    dx: &mut [F],
    dw: &mut [F],
    db: &mut [F],
) {
    matmul_nt(dout, w, rows, d_out, d_in, dx);
    matmul_tn(x, dout, d_in, rows, d_out, dw);
    for r in dout.chunks(d_out) {
        for (d, &g) in db.iter_mut().zip(r) {
            *d += g;
        }
    }
}

pub fn relu_forward<F: Element>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect()
}

pub fn relu_backward<F: Element>(x: &[F], dout: &[F], dx: &mut [F]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x).zip(dout) {
        if v > F::zero() {
            *d += g;
        }
    }
}

/// Row softmax over the last dimension, max-subtracted for stability.
pub fn softmax_forward<F: Element>(x: &[F], d: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (o_row, row) in out.chunks_mut(d).zip(x.chunks(d)) {
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut s = F::zero();
        for (o, &v) in o_row.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            s += e;
        }
        for o in o_row.iter_mut() {
            *o /= s;
        }
    }
    out
}

pub fn softmax_backward<F: Element>(y: &[F], d: usize, dout: &[F], dx: &mut [F]) {
    for ((dx_row, y_row), g_row) in dx.chunks_mut(d).zip(y.chunks(d)).zip(dout.chunks(d)) {
        let mut dot = F::zero();
        for (&yv, &g) in y_row.iter().zip(g_row) {
            dot += yv * g;
        }
        for ((dv, &yv), &g) in dx_row.iter_mut().zip(y_row).zip(g_row) {
            *dv += yv * (g - dot);
        }
    }
}

// -------------------------------------------------------------- loss

/// Mean over the batch of -log(p_true), probabilities floored at 1e-12.
pub fn cross_entropy_forward<F: Element>(probs: &[F], targets: &[F], k: usize) -> Result<F> {
    let rows = probs.len() / k;
    let floor = F::from_f64(CE_FLOOR);
    let tol = F::from_f64(1e-4);
    let mut total = F::zero();
    for (r, (p_row, t_row)) in probs.chunks(k).zip(targets.chunks(k)).enumerate() {
        let mut row_sum = F::zero();
        for &p in p_row {
            row_sum += p;
        }
        if (row_sum - F::one()).abs() > tol {
            return Err(Error::Data(format!(
                "cross_entropy: probability row {r} sums to {row_sum}, not 1"
            )));
        }
        let mut ones = 0;
        let mut p_true = F::zero();
        for (&p, &t) in p_row.iter().zip(t_row) {
            if t == F::one() {
                ones += 1;
                p_true = p;
            } else if t != F::zero() {
                return Err(Error::Data(format!(
                    "cross_entropy: target row {r} is not one-hot"
                )));
            }
        }
        if ones != 1 {
            return Err(Error::Data(format!(
                "cross_entropy: target row {r} has {ones} ones"
            )));
        }
        total += -(p_true.max(floor)).ln();
    }
    Ok(total / F::from_usize(rows))
}

pub fn cross_entropy_backward<F: Element>(
    probs: &[F],
    targets: &[F],
    k: usize,
    upstream: F,
    dprobs: &mut [F],
) {
    let rows = probs.len() / k;
    let floor = F::from_f64(CE_FLOOR);
    let scale = upstream / F::from_usize(rows);
    for ((dp_row, p_row), t_row) in dprobs
        .chunks_mut(k)
        .zip(probs.chunks(k))
        .zip(targets.chunks(k))
    {
        for ((dp, &p), &t) in dp_row.iter_mut().zip(p_row).zip(t_row) {
            // Below the floor, the clamped log is constant: zero slope.
            if t == F::one() && p >= floor {
                *dp -= scale / p;
            }
        }
    }
}

// ------------------------------------------------------- shape plumbing

/// Gather channels of an NCHW tensor: out[n, i] = x[n, indices[i]].
pub fn select_channels_forward<F: Element>(
    x: &[F],
    dims: (usize, usize, usize, usize),
    indices: &[usize],
) -> Vec<F> {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let mut out = vec![F::zero(); n * indices.len() * plane];
    for s in 0..n {
        for (i, &src_c) in indices.iter().enumerate() {
            let src = &x[(s * c + src_c) * plane..(s * c + src_c + 1) * plane];
            let base = (s * indices.len() + i) * plane;
            out[base..base + plane].copy_from_slice(src);
        }
    }
    out
}

pub fn select_channels_backward<F: Element>(
    dout: &[F],
    dims: (usize, usize, usize, usize),
    indices: &[usize],
    dx: &mut [F],
) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    for s in 0..n {
        for (i, &src_c) in indices.iter().enumerate() {
            let g = &dout[(s * indices.len() + i) * plane..(s * indices.len() + i + 1) * plane];
            let dst = &mut dx[(s * c + src_c) * plane..(s * c + src_c + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(g) {
                *d += v;
            }
        }
    }
}

pub fn upsample2_forward<F: Element>(x: &[F], dims: (usize, usize, usize, usize)) -> Vec<F> {
    let (n, c, h, w) = dims;
    let mut out = vec![F::zero(); n * c * 4 * h * w];
    for p in 0..n * c {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for x_i in 0..w {
                let v = src[y * w + x_i];
                let base = 2 * y * 2 * w + 2 * x_i;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Element>(
    dout: &[F],
    dims: (usize, usize, usize, usize),
    dx: &mut [F],
) {
    let (n, c, h, w) = dims;
    for p in 0..n * c {
        let g = &dout[p * 4 * h * w..(p + 1) * 4 * h * w];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x_i in 0..w {
                let base = 2 * y * 2 * w + 2 * x_i;
                d[y * w + x_i] += g[base] + g[base + 1] + g[base + 2 * w] + g[base + 2 * w + 1];
            }
        }
    }
}

/// Row-major index permutation. Returns the permuted data for `perm` applied
/// to the axes of `shape`.
pub fn permute_forward<F: Element>(x: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![F::zero(); x.len()];
    let mut coord = vec![0usize; rank];
    for (o_i, o) in out.iter_mut().enumerate() {
        let mut rem = o_i;
        for (d, &extent) in out_shape.iter().enumerate().rev() {
            coord[d] = rem % extent;
            rem /= extent;
        }
        let mut src = 0;
        for (d, &p) in perm.iter().enumerate() {
            src += coord[d] * strides[p];
        }
        *o = x[src];
    }
    (out, out_shape)
}

pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
