//! Quadratic and linearized reference attention mechanisms.
//!
//! `softmax_attention` materializes the full T x T score matrix on purpose:
//! its memory footprint is part of what the benchmark harness measures.
//! `sparse_causal_attention` is the per-frame scheme where frame i attends to
//! the first frame and frame i-1. `aft_attention` is the causal
//! positional-bias form, and `windowed_attention` restricts softmax attention
//! to non-overlapping token windows.
//!
//! Every mechanism ships an explicit backward so the harness can time and
//! meter forward plus backward without a recording tape. The backwards
//! recompute the forward probabilities instead of storing them.

use crate::arena::CountedBuf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;


/// Mechanism selector for config-driven callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMechanism {
    SoftmaxFull,
    SparseCausal,
    Aft,
    Windowed,
}

/// Mechanism plus its knobs: window width for the windowed form and the
/// optional 1/sqrt(d) score scaling. Scaling defaults on (the training-style
/// convention); literal-equation tests switch it off.
#[derive(Clone, Debug)]
pub struct AttentionConfig {
    pub mechanism: AttentionMechanism,
    pub window: Option<usize>,
    pub scale_by_sqrt_d: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mechanism: AttentionMechanism::SoftmaxFull,
            window: None,
            scale_by_sqrt_d: true,
        }
    }
}

fn check_rank2_same(items: &[(&str, &Tensor)]) -> Result<(usize, usize)> {
    let first = items[0].1;
    if first.rank() != 2 {
        return Err(Error::dim(format!(
            "{} must be rank 2, got {:?}",
            items[0].0,
            first.shape()
        )));
    }
    for (name, t) in &items[1..] {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!(
                "{name} shape {:?} != {:?}",
                t.shape(),
                first.shape()
            )));
        }
    }
    Ok((first.shape()[0], first.shape()[1]))
}

fn scale_factor(apply: bool, d: usize) -> f64 {
    if apply {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    }
}

// out[m*n] += a[m*k] . b[k*n]
fn matmul_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row_b = &b[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += aip * bv;
            }
        }
    }
}

// out[k*n] += a^T . b where a is stored [m*k] and b is [m*n]
fn matmul_ta_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row_b = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let row_out = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += aip * bv;
            }
        }
    }
}

// out[m*r] += a[m*n] . b^T where b is stored [r*n]
fn matmul_tb_acc(a: &[f64], m: usize, n: usize, b: &[f64], r: usize, out: &mut [f64]) {
    for i in 0..m {
        let row_a = &a[i * n..(i + 1) * n];
        for j in 0..r {
            let row_b = &b[j * n..(j + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in row_a.iter().zip(row_b) {
                acc += av * bv;
            }
            out[i * r + j] += acc;
        }
    }
}

/// Writes q . k^T scaled into a fresh buffer and softmaxes it row by row in
/// place. Returns the probability matrix `[rows_q, rows_k]`.
fn score_probs(q: &Tensor, k: &Tensor, scale: bool) -> CountedBuf {
    let (tq, d) = (q.shape()[0], q.shape()[1]);
    let tk = k.shape()[0];
    let s = scale_factor(scale, d);
    let mut probs = CountedBuf::zeroed(tq * tk);
    matmul_tb_acc(q.data(), tq, d, k.data(), tk, probs.as_mut_slice());
    for row in probs.as_mut_slice().chunks_mut(tk) {
        let mut m = f64::NEG_INFINITY;
        for v in row.iter_mut() {
            *v *= s;
            m = m.max(*v);
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    probs
}

/// Full softmax attention `softmax(Q K^T) V`, materializing the score matrix.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: bool) -> Result<Tensor> {
    let (t, d) = check_rank2_same(&[("Q", q), ("K", k), ("V", v)])?;
    if t == 0 {
        return Err(Error::EmptyInput("attention over zero tokens"));
    }
    let probs = score_probs(q, k, scale);
    let mut out = CountedBuf::zeroed(t * d);
    matmul_acc(probs.as_slice(), t, t, v.data(), d, out.as_mut_slice());
    Ok(Tensor::from_buf_unchecked(vec![t, d], out))
}

/// Gradients of `softmax_attention` with respect to Q, K and V. The
/// probability matrix is recomputed, and the softmax cotangent is formed in
/// place so at most two T x T buffers are live at once.
pub fn softmax_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: bool,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, d) = check_rank2_same(&[("Q", q), ("K", k), ("V", v), ("upstream", upstream)])?;
    if t == 0 {
        return Err(Error::EmptyInput("attention over zero tokens"));
    }
    let s = scale_factor(scale, d);
    let probs = score_probs(q, k, scale);

    let mut gv = CountedBuf::zeroed(t * d);
    matmul_ta_acc(probs.as_slice(), t, t, upstream.data(), d, gv.as_mut_slice());

    // gP = upstream . V^T, then transformed row-wise in place into the score
    // gradient gS = (gP - <gP, P>_row) * P * s.
    let mut gp = CountedBuf::zeroed(t * t);
    matmul_tb_acc(upstream.data(), t, d, v.data(), t, gp.as_mut_slice());
    for (gp_row, p_row) in gp
        .as_mut_slice()
        .chunks_mut(t)
        .zip(probs.as_slice().chunks(t))
    {
        let mut dot = 0.0;
        for (&g, &p) in gp_row.iter().zip(p_row) {
            dot += g * p;
        }
        for (g, &p) in gp_row.iter_mut().zip(p_row) {
            *g = (*g - dot) * p * s;
        }
    }
    drop(probs);

    let mut gq = CountedBuf::zeroed(t * d);
    matmul_acc(gp.as_slice(), t, t, k.data(), d, gq.as_mut_slice());
    let mut gk = CountedBuf::zeroed(t * d);
    matmul_ta_acc(gp.as_slice(), t, t, q.data(), d, gk.as_mut_slice());

    Ok((
        Tensor::from_buf_unchecked(vec![t, d], gq),
        Tensor::from_buf_unchecked(vec![t, d], gk),
        Tensor::from_buf_unchecked(vec![t, d], gv),
    ))
}

fn check_frames(z: &Tensor) -> Result<(usize, usize, usize)> {
    if z.rank() != 3 {
        return Err(Error::dim(format!(
            "sparse-causal input must be [frames, tokens, d], got {:?}",
            z.shape()
        )));
    }
    let (f, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    if f == 0 || n == 0 {
        return Err(Error::EmptyInput("sparse-causal over zero frames or tokens"));
    }
    Ok((f, n, d))
}

fn frame(z: &Tensor, i: usize, n: usize, d: usize) -> Tensor {
    let data = z.data()[i * n * d..(i + 1) * n * d].to_vec();
    Tensor::from_vec_unchecked(vec![n, d], data)
}

fn concat_frames(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec_unchecked(vec![a.shape()[0] + b.shape()[0], a.shape()[1]], data)
}

/// Sparse-causal attention over video frames: frame 0 attends to itself;
/// frame i >= 1 queries the concatenation of frame 0 and frame i-1 (2n keys).
/// Cost grows quadratically in tokens per frame.
pub fn sparse_causal_attention(z: &Tensor, scale: bool) -> Result<Tensor> {
    let (f, n, d) = check_frames(z)?;
    let mut out = Vec::with_capacity(f * n * d);
    let first = frame(z, 0, n, d);
    for i in 0..f {
        let q = frame(z, i, n, d);
        let o = if i == 0 {
            softmax_attention(&q, &first, &first, scale)?
        } else {
            let prev = frame(z, i - 1, n, d);
            let keys = concat_frames(&first, &prev);
            let probs = score_probs(&q, &keys, scale);
            let mut o = CountedBuf::zeroed(n * d);
            matmul_acc(probs.as_slice(), n, 2 * n, keys.data(), d, o.as_mut_slice());
            Tensor::from_buf_unchecked(vec![n, d], o)
        };
        out.extend_from_slice(o.data());
    }
    Ok(Tensor::from_vec_unchecked(vec![f, n, d], out))
}

/// Gradient of `sparse_causal_attention` with respect to its input frames.
pub fn sparse_causal_attention_backward(
    z: &Tensor,
    scale: bool,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (f, n, d) = check_frames(z)?;
    if upstream.shape() != z.shape() {
        return Err(Error::dim(format!(
            "upstream shape {:?} != input shape {:?}",
            upstream.shape(),
            z.shape()
        )));
    }
    let mut gz = CountedBuf::zeroed(f * n * d);
    let first = frame(z, 0, n, d);
    for i in 0..f {
        let q = frame(z, i, n, d);
        let g = frame(upstream, i, n, d);
        if i == 0 {
            let (gq, gk, gv) = softmax_attention_backward(&q, &first, &first, scale, &g)?;
            let slot = &mut gz.as_mut_slice()[0..n * d];
            for (o, ((&a, &b), &c)) in slot
                .iter_mut()
                .zip(gq.data().iter().zip(gk.data()).zip(gv.data()))
            {
                *o += a + b + c;
            }
        } else {
            let prev = frame(z, i - 1, n, d);
            let keys = concat_frames(&first, &prev);
            // Backward of softmax over a rectangular key set, reusing the
            // square-path algebra with rows_q = n, rows_k = 2n.
            let s = scale_factor(scale, d);
            let probs = score_probs(&q, &keys, scale);
            let tk = 2 * n;
            let mut gkeys = CountedBuf::zeroed(tk * d);
            matmul_ta_acc(probs.as_slice(), n, tk, g.data(), d, gkeys.as_mut_slice());
            let mut gp = CountedBuf::zeroed(n * tk);
            matmul_tb_acc(g.data(), n, d, keys.data(), tk, gp.as_mut_slice());
            for (gp_row, p_row) in gp
                .as_mut_slice()
                .chunks_mut(tk)
                .zip(probs.as_slice().chunks(tk))
            {
                let mut dot = 0.0;
                for (&gv_, &p) in gp_row.iter().zip(p_row) {
                    dot += gv_ * p;
                }
                for (gv_, &p) in gp_row.iter_mut().zip(p_row) {
                    *gv_ = (*gv_ - dot) * p * s;
                }
            }
            let mut gq = CountedBuf::zeroed(n * d);
            matmul_acc(gp.as_slice(), n, tk, keys.data(), d, gq.as_mut_slice());
            // gKeys also picks up the score-path term gS^T . Q.
            matmul_ta_acc(gp.as_slice(), n, tk, q.data(), d, gkeys.as_mut_slice());

            let gzs = gz.as_mut_slice();
            for (o, &v) in gzs[i * n * d..(i + 1) * n * d]
                .iter_mut()
                .zip(gq.as_slice())
            {
                *o += v;
            }
            for (o, &v) in gzs[0..n * d].iter_mut().zip(&gkeys.as_slice()[..n * d]) {
                *o += v;
            }
            for (o, &v) in gzs[(i - 1) * n * d..i * n * d]
                .iter_mut()
                .zip(&gkeys.as_slice()[n * d..])
            {
                *o += v;
            }
        }
    }
    Ok(Tensor::from_buf_unchecked(vec![f, n, d], gz))
}

/// Causal attention with learnable positional biases:
/// `out_t = sum_{i<=t} e^{w[t,i] + k_i} v_i / sum_{i<=t} e^{w[t,i] + k_i}`,
/// log-domain stabilized per output.
pub fn aft_attention(k: &Tensor, v: &Tensor, w_bias: &Tensor) -> Result<Tensor> {
    let (t, d) = check_rank2_same(&[("K", k), ("V", v)])?;
    if t == 0 {
        return Err(Error::EmptyInput("attention over zero tokens"));
    }
    if w_bias.rank() != 2 || w_bias.shape() != [t, t] {
        return Err(Error::dim(format!(
            "positional bias must be [{t}, {t}], got {:?}",
            w_bias.shape()
        )));
    }
    if !w_bias.all_finite() {
        return Err(Error::contract("non-finite positional bias".to_string()));
    }
    let kd = k.data();
    let vd = v.data();
    let wb = w_bias.data();
    let mut out = CountedBuf::zeroed(t * d);
    let mut maxb = vec![f64::NEG_INFINITY; d];
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for ti in 0..t {
        maxb.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        for i in 0..=ti {
            let b = wb[ti * t + i];
            for c in 0..d {
                let e = b + kd[i * d + c];
                if e > maxb[c] {
                    maxb[c] = e;
                }
            }
        }
        num.iter_mut().for_each(|x| *x = 0.0);
        den.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..=ti {
            let b = wb[ti * t + i];
            for c in 0..d {
                let e = (b + kd[i * d + c] - maxb[c]).exp();
                num[c] += e * vd[i * d + c];
                den[c] += e;
            }
        }
        for c in 0..d {
            out.as_mut_slice()[ti * d + c] = num[c] / den[c];
        }
    }
    Ok(Tensor::from_buf_unchecked(vec![t, d], out))
}

/// Softmax attention restricted to non-overlapping windows of `m` consecutive
/// tokens. A trailing window shorter than `m` covers the remainder, which is
/// what zero-key masking of a padded window computes.
pub fn windowed_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    m: usize,
    scale: bool,
) -> Result<Tensor> {
    let (t, d) = check_rank2_same(&[("Q", q), ("K", k), ("V", v)])?;
    if m == 0 {
        return Err(Error::config("window must be at least 1"));
    }
    if m > t {
        return Err(Error::config(format!("window {m} exceeds {t} tokens")));
    }
    let mut out = Vec::with_capacity(t * d);
    let mut start = 0;
    while start < t {
        let len = m.min(t - start);
        let slice = |x: &Tensor| {
            Tensor::from_vec_unchecked(
                vec![len, d],
                x.data()[start * d..(start + len) * d].to_vec(),
            )
        };
        let o = softmax_attention(&slice(q), &slice(k), &slice(v), scale)?;
        out.extend_from_slice(o.data());
        start += len;
    }
    Ok(Tensor::from_vec_unchecked(vec![t, d], out))
}

/// Gradients of `windowed_attention` with respect to Q, K and V.
pub fn windowed_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    m: usize,
    scale: bool,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (t, d) = check_rank2_same(&[("Q", q), ("K", k), ("V", v), ("upstream", upstream)])?;
    if m == 0 || m > t {
        return Err(Error::config(format!("window {m} invalid for {t} tokens")));
    }
    let mut gq = vec![0.0; t * d];
    let mut gk = vec![0.0; t * d];
    let mut gv = vec![0.0; t * d];
    let mut start = 0;
    while start < t {
        let len = m.min(t - start);
        let range = start * d..(start + len) * d;
        let slice = |x: &Tensor| {
            Tensor::from_vec_unchecked(vec![len, d], x.data()[range.clone()].to_vec())
        };
        let (wgq, wgk, wgv) =
            softmax_attention_backward(&slice(q), &slice(k), &slice(v), scale, &slice(upstream))?;
        gq[range.clone()].copy_from_slice(wgq.data());
        gk[range.clone()].copy_from_slice(wgk.data());
        gv[range.clone()].copy_from_slice(wgv.data());
        start += len;
    }
    Ok((
        Tensor::from_vec_unchecked(vec![t, d], gq),
        Tensor::from_vec_unchecked(vec![t, d], gk),
        Tensor::from_vec_unchecked(vec![t, d], gv),
    ))
}

impl AttentionConfig {
    /// Dispatches self-attention over `x` according to the configured
    /// mechanism (`x` is `[T, d]`, or `[f, n, d]` for the sparse-causal form).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self.mechanism {
            AttentionMechanism::SoftmaxFull => softmax_attention(x, x, x, self.scale_by_sqrt_d),
            AttentionMechanism::SparseCausal => sparse_causal_attention(x, self.scale_by_sqrt_d),
            AttentionMechanism::Aft => {
                let t = x.shape()[0];
                let bias = Tensor::zeros(vec![t, t]);
                aft_attention(x, x, &bias)
            }
            AttentionMechanism::Windowed => {
                let m = self
                    .window
                    .ok_or_else(|| Error::config("windowed attention needs a window size"))?;
                windowed_attention(x, x, x, m, self.scale_by_sqrt_d)
            }
        }
    }
}
