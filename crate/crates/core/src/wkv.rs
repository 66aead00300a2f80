//! Bidirectional weighted key-value (Bi-WKV) aggregation kernels.
//!
//! The bidirectional form computes, per channel, a normalized exponentially
//! weighted average over all tokens:
//!
//! ```text
//! wkv[t] = ( sum_{i != t} e^{-(|t-i|-1)/T * w + k[i]} * v[i] + e^{u + k[t]} * v[t] )
//!        / ( sum_{i != t} e^{-(|t-i|-1)/T * w + k[i]}        + e^{u + k[t]}        )
//! ```
//!
//! `bi_wkv_direct` evaluates the sums literally in O(T^2 * d) and serves as
//! the reference oracle. `bi_wkv_scan` produces the identical result in
//! O(T * d) with one forward and one backward recurrence plus the bonus term.
//! All exponential accumulation is carried in log domain with a running
//! per-channel maximum; raw e^k overflows f64 near |k| = 710, so the ideal
//! formula is never evaluated as written.
//!
//! `causal_wkv` is the one-directional variant where token t sees tokens
//! i <= t with weight e^{-(t-i) * w + k[i]} and its own value through the
//! bonus u. Its decay is not normalized by sequence length and must be
//! non-negative.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::arena::CountedBuf;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel decay and bonus vectors. The decay sign is unconstrained in
/// the bidirectional form.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams {
    pub w: Tensor,
    pub u: Tensor,
}

impl WkvParams {
    pub fn new(w: Tensor, u: Tensor) -> Result<Self> {
        if w.rank() != 1 || u.rank() != 1 {
            return Err(Error::dim("wkv params must be rank-1 vectors".to_string()));
        }
        if w.len() != u.len() {
            return Err(Error::dim(format!(
                "decay length {} != bonus length {}",
                w.len(),
                u.len()
            )));
        }
        Ok(WkvParams { w, u })
    }

    pub fn zeros(d: usize) -> Self {
        WkvParams {
            w: Tensor::zeros(vec![d]),
            u: Tensor::zeros(vec![d]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }
}

/// Running stabilized accumulator for one directional pass.
///
/// Semantically the state represents the pair of sums
/// `(num, den) = (a * e^p, b * e^p)` per channel; `p` tracks the running
/// maximum exponent so the mantissas `a` and `b` stay in range. The
/// reconstructed ratio `num / den` is invariant under any common shift of
/// `p`, which is what makes the stabilization exact.
#[derive(Clone, Debug)]
pub struct ScanState {
    /// Weighted value accumulator mantissa, one per channel.
    pub num: Vec<f64>,
    /// Weight accumulator mantissa, one per channel.
    pub den: Vec<f64>,
    /// Running maximum exponent per channel (log domain).
    pub max_exp: Vec<f64>,
}

impl ScanState {
    pub fn new(channels: usize) -> Self {
        ScanState {
            num: vec![0.0; channels],
            den: vec![0.0; channels],
            max_exp: vec![f64::NEG_INFINITY; channels],
        }
    }

    /// Absorbs one token: decays the state by `e^{neg_decay}` per channel
    /// (log-domain shift) and adds the term `e^{k} * v` / `e^{k}`.
    pub fn step(&mut self, neg_decay: &[f64], k: &[f64], v: &[f64]) {
        for c in 0..self.num.len() {
            let decayed = self.max_exp[c] + neg_decay[c];
            let q = decayed.max(k[c]);
            // decayed is -inf only while the state is empty; the mantissas
            // are zero there so the 0 * e^{-inf} products stay exact zeros.
            let e_old = if decayed == f64::NEG_INFINITY {
                0.0
            } else {
                (decayed - q).exp()
            };
            let e_new = (k[c] - q).exp();
            self.num[c] = e_old * self.num[c] + e_new * v[c];
            self.den[c] = e_old * self.den[c] + e_new;
            self.max_exp[c] = q;
        }
    }

    /// Writes the state of channel `c` as `(num, den, max_exp)`.
    fn snapshot_into(&self, num: &mut [f64], den: &mut [f64], pex: &mut [f64]) {
        num.copy_from_slice(&self.num);
        den.copy_from_slice(&self.den);
        pex.copy_from_slice(&self.max_exp);
    }
}

/// Gradients of a WKV output contracted with an upstream cotangent.
#[derive(Clone, Debug)]
pub struct WkvGrads {
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
    pub u: Tensor,
}

// Hidden fault-injection hook: multiplies the decay factor applied at step 1
// of the forward pass of bi_wkv_scan by this value. Exists so the
// verification command can prove its equivalence check actually detects
// divergence. 1.0 means inactive.
static SCAN_PERTURB_BITS: AtomicU64 = AtomicU64::new(0x3FF0000000000000); // 1.0f64

#[doc(hidden)]
pub fn set_scan_perturbation(factor: f64) {
    SCAN_PERTURB_BITS.store(factor.to_bits(), Ordering::SeqCst);
}

#[doc(hidden)]
pub fn scan_perturbation() -> f64 {
    f64::from_bits(SCAN_PERTURB_BITS.load(Ordering::SeqCst))
}

fn check_kv(k: &Tensor, v: &Tensor, d_params: usize) -> Result<(usize, usize)> {
    if k.rank() != 2 || v.rank() != 2 {
        return Err(Error::dim(format!(
            "wkv expects rank-2 K and V, got {:?} and {:?}",
            k.shape(),
            v.shape()
        )));
    }
    if k.shape() != v.shape() {
        return Err(Error::dim(format!(
            "K shape {:?} != V shape {:?}",
            k.shape(),
            v.shape()
        )));
    }
    let (t, d) = (k.shape()[0], k.shape()[1]);
    if d != d_params {
        return Err(Error::dim(format!(
            "K/V channel count {d} != parameter channel count {d_params}"
        )));
    }
    if t == 0 {
        return Err(Error::EmptyInput("wkv over zero tokens"));
    }
    Ok((t, d))
}

/// Exact evaluation of the bidirectional form by direct summation,
/// O(T^2 * d). Log domain with per-output max subtraction.
pub fn bi_wkv_direct(k: &Tensor, v: &Tensor, params: &WkvParams) -> Result<Tensor> {
    Ok(bi_wkv_direct_with_aux(k, v, params)?.0)
}

/// Direct evaluation that also returns `log D[t,c]`, the log of each output's
/// normalizer. Shared by the quadratic backward.
fn bi_wkv_direct_with_aux(
    k: &Tensor,
    v: &Tensor,
    params: &WkvParams,
) -> Result<(Tensor, Tensor)> {
    let (t_len, d) = check_kv(k, v, params.channels())?;
    let kd = k.data();
    let vd = v.data();
    let w = params.w.data();
    let u = params.u.data();
    let inv_t = 1.0 / t_len as f64;

    let mut out = CountedBuf::zeroed(t_len * d);
    let mut logd = CountedBuf::zeroed(t_len * d);
    let mut maxbuf = vec![f64::NEG_INFINITY; d];

    for t in 0..t_len {
        maxbuf.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        for i in 0..t_len {
            let dist = (t as f64 - i as f64).abs() - 1.0;
            for c in 0..d {
                let s = if i == t {
                    u[c] + kd[i * d + c]
                } else {
                    -dist * inv_t * w[c] + kd[i * d + c]
                };
                if s > maxbuf[c] {
                    maxbuf[c] = s;
                }
            }
        }
        let row_out = &mut out.as_mut_slice()[t * d..(t + 1) * d];
        let row_logd = &mut logd.as_mut_slice()[t * d..(t + 1) * d];
        let mut num = vec![0.0; d];
        let mut den = vec![0.0; d];
        for i in 0..t_len {
            let dist = (t as f64 - i as f64).abs() - 1.0;
            for c in 0..d {
                let s = if i == t {
                    u[c] + kd[i * d + c]
                } else {
                    -dist * inv_t * w[c] + kd[i * d + c]
                };
                let e = (s - maxbuf[c]).exp();
                num[c] += e * vd[i * d + c];
                den[c] += e;
            }
        }
        for c in 0..d {
            row_out[c] = num[c] / den[c];
            row_logd[c] = maxbuf[c] + den[c].ln();
        }
    }
    Ok((
        Tensor::from_buf_unchecked(vec![t_len, d], out),
        Tensor::from_buf_unchecked(vec![t_len, d], logd),
    ))
}

/// Linear-time evaluation of the bidirectional form: a forward recurrence
/// over the i < t contribution, a backward recurrence over i > t, and the
/// bonus term at i = t, each carried in stabilized form.
pub fn bi_wkv_scan(k: &Tensor, v: &Tensor, params: &WkvParams) -> Result<Tensor> {
    Ok(bi_wkv_scan_with_aux(k, v, params)?.0)
}

struct DirectionalSums {
    num: CountedBuf,
    den: CountedBuf,
    pex: CountedBuf,
}

/// Runs the ascending pass and snapshots the state seen by each output
/// (sums over i < t, at distance weight e^{-(t-1-i) * omega}).
fn left_pass(
    t_len: usize,
    d: usize,
    kd: &[f64],
    vd: &[f64],
    neg_omega: &[f64],
) -> DirectionalSums {
    let mut sums = DirectionalSums {
        num: CountedBuf::zeroed(t_len * d),
        den: CountedBuf::zeroed(t_len * d),
        pex: CountedBuf::zeroed(t_len * d),
    };
    let perturb = scan_perturbation();
    let mut perturbed_decay: Option<Vec<f64>> = None;
    if perturb != 1.0 {
        let shift = perturb.ln();
        perturbed_decay = Some(neg_omega.iter().map(|&nd| nd + shift).collect());
    }
    let mut state = ScanState::new(d);
    for t in 0..t_len {
        state.snapshot_into(
            &mut sums.num.as_mut_slice()[t * d..(t + 1) * d],
            &mut sums.den.as_mut_slice()[t * d..(t + 1) * d],
            &mut sums.pex.as_mut_slice()[t * d..(t + 1) * d],
        );
        let decay = match (&perturbed_decay, t) {
            (Some(p), 1) => p.as_slice(),
            _ => neg_omega,
        };
        state.step(decay, &kd[t * d..(t + 1) * d], &vd[t * d..(t + 1) * d]);
    }
    sums
}

/// Scan evaluation returning the output plus `log D[t,c]`. Shared by the
/// linear-time backward.
fn bi_wkv_scan_with_aux(k: &Tensor, v: &Tensor, params: &WkvParams) -> Result<(Tensor, Tensor)> {
    let (t_len, d) = check_kv(k, v, params.channels())?;
    let kd = k.data();
    let vd = v.data();
    let u = params.u.data();
    let inv_t = 1.0 / t_len as f64;
    let neg_omega: Vec<f64> = params.w.data().iter().map(|&w| -w * inv_t).collect();

    let left = if crate::config::parallelism_enabled() && t_len >= 2 {
        // The two directional passes are independent; the right pass below is
        // fused with the merge, so only the left pass is offloaded. Merge
        // order stays fixed regardless.
        let (l, ()) = rayon::join(|| left_pass(t_len, d, kd, vd, &neg_omega), || ());
        l
    } else {
        left_pass(t_len, d, kd, vd, &neg_omega)
    };

    let mut out = CountedBuf::zeroed(t_len * d);
    let mut logd = CountedBuf::zeroed(t_len * d);
    let mut right = ScanState::new(d);
    for t in (0..t_len).rev() {
        let lnum = &left.num.as_slice()[t * d..(t + 1) * d];
        let lden = &left.den.as_slice()[t * d..(t + 1) * d];
        let lpex = &left.pex.as_slice()[t * d..(t + 1) * d];
        let krow = &kd[t * d..(t + 1) * d];
        let vrow = &vd[t * d..(t + 1) * d];
        let row_out = &mut out.as_mut_slice()[t * d..(t + 1) * d];
        let row_logd = &mut logd.as_mut_slice()[t * d..(t + 1) * d];
        for c in 0..d {
            let bonus = u[c] + krow[c];
            // Merge left state, right state and the bonus term under a
            // common maximum exponent. The bonus is always finite, so q is.
            let q = lpex[c].max(right.max_exp[c]).max(bonus);
            let el = if lpex[c] == f64::NEG_INFINITY {
                0.0
            } else {
                (lpex[c] - q).exp()
            };
            let er = if right.max_exp[c] == f64::NEG_INFINITY {
                0.0
            } else {
                (right.max_exp[c] - q).exp()
            };
            let eb = (bonus - q).exp();
            let num = el * lnum[c] + er * right.num[c] + eb * vrow[c];
            let den = el * lden[c] + er * right.den[c] + eb;
            row_out[c] = num / den;
            row_logd[c] = q + den.ln();
        }
        right.step(&neg_omega, krow, vrow);
    }
    Ok((
        Tensor::from_buf_unchecked(vec![t_len, d], out),
        Tensor::from_buf_unchecked(vec![t_len, d], logd),
    ))
}

/// Causal weighted key-value aggregation: token t attends to i <= t with
/// channel-wise time decay `e^{-(t-i) * w}` and takes its own value through
/// the bonus `u`. Single forward scan, O(T * d). Decay entries must be
/// non-negative.
pub fn causal_wkv(k: &Tensor, v: &Tensor, w: &Tensor, u: &Tensor) -> Result<Tensor> {
    let params = WkvParams::new(w.clone(), u.clone())?;
    if params.w.data().iter().any(|&x| x < 0.0) {
        return Err(Error::contract(
            "causal decay entries must be non-negative".to_string(),
        ));
    }
    let (t_len, d) = check_kv(k, v, params.channels())?;
    let kd = k.data();
    let vd = v.data();
    let uu = params.u.data();
    let neg_w: Vec<f64> = params.w.data().iter().map(|&x| -x).collect();

    let mut out = CountedBuf::zeroed(t_len * d);
    let mut state = ScanState::new(d);
    for t in 0..t_len {
        let krow = &kd[t * d..(t + 1) * d];
        let vrow = &vd[t * d..(t + 1) * d];
        let row_out = &mut out.as_mut_slice()[t * d..(t + 1) * d];
        for c in 0..d {
            let decayed = state.max_exp[c] + neg_w[c];
            let bonus = uu[c] + krow[c];
            let q = decayed.max(bonus);
            let eo = if decayed == f64::NEG_INFINITY {
                0.0
            } else {
                (decayed - q).exp()
            };
            let eb = (bonus - q).exp();
            let num = eo * state.num[c] + eb * vrow[c];
            let den = eo * state.den[c] + eb;
            row_out[c] = num / den;
        }
        state.step(&neg_w, krow, vrow);
    }
    Ok(Tensor::from_buf_unchecked(vec![t_len, d], out))
}

/// Stabilized accumulator for the backward scans. Tracks the plain decayed
/// sum (`r`), the distance-weighted sum (`s`) and their value-weighted
/// counterparts, sharing one running maximum exponent.
struct GradScanState {
    r: Vec<f64>,
    r_psi: Vec<f64>,
    s: Vec<f64>,
    s_psi: Vec<f64>,
    p: Vec<f64>,
}

impl GradScanState {
    fn new(d: usize) -> Self {
        GradScanState {
            r: vec![0.0; d],
            r_psi: vec![0.0; d],
            s: vec![0.0; d],
            s_psi: vec![0.0; d],
            p: vec![f64::NEG_INFINITY; d],
        }
    }

    /// Absorbs token i with term mantissas `g` and `g * y` at exponent
    /// `-logD[i]`, after decaying by `e^{neg_omega}`:
    ///   r'     = e^{-omega} r + phi_i
    ///   s'     = e^{-omega} (s + r)
    fn step(&mut self, neg_omega: &[f64], g: &[f64], gy: &[f64], neg_logd: &[f64]) {
        for c in 0..self.r.len() {
            let decayed = self.p[c] + neg_omega[c];
            let q = decayed.max(neg_logd[c]);
            let eo = if decayed == f64::NEG_INFINITY {
                0.0
            } else {
                (decayed - q).exp()
            };
            let en = (neg_logd[c] - q).exp();
            let (r, rp, s, sp) = (self.r[c], self.r_psi[c], self.s[c], self.s_psi[c]);
            self.s[c] = eo * (s + r);
            self.s_psi[c] = eo * (sp + rp);
            self.r[c] = eo * r + en * g[c];
            self.r_psi[c] = eo * rp + en * gy[c];
            self.p[c] = q;
        }
    }
}

/// Analytic gradients of the bidirectional form, O(T * d) time with O(d)
/// scan state. The forward accumulators are recomputed rather than read from
/// stored per-token attention weights.
pub fn bi_wkv_backward(
    k: &Tensor,
    v: &Tensor,
    params: &WkvParams,
    upstream: &Tensor,
) -> Result<WkvGrads> {
    let (t_len, d) = check_kv(k, v, params.channels())?;
    if upstream.shape() != k.shape() {
        return Err(Error::dim(format!(
            "upstream shape {:?} != output shape {:?}",
            upstream.shape(),
            k.shape()
        )));
    }
    let (y, logd) = bi_wkv_scan_with_aux(k, v, params)?;
    let kd = k.data();
    let vd = v.data();
    let gd = upstream.data();
    let yd = y.data();
    let ld = logd.data();
    let u = params.u.data();
    let inv_t = 1.0 / t_len as f64;
    let neg_omega: Vec<f64> = params.w.data().iter().map(|&w| -w * inv_t).collect();

    let mut gk = CountedBuf::zeroed(t_len * d);
    let mut gv = CountedBuf::zeroed(t_len * d);
    let mut gw_acc = vec![0.0; d];
    let mut gu = vec![0.0; d];

    let mut grow = vec![0.0; d];
    let mut gyrow = vec![0.0; d];
    let mut neg_ld = vec![0.0; d];

    // Contributions from outputs t > i (descending pass), then t < i
    // (ascending pass), then the diagonal bonus terms.
    for dir in 0..2 {
        let mut state = GradScanState::new(d);
        let order: Box<dyn Iterator<Item = usize>> = if dir == 0 {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for i in order {
            let krow = &kd[i * d..(i + 1) * d];
            let vrow = &vd[i * d..(i + 1) * d];
            let gkrow = &mut gk.as_mut_slice()[i * d..(i + 1) * d];
            let gvrow = &mut gv.as_mut_slice()[i * d..(i + 1) * d];
            for c in 0..d {
                let base = if state.p[c] == f64::NEG_INFINITY {
                    0.0
                } else {
                    (krow[c] + state.p[c]).exp()
                };
                gvrow[c] += base * state.r[c];
                gkrow[c] += base * (vrow[c] * state.r[c] - state.r_psi[c]);
                gw_acc[c] -= base * (vrow[c] * state.s[c] - state.s_psi[c]);
            }
            for c in 0..d {
                let idx = i * d + c;
                grow[c] = gd[idx];
                gyrow[c] = gd[idx] * yd[idx];
                neg_ld[c] = -ld[idx];
            }
            state.step(&neg_omega, &grow, &gyrow, &neg_ld);
        }
    }

    for i in 0..t_len {
        for c in 0..d {
            let idx = i * d + c;
            let a = (u[c] + kd[idx] - ld[idx]).exp() * gd[idx];
            let diff = vd[idx] - yd[idx];
            gv.as_mut_slice()[idx] += a;
            gk.as_mut_slice()[idx] += a * diff;
            gu[c] += a * diff;
        }
    }

    let gw: Vec<f64> = gw_acc.iter().map(|&g| g * inv_t).collect();
    Ok(WkvGrads {
        k: Tensor::from_buf_unchecked(vec![t_len, d], gk),
        v: Tensor::from_buf_unchecked(vec![t_len, d], gv),
        w: Tensor::from_vec_unchecked(vec![d], gw),
        u: Tensor::from_vec_unchecked(vec![d], gu),
    })
}

/// Quadratic-time gradients computed from the literal summation. Used as the
/// backward of the direct mechanism and as an algebraic cross-check of the
/// scan backward.
pub fn bi_wkv_direct_backward(
    k: &Tensor,
    v: &Tensor,
    params: &WkvParams,
    upstream: &Tensor,
) -> Result<WkvGrads> {
    let (t_len, d) = check_kv(k, v, params.channels())?;
    if upstream.shape() != k.shape() {
        return Err(Error::dim(format!(
            "upstream shape {:?} != output shape {:?}",
            upstream.shape(),
            k.shape()
        )));
    }
    let (y, logd) = bi_wkv_direct_with_aux(k, v, params)?;
    let kd = k.data();
    let vd = v.data();
    let gd = upstream.data();
    let yd = y.data();
    let ld = logd.data();
    let u = params.u.data();
    let w = params.w.data();
    let inv_t = 1.0 / t_len as f64;

    let mut gk = CountedBuf::zeroed(t_len * d);
    let mut gv = CountedBuf::zeroed(t_len * d);
    let mut gw_acc = vec![0.0; d];
    let mut gu = vec![0.0; d];

    for t in 0..t_len {
        for i in 0..t_len {
            let dist = (t as f64 - i as f64).abs() - 1.0;
            for c in 0..d {
                let s = if i == t {
                    u[c] + kd[i * d + c]
                } else {
                    -dist * inv_t * w[c] + kd[i * d + c]
                };
                let a = (s - ld[t * d + c]).exp() * gd[t * d + c];
                let diff = vd[i * d + c] - yd[t * d + c];
                gv.as_mut_slice()[i * d + c] += a;
                gk.as_mut_slice()[i * d + c] += a * diff;
                if i == t {
                    gu[c] += a * diff;
                } else {
                    gw_acc[c] -= dist * a * diff;
                }
            }
        }
    }

    let gw: Vec<f64> = gw_acc.iter().map(|&g| g * inv_t).collect();
    Ok(WkvGrads {
        k: Tensor::from_buf_unchecked(vec![t_len, d], gk),
        v: Tensor::from_buf_unchecked(vec![t_len, d], gv),
        w: Tensor::from_vec_unchecked(vec![d], gw),
        u: Tensor::from_vec_unchecked(vec![d], gu),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn kv(t: usize, d: usize, k: &[f64], v: &[f64]) -> (Tensor, Tensor) {
        (
            Tensor::new(vec![t, d], k.to_vec()).unwrap(),
            Tensor::new(vec![t, d], v.to_vec()).unwrap(),
        )
    }

    fn params(w: &[f64], u: &[f64]) -> WkvParams {
        WkvParams::new(
            Tensor::new(vec![w.len()], w.to_vec()).unwrap(),
            Tensor::new(vec![u.len()], u.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn constant_values_pass_through() {
        // Weights normalize to a convex combination, so constant V is fixed.
        let (k, v) = kv(4, 2, &[0.3, -1.0, 2.0, 0.1, -0.7, 0.9, 0.0, 0.4], &[5.0; 8]);
        let p = params(&[0.8, -0.3], &[0.2, 0.5]);
        for f in [bi_wkv_direct, bi_wkv_scan] {
            let out = f(&k, &v, &p).unwrap();
            for &x in out.data() {
                assert!((x - 5.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_weights_give_arithmetic_mean() {
        let (k, v) = kv(2, 1, &[0.0, 0.0], &[1.0, 3.0]);
        let p = params(&[0.0], &[0.0]);
        let out = bi_wkv_direct(&k, &v, &p).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-14);
        assert!((out.data()[1] - 2.0).abs() < 1e-14);
        let out2 = bi_wkv_scan(&k, &v, &p).unwrap();
        assert!((out2.data()[0] - 2.0).abs() < 1e-14);
        assert!((out2.data()[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_token_is_its_own_value() {
        // Only the bonus term survives at T = 1.
        let (k, v) = kv(1, 3, &[0.5, -2.0, 1.0], &[7.0, -1.0, 0.25]);
        let p = params(&[1.5, -0.5, 0.0], &[0.3, 0.0, -2.0]);
        let direct = bi_wkv_direct(&k, &v, &p).unwrap();
        let scan = bi_wkv_scan(&k, &v, &p).unwrap();
        for c in 0..3 {
            assert!((direct.data()[c] - v.data()[c]).abs() < 1e-14);
            assert!((scan.data()[c] - direct.data()[c]).abs() < 1e-14);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let k = Tensor::zeros(vec![0, 2]);
        let v = Tensor::zeros(vec![0, 2]);
        let p = params(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(
            bi_wkv_direct(&k, &v, &p),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(bi_wkv_scan(&k, &v, &p), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn large_keys_do_not_overflow() {
        // Raw e^k would overflow; the stabilized paths must not.
        let (k, v) = kv(3, 1, &[800.0, -800.0, 750.0], &[1.0, 2.0, 3.0]);
        let p = params(&[5.0], &[2.0]);
        let direct = bi_wkv_direct(&k, &v, &p).unwrap();
        let scan = bi_wkv_scan(&k, &v, &p).unwrap();
        for c in 0..3 {
            assert!(direct.data()[c].is_finite());
            assert!((scan.data()[c] - direct.data()[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_first_token_is_value() {
        let (k, v) = kv(3, 2, &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Tensor::new(vec![2], vec![0.7, 1.3]).unwrap();
        let u = Tensor::new(vec![2], vec![0.2, -0.1]).unwrap();
        let out = causal_wkv(&k, &v, &w, &u).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-14);
        assert!((out.data()[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn causal_uniform_is_running_mean() {
        let (k, v) = kv(4, 1, &[0.0; 4], &[1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::zeros(vec![1]);
        let u = Tensor::zeros(vec![1]);
        let out = causal_wkv(&k, &v, &w, &u).unwrap();
        for (got, expect) in out.data().iter().zip([1.0, 1.5, 2.0, 2.5]) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_rejects_negative_decay() {
        let (k, v) = kv(2, 1, &[0.0, 0.0], &[1.0, 2.0]);
        let w = Tensor::new(vec![1], vec![-0.1]).unwrap();
        let u = Tensor::zeros(vec![1]);
        assert!(matches!(
            causal_wkv(&k, &v, &w, &u),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut r = rng::stream(3, 99);
        let k = rng::uniform_tensor(&mut r, vec![5, 3], -2.0, 2.0);
        let v = rng::uniform_tensor(&mut r, vec![5, 3], -2.0, 2.0);
        let p = params(&[0.4, -0.2, 0.9], &[0.1, 0.0, -0.3]);
        let g = Tensor::zeros(vec![5, 3]);
        let grads = bi_wkv_backward(&k, &v, &p, &g).unwrap();
        assert!(grads.k.data().iter().all(|&x| x == 0.0));
        assert!(grads.v.data().iter().all(|&x| x == 0.0));
        assert!(grads.w.data().iter().all(|&x| x == 0.0));
        assert!(grads.u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_values_have_zero_decay_gradient() {
        // With all v_i equal the output is constant in w on that channel.
        let mut r = rng::stream(5, 98);
        let k = rng::uniform_tensor(&mut r, vec![6, 2], -2.0, 2.0);
        let v = Tensor::full(vec![6, 2], 3.5).unwrap();
        let p = params(&[0.7, -0.4], &[0.2, 0.1]);
        let mut g = vec![0.0; 12];
        g[0] = 1.0; // upstream on token 0, channel 0 only
        let g = Tensor::new(vec![6, 2], g).unwrap();
        let grads = bi_wkv_backward(&k, &v, &p, &g).unwrap();
        assert!(grads.w.data()[0].abs() < 1e-12);
        assert!(grads.k.data().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn scan_and_direct_backwards_agree() {
        let mut r = rng::stream(11, 97);
        let k = rng::uniform_tensor(&mut r, vec![9, 4], -3.0, 3.0);
        let v = rng::uniform_tensor(&mut r, vec![9, 4], -3.0, 3.0);
        let w = rng::uniform_tensor(&mut r, vec![4], -1.0, 1.0);
        let u = rng::uniform_tensor(&mut r, vec![4], -1.0, 1.0);
        let p = WkvParams::new(w, u).unwrap();
        let g = rng::uniform_tensor(&mut r, vec![9, 4], -1.0, 1.0);
        let a = bi_wkv_backward(&k, &v, &p, &g).unwrap();
        let b = bi_wkv_direct_backward(&k, &v, &p, &g).unwrap();
        for (x, y) in a.k.data().iter().zip(b.k.data()) {
            assert!((x - y).abs() < 1e-9, "gk {x} vs {y}");
        }
        for (x, y) in a.v.data().iter().zip(b.v.data()) {
            assert!((x - y).abs() < 1e-9, "gv {x} vs {y}");
        }
        for (x, y) in a.w.data().iter().zip(b.w.data()) {
            assert!((x - y).abs() < 1e-9, "gw {x} vs {y}");
        }
        for (x, y) in a.u.data().iter().zip(b.u.data()) {
            assert!((x - y).abs() < 1e-9, "gu {x} vs {y}");
        }
    }

    #[test]
    fn perturbation_hook_breaks_equivalence() {
        let mut r = rng::stream(21, 96);
        let k = rng::uniform_tensor(&mut r, vec![8, 2], -1.0, 1.0);
        let v = rng::uniform_tensor(&mut r, vec![8, 2], -1.0, 1.0);
        let p = params(&[0.9, 1.4], &[0.3, -0.2]);
        let clean = bi_wkv_scan(&k, &v, &p).unwrap();
        set_scan_perturbation(1.0 + 1e-3);
        let dirty = bi_wkv_scan(&k, &v, &p).unwrap();
        set_scan_perturbation(1.0);
        let direct = bi_wkv_direct(&k, &v, &p).unwrap();
        let max_clean: f64 = clean
            .data()
            .iter()
            .zip(direct.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let max_dirty: f64 = dirty
            .data()
            .iter()
            .zip(direct.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_clean < 1e-12);
        assert!(max_dirty > 1e-6);
    }

    #[test]
    fn parallel_scan_matches_serial_bitwise() {
        // The directional passes merge in a fixed order, so the opt-in
        // parallelism cannot change results.
        let mut r = rng::stream(31, 95);
        let k = rng::uniform_tensor(&mut r, vec![33, 5], -2.0, 2.0);
        let v = rng::uniform_tensor(&mut r, vec![33, 5], -2.0, 2.0);
        let p = WkvParams::new(
            rng::uniform_tensor(&mut r, vec![5], -1.0, 1.0),
            rng::uniform_tensor(&mut r, vec![5], -1.0, 1.0),
        )
        .unwrap();
        let serial = bi_wkv_scan(&k, &v, &p).unwrap();
        crate::config::set_parallelism(true);
        let parallel = bi_wkv_scan(&k, &v, &p).unwrap();
        crate::config::set_parallelism(false);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn scan_state_reconstruction_is_shift_invariant() {
        let mut s = ScanState::new(1);
        s.step(&[-0.25], &[0.4], &[2.0]);
        s.step(&[-0.25], &[-0.1], &[5.0]);
        let ratio = s.num[0] / s.den[0];
        // Shifting the max exponent and rescaling the mantissas by the same
        // factor leaves the represented value unchanged.
        let shift = 3.7;
        let scaled_ratio = (s.num[0] * (-shift_exp(shift))) / (s.den[0] * (-shift_exp(shift)));
        assert!((ratio - scaled_ratio).abs() < 1e-12);

        fn shift_exp(s: f64) -> f64 {
            -(s.exp())
        }
    }
}
