//! The VRWKV spatio-temporal layer over a frames-by-patches token grid.
//!
//! Per frame the layer runs two sub-blocks and a residual sum:
//! time mixing (temporal blend with the previous frame, quad-directional
//! shift, linear projections, bidirectional WKV aggregation under a sigmoid
//! receptance gate) and channel mixing (the same blend/shift/project pattern
//! feeding a squared-ReLU feedforward gate). The composition order is
//! blend, then shift, then project.
//!
//! The first frame has no predecessor; it blends with itself, which keeps the
//! interpolation exact at every mixing factor instead of injecting a zero
//! frame.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::uniform_tensor;
use crate::tensor::Tensor;
use crate::wkv::{bi_wkv_scan, WkvParams};

/// Patch-grid extents; tokens are laid out row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize) -> Self {
        PatchGrid { h, w }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// Structural settings of a block application.
#[derive(Clone, Copy, Debug)]
pub struct BlockConfig {
    pub grid: PatchGrid,
    /// Shift distance in patch positions.
    pub shift_px: usize,
    /// Fraction of channels per shift direction; 1/4 shifts every channel.
    pub gamma: f64,
    /// When set, the WKV recurrence runs over all frames' tokens flattened
    /// into one sequence instead of per frame.
    pub joint_tokens: bool,
    /// Channel-group count. Grouping does not change the per-channel WKV
    /// math; the field exists for configuration parity and is validated for
    /// divisibility only.
    pub heads: usize,
}

impl BlockConfig {
    pub fn new(grid: PatchGrid) -> Self {
        BlockConfig {
            grid,
            shift_px: 1,
            gamma: 0.25,
            joint_tokens: false,
            heads: 1,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.grid.tokens() == 0 {
            return Err(Error::config("patch grid has zero tokens"));
        }
        group_size(d, self.gamma)?;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "head count {} must divide channel count {d}",
                self.heads
            )));
        }
        Ok(())
    }
}

fn group_size(d: usize, gamma: f64) -> Result<usize> {
    if !(0.0..=0.25).contains(&gamma) {
        return Err(Error::config(format!(
            "shift fraction gamma {gamma} outside [0, 1/4]"
        )));
    }
    let gs_f = gamma * d as f64;
    let gs = gs_f.round();
    if (gs_f - gs).abs() > 1e-9 {
        return Err(Error::config(format!(
            "gamma {gamma} times {d} channels is not an integer group size"
        )));
    }
    Ok(gs as usize)
}

#[derive(Clone, Copy)]
enum ShiftDir {
    Right,
    Left,
    Down,
    Up,
}

impl ShiftDir {
    fn inverted(self) -> ShiftDir {
        match self {
            ShiftDir::Right => ShiftDir::Left,
            ShiftDir::Left => ShiftDir::Right,
            ShiftDir::Down => ShiftDir::Up,
            ShiftDir::Up => ShiftDir::Down,
        }
    }
}

const SHIFT_ORDER: [ShiftDir; 4] = [
    ShiftDir::Right,
    ShiftDir::Left,
    ShiftDir::Down,
    ShiftDir::Up,
];

fn shifted_source(dir: ShiftDir, r: usize, c: usize, s: usize, grid: PatchGrid) -> Option<usize> {
    let (src_r, src_c) = match dir {
        ShiftDir::Right => (Some(r), c.checked_sub(s)),
        ShiftDir::Left => (Some(r), c.checked_add(s).filter(|&x| x < grid.w)),
        ShiftDir::Down => (r.checked_sub(s), Some(c)),
        ShiftDir::Up => (r.checked_add(s).filter(|&x| x < grid.h), Some(c)),
    };
    match (src_r, src_c) {
        (Some(sr), Some(sc)) => Some(sr * grid.w + sc),
        _ => None,
    }
}

fn q_shift_impl(
    x: &Tensor,
    grid: PatchGrid,
    shift: usize,
    gamma: f64,
    invert: bool,
) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::dim(format!(
            "q_shift expects rank 2, got {:?}",
            x.shape()
        )));
    }
    let (tokens, d) = (x.shape()[0], x.shape()[1]);
    if tokens != grid.tokens() {
        return Err(Error::dim(format!(
            "q_shift: {tokens} tokens but grid {}x{}",
            grid.h, grid.w
        )));
    }
    let gs = group_size(d, gamma)?;
    let xd = x.data();
    let mut out = vec![0.0; tokens * d];

    // Pass-through channels beyond the four shifted groups.
    for t in 0..tokens {
        out[t * d + 4 * gs..(t + 1) * d].copy_from_slice(&xd[t * d + 4 * gs..(t + 1) * d]);
    }
    if shift == 0 {
        for t in 0..tokens {
            out[t * d..t * d + 4 * gs].copy_from_slice(&xd[t * d..t * d + 4 * gs]);
        }
        return Ok(Tensor::from_vec_unchecked(vec![tokens, d], out));
    }
    for (g, dir) in SHIFT_ORDER.iter().enumerate() {
        let dir = if invert { dir.inverted() } else { *dir };
        let lo = g * gs;
        let hi = lo + gs;
        for r in 0..grid.h {
            for c in 0..grid.w {
                if let Some(src) = shifted_source(dir, r, c, shift, grid) {
                    let dst = r * grid.w + c;
                    out[dst * d + lo..dst * d + hi]
                        .copy_from_slice(&xd[src * d + lo..src * d + hi]);
                }
            }
        }
    }
    Ok(Tensor::from_vec_unchecked(vec![tokens, d], out))
}

/// Quad-directional token shift. Channels split into four groups of
/// `gamma * d`; the groups shift right, left, down and up by `shift` patch
/// positions with zero padding at the grid boundary, and any remaining
/// channels pass through unchanged.
pub fn q_shift(x: &Tensor, grid: PatchGrid, shift: usize, gamma: f64) -> Result<Tensor> {
    q_shift_impl(x, grid, shift, gamma, false)
}

/// Adjoint of `q_shift` (each group shifted the opposite way); used by the
/// gradient tape.
pub(crate) fn q_shift_adjoint(
    g: &Tensor,
    grid: PatchGrid,
    shift: usize,
    gamma: f64,
) -> Result<Tensor> {
    q_shift_impl(g, grid, shift, gamma, true)
}

/// All learnable tensors of one layer.
#[derive(Clone, Debug)]
pub struct VrwkvBlockParams {
    pub w_r: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub mu_r: Tensor,
    pub mu_k: Tensor,
    pub mu_v: Tensor,
    pub wkv: WkvParams,
    pub w_rc: Tensor,
    pub w_kc: Tensor,
    pub mu_rc: Tensor,
    pub mu_kc: Tensor,
    pub w_c: Tensor,
}

impl VrwkvBlockParams {
    /// Random initialization: projections uniform in +-1/sqrt(d),
    /// interpolation factors at 0.5 (or 1.0 in local mode, which starts the
    /// blend as pure current-frame, local-attention-like behavior), decay and
    /// bonus at zero.
    pub fn init(d: usize, rng: &mut ChaCha8Rng, local_init: bool) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let mut proj = || uniform_tensor(rng, vec![d, d], -s, s);
        let w_r = proj();
        let w_k = proj();
        let w_v = proj();
        let w_rc = proj();
        let w_kc = proj();
        let w_c = proj();
        let mu_val = if local_init { 1.0 } else { 0.5 };
        let mu = Tensor::full(vec![d], mu_val).unwrap();
        VrwkvBlockParams {
            w_r,
            w_k,
            w_v,
            mu_r: mu.clone(),
            mu_k: mu.clone(),
            mu_v: mu.clone(),
            wkv: WkvParams::zeros(d),
            w_rc,
            w_kc,
            mu_rc: mu.clone(),
            mu_kc: mu,
            w_c,
        }
    }

    /// All-zero parameters; with these the block is the identity map.
    pub fn zeroed(d: usize) -> Self {
        let z2 = Tensor::zeros(vec![d, d]);
        let z1 = Tensor::zeros(vec![d]);
        VrwkvBlockParams {
            w_r: z2.clone(),
            w_k: z2.clone(),
            w_v: z2.clone(),
            mu_r: z1.clone(),
            mu_k: z1.clone(),
            mu_v: z1.clone(),
            wkv: WkvParams::zeros(d),
            w_rc: z2.clone(),
            w_kc: z2.clone(),
            mu_rc: z1.clone(),
            mu_kc: z1,
            w_c: z2,
        }
    }

    pub fn channels(&self) -> usize {
        self.mu_r.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        for (name, t, shape) in self.named_with_shapes(d) {
            if t.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "block parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for (name, mu) in [
            ("mu_r", &self.mu_r),
            ("mu_k", &self.mu_k),
            ("mu_v", &self.mu_v),
            ("mu_rc", &self.mu_rc),
            ("mu_kc", &self.mu_kc),
        ] {
            if mu.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::config(format!(
                    "interpolation factor {name} has entries outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn named_with_shapes(&self, d: usize) -> Vec<(&'static str, &Tensor, Vec<usize>)> {
        vec![
            ("w_r", &self.w_r, vec![d, d]),
            ("w_k", &self.w_k, vec![d, d]),
            ("w_v", &self.w_v, vec![d, d]),
            ("mu_r", &self.mu_r, vec![d]),
            ("mu_k", &self.mu_k, vec![d]),
            ("mu_v", &self.mu_v, vec![d]),
            ("wkv_w", &self.wkv.w, vec![d]),
            ("wkv_u", &self.wkv.u, vec![d]),
            ("w_rc", &self.w_rc, vec![d, d]),
            ("w_kc", &self.w_kc, vec![d, d]),
            ("mu_rc", &self.mu_rc, vec![d]),
            ("mu_kc", &self.mu_kc, vec![d]),
            ("w_c", &self.w_c, vec![d, d]),
        ]
    }

    /// Stable (name, tensor) listing for checkpoints and optimizers.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        self.named_with_shapes(self.channels())
            .into_iter()
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn from_named(d: usize, lookup: impl Fn(&str) -> Result<Tensor>) -> Result<Self> {
        let mut p = VrwkvBlockParams::zeroed(d);
        p.w_r = lookup("w_r")?;
        p.w_k = lookup("w_k")?;
        p.w_v = lookup("w_v")?;
        p.mu_r = lookup("mu_r")?;
        p.mu_k = lookup("mu_k")?;
        p.mu_v = lookup("mu_v")?;
        p.wkv = WkvParams::new(lookup("wkv_w")?, lookup("wkv_u")?)?;
        p.w_rc = lookup("w_rc")?;
        p.w_kc = lookup("w_kc")?;
        p.mu_rc = lookup("mu_rc")?;
        p.mu_kc = lookup("mu_kc")?;
        p.w_c = lookup("w_c")?;
        p.validate()?;
        Ok(p)
    }
}

/// Tape-registered counterpart of `VrwkvBlockParams`.
pub struct BlockVars {
    pub w_r: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub mu_r: Var,
    pub mu_k: Var,
    pub mu_v: Var,
    pub wkv_w: Var,
    pub wkv_u: Var,
    pub w_rc: Var,
    pub w_kc: Var,
    pub mu_rc: Var,
    pub mu_kc: Var,
    pub w_c: Var,
}

impl VrwkvBlockParams {
    pub fn vars(&self, tape: &Tape) -> BlockVars {
        BlockVars {
            w_r: tape.leaf(self.w_r.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            mu_r: tape.leaf(self.mu_r.clone()),
            mu_k: tape.leaf(self.mu_k.clone()),
            mu_v: tape.leaf(self.mu_v.clone()),
            wkv_w: tape.leaf(self.wkv.w.clone()),
            wkv_u: tape.leaf(self.wkv.u.clone()),
            w_rc: tape.leaf(self.w_rc.clone()),
            w_kc: tape.leaf(self.w_kc.clone()),
            mu_rc: tape.leaf(self.mu_rc.clone()),
            mu_kc: tape.leaf(self.mu_kc.clone()),
            w_c: tape.leaf(self.w_c.clone()),
        }
    }
}

impl BlockVars {
    /// Leaves in the same order as `VrwkvBlockParams::named_tensors`.
    pub fn named_vars(&self) -> Vec<(&'static str, &Var)> {
        vec![
            ("w_r", &self.w_r),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("mu_r", &self.mu_r),
            ("mu_k", &self.mu_k),
            ("mu_v", &self.mu_v),
            ("wkv_w", &self.wkv_w),
            ("wkv_u", &self.wkv_u),
            ("w_rc", &self.w_rc),
            ("w_kc", &self.w_kc),
            ("mu_rc", &self.mu_rc),
            ("mu_kc", &self.mu_kc),
            ("w_c", &self.w_c),
        ]
    }
}

/// Blend with the previous representation, shift on the patch grid, project.
fn mix_project(x: &Var, x_prev: &Var, mu: &Var, w: &Var, cfg: &BlockConfig) -> Result<Var> {
    let blended = x.lerp_rows(x_prev, mu)?;
    let shifted = blended.q_shift(cfg.grid, cfg.shift_px, cfg.gamma)?;
    shifted.matmul(w)
}

/// Receptance/key/value projections from the blended frame pair.
pub fn time_mix_var(
    x: &Var,
    x_prev: &Var,
    vars: &BlockVars,
    cfg: &BlockConfig,
) -> Result<(Var, Var, Var)> {
    let r = mix_project(x, x_prev, &vars.mu_r, &vars.w_r, cfg)?;
    let k = mix_project(x, x_prev, &vars.mu_k, &vars.w_k, cfg)?;
    let v = mix_project(x, x_prev, &vars.mu_v, &vars.w_v, cfg)?;
    Ok((r, k, v))
}

/// Sigmoid receptance gate over the bidirectional WKV aggregation.
pub fn spatial_aggregate_var(r: &Var, k: &Var, v: &Var, w: &Var, u: &Var) -> Result<Var> {
    let wkv = k.bi_wkv(v, w, u)?;
    r.sigmoid().mul(&wkv)
}

/// Squared-ReLU channel mixer under its own receptance gate.
pub fn channel_mix_var(o: &Var, o_prev: &Var, vars: &BlockVars, cfg: &BlockConfig) -> Result<Var> {
    let r_c = mix_project(o, o_prev, &vars.mu_rc, &vars.w_rc, cfg)?;
    let k_c = mix_project(o, o_prev, &vars.mu_kc, &vars.w_kc, cfg)?;
    let inner = k_c.matmul(&vars.w_c)?;
    r_c.sigmoid().mul(&inner.relu_sq())
}

/// Full layer over `frames` stacked token grids (rows = frames * tokens).
pub fn block_forward_var(
    x: &Var,
    frames: usize,
    vars: &BlockVars,
    cfg: &BlockConfig,
) -> Result<Var> {
    let n = cfg.grid.tokens();
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != frames * n {
        return Err(Error::dim(format!(
            "block input rows {:?} != frames {frames} x tokens {n}",
            shape
        )));
    }

    // Phase 1: time mixing per frame. Every frame reads the untransformed
    // previous frame, so the frames are independent given the input.
    let mut gated = Vec::with_capacity(frames);
    if cfg.joint_tokens {
        let mut rs = Vec::with_capacity(frames);
        let mut ks = Vec::with_capacity(frames);
        let mut vs = Vec::with_capacity(frames);
        for t in 0..frames {
            let x_t = x.slice_rows(t * n, n)?;
            let x_prev = x.slice_rows(t.saturating_sub(1) * n, n)?;
            let (r, k, v) = time_mix_var(&x_t, &x_prev, vars, cfg)?;
            rs.push(r);
            ks.push(k);
            vs.push(v);
        }
        let r_all = x.tape().concat_rows(&rs.iter().collect::<Vec<_>>())?;
        let k_all = x.tape().concat_rows(&ks.iter().collect::<Vec<_>>())?;
        let v_all = x.tape().concat_rows(&vs.iter().collect::<Vec<_>>())?;
        let o_all = spatial_aggregate_var(&r_all, &k_all, &v_all, &vars.wkv_w, &vars.wkv_u)?;
        for t in 0..frames {
            gated.push(o_all.slice_rows(t * n, n)?);
        }
    } else {
        for t in 0..frames {
            let x_t = x.slice_rows(t * n, n)?;
            let x_prev = x.slice_rows(t.saturating_sub(1) * n, n)?;
            let (r, k, v) = time_mix_var(&x_t, &x_prev, vars, cfg)?;
            gated.push(spatial_aggregate_var(&r, &k, &v, &vars.wkv_w, &vars.wkv_u)?);
        }
    }

    // Phase 2: channel mixing over the gated outputs, previous-frame blend.
    let mut mixed = Vec::with_capacity(frames);
    for t in 0..frames {
        let o_prev = &gated[t.saturating_sub(1)];
        mixed.push(channel_mix_var(&gated[t], o_prev, vars, cfg)?);
    }

    let o_cat = x.tape().concat_rows(&gated.iter().collect::<Vec<_>>())?;
    let cm_cat = x.tape().concat_rows(&mixed.iter().collect::<Vec<_>>())?;
    x.add(&o_cat)?.add(&cm_cat)
}

fn run_block_tensor<T>(
    build: impl FnOnce(&Tape) -> Result<T>,
) -> Result<T> {
    let tape = Tape::new();
    build(&tape)
}

/// Tensor-level time mixing (records on a throwaway tape).
pub fn time_mix(
    x_t: &Tensor,
    x_prev: &Tensor,
    params: &VrwkvBlockParams,
    cfg: &BlockConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    params.validate()?;
    cfg.validate(params.channels())?;
    run_block_tensor(|tape| {
        let vars = params.vars(tape);
        let x = tape.leaf(x_t.clone());
        let xp = tape.leaf(x_prev.clone());
        let (r, k, v) = time_mix_var(&x, &xp, &vars, cfg)?;
        Ok((r.value(), k.value(), v.value()))
    })
}

/// Tensor-level receptance gating: `sigmoid(R) * bi_wkv_scan(K, V)`.
pub fn spatial_aggregate(
    r: &Tensor,
    k: &Tensor,
    v: &Tensor,
    wkv_params: &WkvParams,
) -> Result<Tensor> {
    if r.shape() != k.shape() {
        return Err(Error::dim(format!(
            "receptance shape {:?} != key shape {:?}",
            r.shape(),
            k.shape()
        )));
    }
    let wkv = bi_wkv_scan(k, v, wkv_params)?;
    r.sigmoid().mul(&wkv)
}

/// Tensor-level channel mixing.
pub fn channel_mix(
    o_t: &Tensor,
    o_prev: &Tensor,
    params: &VrwkvBlockParams,
    cfg: &BlockConfig,
) -> Result<Tensor> {
    params.validate()?;
    cfg.validate(params.channels())?;
    run_block_tensor(|tape| {
        let vars = params.vars(tape);
        let o = tape.leaf(o_t.clone());
        let op = tape.leaf(o_prev.clone());
        Ok(channel_mix_var(&o, &op, &vars, cfg)?.value())
    })
}

/// Tensor-level full layer over a `[frames, tokens, d]` input.
pub fn block_forward(x: &Tensor, params: &VrwkvBlockParams, cfg: &BlockConfig) -> Result<Tensor> {
    params.validate()?;
    cfg.validate(params.channels())?;
    if x.rank() != 3 {
        return Err(Error::dim(format!(
            "block_forward expects [frames, tokens, d], got {:?}",
            x.shape()
        )));
    }
    let (f, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if n != cfg.grid.tokens() {
        return Err(Error::dim(format!(
            "token count {n} does not match grid {}x{}",
            cfg.grid.h, cfg.grid.w
        )));
    }
    let flat = x.reshape(vec![f * n, d])?;
    let out = run_block_tensor(|tape| {
        let vars = params.vars(tape);
        let xv = tape.leaf(flat);
        Ok(block_forward_var(&xv, f, &vars, cfg)?.value())
    })?;
    out.reshape(vec![f, n, d])
}
