//! Deterministic runtime and memory instrumentation for the attention
//! mechanisms, plus log-log slope fitting and report emission.
//!
//! Timing uses the monotonic clock, at least two discarded warmup runs and
//! the median of at least five repeats. Memory is the high-water mark of
//! live 64-bit elements in the counting arena during one forward plus
//! backward, which is deterministic and directly comparable to closed-form
//! element counts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::arena;
use crate::attention::{
    softmax_attention, softmax_attention_backward, sparse_causal_attention,
    sparse_causal_attention_backward, windowed_attention, windowed_attention_backward,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::wkv::{bi_wkv_backward, bi_wkv_direct, bi_wkv_direct_backward, bi_wkv_scan, WkvParams};

/// One benchmark observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mechanism: String,
    /// Tokens, or tokens-per-frame for the per-frame mechanisms.
    pub size: usize,
    pub d: usize,
    pub repeats: usize,
    /// Median of per-repeat forward+backward wall time.
    pub median_ns: u64,
    /// Median forward wall time.
    pub fwd_ns: u64,
    /// Median backward wall time.
    pub bwd_ns: u64,
    /// High-water live element count during one forward+backward.
    pub peak_elems: u64,
    pub skipped: bool,
}

/// The mechanisms the harness knows how to drive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    /// Linear-time bidirectional WKV.
    BiWkvScan,
    /// Quadratic direct-summation bidirectional WKV.
    BiWkvDirect,
    /// Full softmax attention with a materialized score matrix.
    SoftmaxFull,
    /// Per-frame sparse-causal attention; size axis is tokens per frame.
    SparseCausal,
    /// Per-frame bidirectional WKV scan; size axis is tokens per frame.
    WkvPerFrame,
    /// Non-overlapping window attention at a fixed window width.
    WindowedFixed,
    /// Window attention with the window proportional to sqrt(T).
    WindowedSqrt,
}

pub const ALL_MECHANISMS: [Mechanism; 7] = [
    Mechanism::BiWkvScan,
    Mechanism::BiWkvDirect,
    Mechanism::SoftmaxFull,
    Mechanism::SparseCausal,
    Mechanism::WkvPerFrame,
    Mechanism::WindowedFixed,
    Mechanism::WindowedSqrt,
];

impl Mechanism {
    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::BiWkvScan => "scan",
            Mechanism::BiWkvDirect => "direct",
            Mechanism::SoftmaxFull => "softmax",
            Mechanism::SparseCausal => "sparse_causal",
            Mechanism::WkvPerFrame => "wkv_frame",
            Mechanism::WindowedFixed => "windowed_fixed",
            Mechanism::WindowedSqrt => "windowed_sqrt",
        }
    }

    /// Whether the size axis means tokens per frame rather than tokens.
    pub fn per_frame(&self) -> bool {
        matches!(self, Mechanism::SparseCausal | Mechanism::WkvPerFrame)
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scan" => Ok(Mechanism::BiWkvScan),
            "direct" => Ok(Mechanism::BiWkvDirect),
            "softmax" => Ok(Mechanism::SoftmaxFull),
            "sparse_causal" => Ok(Mechanism::SparseCausal),
            "wkv_frame" => Ok(Mechanism::WkvPerFrame),
            "windowed_fixed" => Ok(Mechanism::WindowedFixed),
            "windowed_sqrt" => Ok(Mechanism::WindowedSqrt),
            other => Err(Error::config(format!("unknown mechanism {other:?}"))),
        }
    }
}

/// Suite configuration.
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub mechanisms: Vec<Mechanism>,
    /// Strictly increasing problem sizes.
    pub sizes: Vec<usize>,
    pub d: usize,
    /// Timed repeats per case, at least 5; the median is reported.
    pub repeats: usize,
    /// Discarded warmup runs per case, at least 2.
    pub warmup: usize,
    /// Frame count for the per-frame mechanisms.
    pub frames: usize,
    /// Window width of the fixed windowed mechanism.
    pub window: usize,
    pub seed: u64,
    /// A case whose analytic element count exceeds this is recorded skipped.
    pub element_budget: u64,
    /// Fill `peak_elems` through the counting arena.
    pub measure_memory: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            mechanisms: vec![
                Mechanism::BiWkvScan,
                Mechanism::BiWkvDirect,
                Mechanism::SoftmaxFull,
            ],
            sizes: vec![256, 512, 1024, 2048, 4096],
            d: 32,
            repeats: 5,
            warmup: 2,
            frames: 4,
            window: 64,
            seed: 42,
            element_budget: 300_000_000,
            measure_memory: true,
        }
    }
}

enum Inputs {
    Kv {
        k: Tensor,
        v: Tensor,
        params: WkvParams,
        upstream: Tensor,
    },
    Qkv {
        q: Tensor,
        k: Tensor,
        v: Tensor,
        upstream: Tensor,
        window: Option<usize>,
    },
    Frames {
        z: Tensor,
        upstream: Tensor,
        per_frame_wkv: Option<WkvParams>,
    },
}

fn sqrt_window(t: usize) -> usize {
    ((t as f64).sqrt().round() as usize).clamp(1, t)
}

fn prepare(mech: Mechanism, size: usize, d: usize, frames: usize, window: usize, seed: u64) -> Inputs {
    // One stream per (mechanism, size) so cases are independent of suite
    // composition.
    let stream_id = rng::stream_ids::BENCH
        .wrapping_add((size as u64) << 8)
        .wrapping_add(mech.name().len() as u64);
    let mut r = rng::stream(seed, stream_id);
    match mech {
        Mechanism::BiWkvScan | Mechanism::BiWkvDirect => Inputs::Kv {
            k: rng::uniform_tensor(&mut r, vec![size, d], -1.0, 1.0),
            v: rng::uniform_tensor(&mut r, vec![size, d], -1.0, 1.0),
            params: WkvParams::new(
                rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
                rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
            )
            .expect("wkv params"),
            upstream: Tensor::full(vec![size, d], 1.0).expect("upstream"),
        },
        Mechanism::SoftmaxFull | Mechanism::WindowedFixed | Mechanism::WindowedSqrt => {
            let win = match mech {
                Mechanism::WindowedFixed => Some(window.clamp(1, size)),
                Mechanism::WindowedSqrt => Some(sqrt_window(size)),
                _ => None,
            };
            Inputs::Qkv {
                q: rng::uniform_tensor(&mut r, vec![size, d], -1.0, 1.0),
                k: rng::uniform_tensor(&mut r, vec![size, d], -1.0, 1.0),
                v: rng::uniform_tensor(&mut r, vec![size, d], -1.0, 1.0),
                upstream: Tensor::full(vec![size, d], 1.0).expect("upstream"),
                window: win,
            }
        }
        Mechanism::SparseCausal | Mechanism::WkvPerFrame => {
            let per_frame_wkv = if mech == Mechanism::WkvPerFrame {
                Some(
                    WkvParams::new(
                        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
                        rng::uniform_tensor(&mut r, vec![d], -1.0, 1.0),
                    )
                    .expect("wkv params"),
                )
            } else {
                None
            };
            Inputs::Frames {
                z: rng::uniform_tensor(&mut r, vec![frames, size, d], -1.0, 1.0),
                upstream: Tensor::full(vec![frames, size, d], 1.0).expect("upstream"),
                per_frame_wkv,
            }
        }
    }
}

fn run_forward(mech: Mechanism, inputs: &Inputs) -> Result<Tensor> {
    match (mech, inputs) {
        (Mechanism::BiWkvScan, Inputs::Kv { k, v, params, .. }) => bi_wkv_scan(k, v, params),
        (Mechanism::BiWkvDirect, Inputs::Kv { k, v, params, .. }) => bi_wkv_direct(k, v, params),
        (Mechanism::SoftmaxFull, Inputs::Qkv { q, k, v, .. }) => softmax_attention(q, k, v, true),
        (
            Mechanism::WindowedFixed | Mechanism::WindowedSqrt,
            Inputs::Qkv {
                q, k, v, window, ..
            },
        ) => windowed_attention(q, k, v, window.unwrap(), true),
        (Mechanism::SparseCausal, Inputs::Frames { z, .. }) => sparse_causal_attention(z, true),
        (Mechanism::WkvPerFrame, Inputs::Frames { z, per_frame_wkv, .. }) => {
            let (f, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let params = per_frame_wkv.as_ref().expect("wkv params");
            let mut out = Vec::with_capacity(f * n * d);
            for i in 0..f {
                let fr = Tensor::new(vec![n, d], z.data()[i * n * d..(i + 1) * n * d].to_vec())?;
                out.extend_from_slice(bi_wkv_scan(&fr, &fr, params)?.data());
            }
            Tensor::new(vec![f, n, d], out)
        }
        _ => Err(Error::contract("mechanism/input mismatch".to_string())),
    }
}

fn run_backward(mech: Mechanism, inputs: &Inputs) -> Result<()> {
    match (mech, inputs) {
        (Mechanism::BiWkvScan, Inputs::Kv { k, v, params, upstream }) => {
            std::hint::black_box(bi_wkv_backward(k, v, params, upstream)?);
            Ok(())
        }
        (Mechanism::BiWkvDirect, Inputs::Kv { k, v, params, upstream }) => {
            std::hint::black_box(bi_wkv_direct_backward(k, v, params, upstream)?);
            Ok(())
        }
        (Mechanism::SoftmaxFull, Inputs::Qkv { q, k, v, upstream, .. }) => {
            std::hint::black_box(softmax_attention_backward(q, k, v, true, upstream)?);
            Ok(())
        }
        (
            Mechanism::WindowedFixed | Mechanism::WindowedSqrt,
            Inputs::Qkv {
                q,
                k,
                v,
                upstream,
                window,
            },
        ) => {
            std::hint::black_box(windowed_attention_backward(
                q,
                k,
                v,
                window.unwrap(),
                true,
                upstream,
            )?);
            Ok(())
        }
        (Mechanism::SparseCausal, Inputs::Frames { z, upstream, .. }) => {
            std::hint::black_box(sparse_causal_attention_backward(z, true, upstream)?);
            Ok(())
        }
        (Mechanism::WkvPerFrame, Inputs::Frames { z, upstream, per_frame_wkv }) => {
            let (f, n, d) = (z.shape()[0], z.shape()[1], z.shape()[2]);
            let params = per_frame_wkv.as_ref().expect("wkv params");
            for i in 0..f {
                let range = i * n * d..(i + 1) * n * d;
                let fr = Tensor::new(vec![n, d], z.data()[range.clone()].to_vec())?;
                let up = Tensor::new(vec![n, d], upstream.data()[range].to_vec())?;
                std::hint::black_box(bi_wkv_backward(&fr, &fr, params, &up)?);
            }
            Ok(())
        }
        _ => Err(Error::contract("mechanism/input mismatch".to_string())),
    }
}

/// Closed-form floor on the live element count of one forward+backward.
/// These are conservative lower bounds: inputs, outputs and the dominant
/// intermediate of each mechanism. The softmax floor carries the T^2 score
/// matrix; the scan floors are linear in T with only vector-sized state.
pub fn analytic_elements(mech: Mechanism, size: usize, d: usize, frames: usize) -> u64 {
    let (t, d, f) = (size as u64, d as u64, frames as u64);
    match mech {
        Mechanism::BiWkvScan | Mechanism::BiWkvDirect => 4 * t * d + 8 * d,
        Mechanism::SoftmaxFull => t * t + 4 * t * d,
        Mechanism::WindowedFixed => {
            let m = (64u64).min(t);
            4 * t * d + m * m
        }
        Mechanism::WindowedSqrt => {
            let m = sqrt_window(size) as u64;
            4 * t * d + m * m
        }
        Mechanism::SparseCausal => 2 * f * t * d + 2 * t * t,
        Mechanism::WkvPerFrame => 3 * f * t * d + 8 * d,
    }
}

/// Measured and closed-form element counts for one forward+backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryEstimate {
    pub measured: u64,
    pub analytic: u64,
}

/// Runs one instrumented forward+backward of the mechanism and reports the
/// high-water element count next to the analytic floor. Requires an open
/// `ArenaSession`; the measured count can never fall below the floor, and a
/// shortfall is reported as a contract violation.
pub fn peak_memory_estimate(
    mech: Mechanism,
    size: usize,
    d: usize,
    frames: usize,
    window: usize,
    seed: u64,
) -> Result<MemoryEstimate> {
    if !arena::is_active() {
        return Err(Error::Instrumentation(
            "peak_memory_estimate requires an open arena session",
        ));
    }
    let baseline = arena::reset_peak();
    let measured = {
        let inputs = prepare(mech, size, d, frames, window, seed);
        let out = run_forward(mech, &inputs)?;
        run_backward(mech, &inputs)?;
        std::hint::black_box(&out);
        arena::peak_elements().saturating_sub(baseline)
    };
    let analytic = analytic_elements(mech, size, d, frames);
    if measured < analytic {
        return Err(Error::contract(format!(
            "instrumented peak {measured} fell below the analytic floor {analytic} for {mech}"
        )));
    }
    Ok(MemoryEstimate { measured, analytic })
}

fn median(samples: &mut [u64]) -> u64 {
    samples.sort_unstable();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

/// Runs the configured suite and returns one record per (mechanism, size) in
/// deterministic order. Cases whose analytic element count exceeds the
/// budget are recorded as skipped and the run continues.
pub fn run_benchmark(cfg: &SuiteConfig) -> Result<Vec<BenchRecord>> {
    if cfg.mechanisms.is_empty() || cfg.sizes.is_empty() {
        return Err(Error::EmptyInput("benchmark suite with no cases"));
    }
    if !cfg.sizes.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::contract("sizes must be strictly increasing".to_string()));
    }
    if cfg.repeats < 5 {
        return Err(Error::contract(format!(
            "repeat count {} below the minimum of 5",
            cfg.repeats
        )));
    }
    if cfg.warmup < 2 {
        return Err(Error::contract(format!(
            "warmup count {} below the minimum of 2",
            cfg.warmup
        )));
    }

    let mut records = Vec::with_capacity(cfg.mechanisms.len() * cfg.sizes.len());
    let session = if cfg.measure_memory {
        Some(arena::ArenaSession::begin())
    } else {
        None
    };

    // Prime the CPU before the first measurement; a cold clock otherwise
    // inflates the smallest case and flattens the fitted slope.
    let spin_until = Instant::now() + std::time::Duration::from_millis(300);
    let mut acc = 0.0f64;
    let mut i = 0u64;
    while Instant::now() < spin_until {
        for _ in 0..10_000 {
            acc += (i as f64).sqrt();
            i += 1;
        }
    }
    std::hint::black_box(acc);
    for &mech in &cfg.mechanisms {
        for &size in &cfg.sizes {
            let analytic = analytic_elements(mech, size, cfg.d, cfg.frames);
            if analytic > cfg.element_budget {
                records.push(BenchRecord {
                    mechanism: mech.name().to_string(),
                    size,
                    d: cfg.d,
                    repeats: cfg.repeats,
                    median_ns: 0,
                    fwd_ns: 0,
                    bwd_ns: 0,
                    peak_elems: 0,
                    skipped: true,
                });
                continue;
            }
            let inputs = prepare(mech, size, cfg.d, cfg.frames, cfg.window, cfg.seed);
            for _ in 0..cfg.warmup {
                std::hint::black_box(run_forward(mech, &inputs)?);
                run_backward(mech, &inputs)?;
            }
            let mut fwd = Vec::with_capacity(cfg.repeats);
            let mut bwd = Vec::with_capacity(cfg.repeats);
            let mut total = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t0 = Instant::now();
                std::hint::black_box(run_forward(mech, &inputs)?);
                let t1 = Instant::now();
                run_backward(mech, &inputs)?;
                let t2 = Instant::now();
                fwd.push((t1 - t0).as_nanos() as u64);
                bwd.push((t2 - t1).as_nanos() as u64);
                total.push((t2 - t0).as_nanos() as u64);
            }
            drop(inputs);
            let peak_elems = if session.is_some() {
                peak_memory_estimate(mech, size, cfg.d, cfg.frames, cfg.window, cfg.seed)?.measured
            } else {
                0
            };
            records.push(BenchRecord {
                mechanism: mech.name().to_string(),
                size,
                d: cfg.d,
                repeats: cfg.repeats,
                median_ns: median(&mut total),
                fwd_ns: median(&mut fwd),
                bwd_ns: median(&mut bwd),
                peak_elems,
                skipped: false,
            });
        }
    }
    Ok(records)
}

/// Ordinary least squares on (ln size, ln value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::contract(format!(
            "slope fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::contract(
            "slope fit requires strictly positive sizes and values".to_string(),
        ));
    }
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(x, y) in &logs {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::contract("slope fit needs distinct sizes".to_string()));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for &(x, y) in &logs {
        let pred = intercept + slope * x;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot == 0.0 {
        if ss_res.abs() < 1e-12 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r2,
    })
}

/// Minimum sizes and span for a slope to be asserted against thresholds.
pub const SLOPE_MIN_SIZES: usize = 4;
pub const SLOPE_MIN_SPAN: f64 = 16.0;

/// Fitted scaling behavior of one mechanism.
#[derive(Clone, Debug, Serialize)]
pub struct MechanismScaling {
    pub mechanism: String,
    pub runtime: Option<SlopeFit>,
    pub memory: Option<SlopeFit>,
    pub sizes_used: usize,
    pub span: f64,
    /// Whether the size set is wide enough (>= 4 sizes over >= 16x) for the
    /// slope to be asserted rather than merely reported.
    pub well_spanned: bool,
}

/// Per-size ratio between two mechanisms' medians or peaks.
#[derive(Clone, Debug, Serialize)]
pub struct RatioRow {
    pub size: usize,
    pub ratio: f64,
}

/// Fitted slopes plus pairwise speedup and memory ratios.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingReport {
    pub mechanisms: Vec<MechanismScaling>,
    /// direct / scan total-runtime ratio per common size.
    pub speedup_direct_over_scan: Vec<RatioRow>,
    /// softmax / scan peak-element ratio per common size.
    pub memory_softmax_over_scan: Vec<RatioRow>,
}

impl ScalingReport {
    pub fn from_records(records: &[BenchRecord]) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in records {
            if !names.contains(&r.mechanism.as_str()) {
                names.push(&r.mechanism);
            }
        }
        let mechanisms = names
            .iter()
            .map(|&name| {
                let live: Vec<&BenchRecord> = records
                    .iter()
                    .filter(|r| r.mechanism == name && !r.skipped)
                    .collect();
                let sizes: Vec<usize> = live.iter().map(|r| r.size).collect();
                let span = match (sizes.iter().min(), sizes.iter().max()) {
                    (Some(&lo), Some(&hi)) if lo > 0 => hi as f64 / lo as f64,
                    _ => 0.0,
                };
                let runtime_points: Vec<(f64, f64)> = live
                    .iter()
                    .filter(|r| r.median_ns > 0)
                    .map(|r| (r.size as f64, r.median_ns as f64))
                    .collect();
                let memory_points: Vec<(f64, f64)> = live
                    .iter()
                    .filter(|r| r.peak_elems > 0)
                    .map(|r| (r.size as f64, r.peak_elems as f64))
                    .collect();
                MechanismScaling {
                    mechanism: name.to_string(),
                    runtime: fit_loglog_slope(&runtime_points).ok(),
                    memory: fit_loglog_slope(&memory_points).ok(),
                    sizes_used: sizes.len(),
                    span,
                    well_spanned: sizes.len() >= SLOPE_MIN_SIZES && span >= SLOPE_MIN_SPAN,
                }
            })
            .collect();

        let ratio_rows = |num: &str, den: &str, field: fn(&BenchRecord) -> u64| -> Vec<RatioRow> {
            let mut rows = Vec::new();
            for r in records.iter().filter(|r| r.mechanism == num && !r.skipped) {
                if let Some(d) = records
                    .iter()
                    .find(|o| o.mechanism == den && o.size == r.size && !o.skipped)
                {
                    let (rn, rd) = (field(r), field(d));
                    if rn > 0 && rd > 0 {
                        rows.push(RatioRow {
                            size: r.size,
                            ratio: rn as f64 / rd as f64,
                        });
                    }
                }
            }
            rows.sort_by_key(|r| r.size);
            rows
        };

        ScalingReport {
            mechanisms,
            speedup_direct_over_scan: ratio_rows("direct", "scan", |r| r.median_ns),
            memory_softmax_over_scan: ratio_rows("softmax", "scan", |r| r.peak_elems),
        }
    }

    pub fn scaling_for(&self, name: &str) -> Option<&MechanismScaling> {
        self.mechanisms.iter().find(|m| m.mechanism == name)
    }
}

/// Output format of `emit_report`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Plotdata,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(Error::config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Report header metadata, emitted as `#` comment lines for text formats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub machine: String,
    pub seed: u64,
    pub flags: String,
}

impl ReportMeta {
    pub fn for_host(seed: u64, flags: impl Into<String>) -> Self {
        ReportMeta {
            machine: format!("os={} arch={}", std::env::consts::OS, std::env::consts::ARCH),
            seed,
            flags: flags.into(),
        }
    }

    fn comment_lines(&self) -> String {
        format!(
            "# machine: {}\n# seed: {}\n# flags: {}\n",
            self.machine, self.seed, self.flags
        )
    }
}

pub const CSV_HEADER: &str = "mechanism,size,d,repeats,median_ns,fwd_ns,bwd_ns,peak_elems,skipped";
pub const CSV_HEADER_NO_TIMING: &str = "mechanism,size,d,repeats,peak_elems,skipped";

/// Renders records as CSV. With `include_timing` off the timing columns are
/// omitted so bodies byte-compare across runs.
pub fn render_csv(records: &[BenchRecord], meta: Option<&ReportMeta>, include_timing: bool) -> String {
    let mut out = String::new();
    if let Some(m) = meta {
        out.push_str(&m.comment_lines());
    }
    if include_timing {
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.mechanism,
                r.size,
                r.d,
                r.repeats,
                r.median_ns,
                r.fwd_ns,
                r.bwd_ns,
                r.peak_elems,
                r.skipped
            ));
        }
    } else {
        out.push_str(CSV_HEADER_NO_TIMING);
        out.push('\n');
        for r in records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.mechanism, r.size, r.d, r.repeats, r.peak_elems, r.skipped
            ));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JsonReport {
    meta: Option<ReportMeta>,
    records: Vec<BenchRecord>,
}

/// Parses a JSON report produced by `emit_report`.
pub fn parse_json_report(bytes: &[u8]) -> Result<(Option<ReportMeta>, Vec<BenchRecord>)> {
    let parsed: JsonReport = serde_json::from_slice(bytes)
        .map_err(|e| Error::contract(format!("malformed report json: {e}")))?;
    Ok((parsed.meta, parsed.records))
}

/// Writes records to `out_dir` in the chosen format and returns the written
/// paths. CSV and JSON produce `<stem>.{csv,json}`; plotdata produces one
/// whitespace-separated series file `<stem>_<mechanism>.dat` per mechanism,
/// one line per record (`size median_ns fwd_ns bwd_ns peak_elems`).
pub fn emit_report(
    records: &[BenchRecord],
    format: ReportFormat,
    out_dir: &Path,
    stem: &str,
    meta: Option<&ReportMeta>,
    include_timing: bool,
) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("report with no records"));
    }
    std::fs::create_dir_all(out_dir)?;
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join(format!("{stem}.csv"));
            std::fs::write(&path, render_csv(records, meta, include_timing))?;
            Ok(vec![path])
        }
        ReportFormat::Json => {
            let path = out_dir.join(format!("{stem}.json"));
            let doc = JsonReport {
                meta: meta.cloned(),
                records: records.to_vec(),
            };
            let mut body = serde_json::to_string_pretty(&doc)
                .map_err(|e| Error::contract(format!("json encode: {e}")))?;
            body.push('\n');
            std::fs::write(&path, body)?;
            Ok(vec![path])
        }
        ReportFormat::Plotdata => {
            let mut names: Vec<&str> = Vec::new();
            for r in records {
                if !names.contains(&r.mechanism.as_str()) {
                    names.push(&r.mechanism);
                }
            }
            let mut paths = Vec::new();
            for name in names {
                let path = out_dir.join(format!("{stem}_{name}.dat"));
                let mut body = String::new();
                if let Some(m) = meta {
                    body.push_str(&m.comment_lines());
                }
                for r in records.iter().filter(|r| r.mechanism == name) {
                    if include_timing {
                        body.push_str(&format!(
                            "{} {} {} {} {}\n",
                            r.size, r.median_ns, r.fwd_ns, r.bwd_ns, r.peak_elems
                        ));
                    } else {
                        body.push_str(&format!("{} {}\n", r.size, r.peak_elems));
                    }
                }
                std::fs::write(&path, body)?;
                paths.push(path);
            }
            Ok(paths)
        }
    }
}
