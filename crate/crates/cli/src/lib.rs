//! Command-line driver wiring the kernels, the benchmark harness and the toy
//! diffusion loop together.
//!
//! Configuration is resolved in three layers: built-in defaults, then a flat
//! `key=value` config file, then command-line flags. The seed fully
//! determines all stochastic behavior.

pub mod verify;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use vrwkv_core::bench::{
    emit_report, run_benchmark, Mechanism, ReportFormat, ReportMeta, ScalingReport, SuiteConfig,
};
use vrwkv_core::dataset::{make_synthetic_dataset, N_CLASSES};
use vrwkv_core::denoiser::{run_training, window_mean_loss, Denoiser, DenoiserConfig, TrainOptions};
use vrwkv_core::dataset::{Clip, FrameSequence};
use vrwkv_core::diffusion::{
    ddim_sample, ConditionEmbedding, IdentityCodec, LatentCodec, NoiseSchedule,
};
use vrwkv_core::rng::{self, stream_ids};
use vrwkv_core::serialize::Checkpoint;
use vrwkv_core::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(
    name = "vrwkv",
    about = "Linear-attention kernels, scaling benchmarks and a toy diffusion demo"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: CliOpts,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Run the oracle, gradient and invariant suites.
    Verify,
    /// Run scaling benchmarks and assert the complexity properties.
    Bench,
    /// Train the toy denoiser on synthetic clips.
    Train,
    /// Sample a clip from a trained checkpoint.
    Sample,
}

/// Raw command-line options; `None` means "not given", so the config file
/// and defaults can fill the gap.
#[derive(Args, Debug, Clone, Default)]
pub struct CliOpts {
    /// Master seed for all stochastic behavior.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated benchmark sizes (tokens, or tokens per frame).
    #[arg(long, global = true)]
    pub sizes: Option<String>,
    /// Channel count.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Comma-separated mechanism set for the benchmark command.
    #[arg(long, global = true)]
    pub mechanisms: Option<String>,
    /// Training steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Training batch size (clips per step).
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    /// Learning rate.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Classifier-free guidance scale.
    #[arg(long, global = true)]
    pub guidance: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat key=value config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report format: csv, json or plotdata.
    #[arg(long, global = true)]
    pub format: Option<String>,
    /// Substring filter for verification check names.
    #[arg(long, global = true)]
    pub filter: Option<String>,
    /// Omit wall-time columns from emitted CSV bodies.
    #[arg(long, global = true, default_value_t = false)]
    pub no_timing: bool,
    /// Fault-injection hook for the verify command (test use).
    #[arg(long, global = true, hide = true, default_value_t = false)]
    pub perturb_scan: bool,
    /// Enable the kernels' internal parallelism.
    #[arg(long, global = true, default_value_t = false)]
    pub parallel: bool,
    /// Frames per clip.
    #[arg(long, global = true)]
    pub frames: Option<usize>,
    /// Square image resolution of the synthetic clips.
    #[arg(long, global = true)]
    pub img: Option<usize>,
    /// Patch size for the token grid.
    #[arg(long, global = true)]
    pub patch: Option<usize>,
    /// Number of stacked blocks in the denoiser.
    #[arg(long, global = true)]
    pub blocks: Option<usize>,
    /// Reverse-process sampling steps.
    #[arg(long, global = true)]
    pub sample_steps: Option<usize>,
    /// Class id to sample.
    #[arg(long, global = true)]
    pub sample_class: Option<usize>,
    /// Clips in the synthetic training set.
    #[arg(long, global = true)]
    pub clips: Option<usize>,
    /// Timed repeats per benchmark case.
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    /// Fixed window width for windowed attention.
    #[arg(long, global = true)]
    pub window: Option<usize>,
}

/// Fully resolved run configuration. Every field has a default; a config
/// file overrides defaults and command-line flags override the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub d: usize,
    pub mechanisms: Vec<String>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub guidance: f64,
    pub out: PathBuf,
    pub format: String,
    pub filter: String,
    pub no_timing: bool,
    pub perturb_scan: bool,
    pub parallel: bool,
    pub frames: usize,
    pub img: usize,
    pub patch: usize,
    pub blocks: usize,
    pub sample_steps: usize,
    pub sample_class: usize,
    pub clips: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub window: usize,
    pub mem_d: usize,
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub p_uncond: f64,
    pub element_budget: u64,
    pub local_init: bool,
    pub joint_tokens: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            sizes: vec![256, 512, 1024, 2048, 4096],
            d: 32,
            mechanisms: vec![
                "scan".into(),
                "direct".into(),
                "softmax".into(),
                "windowed_fixed".into(),
                "windowed_sqrt".into(),
            ],
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            guidance: 7.5,
            out: PathBuf::from("out"),
            format: "csv".into(),
            filter: String::new(),
            no_timing: false,
            perturb_scan: false,
            parallel: false,
            frames: 4,
            img: 16,
            patch: 4,
            blocks: 2,
            sample_steps: 50,
            sample_class: 0,
            clips: 60,
            repeats: 5,
            warmup: 2,
            window: 64,
            mem_d: 8,
            t_steps: 100,
            beta_min: 1e-4,
            beta_max: 2e-2,
            p_uncond: 0.1,
            element_budget: 300_000_000,
            local_init: false,
            joint_tokens: false,
        }
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| anyhow::anyhow!("cannot parse {what} entry {p:?}"))
        })
        .collect()
}

/// Parses the flat `key=value` config format; `#` starts a comment line.
pub fn parse_config_file(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key=value", lineno + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    fn apply_file(&mut self, map: &BTreeMap<String, String>) -> anyhow::Result<()> {
        for (key, value) in map {
            let unparsable = || anyhow::anyhow!("config key {key}: cannot parse {value:?}");
            match key.as_str() {
                "seed" => self.seed = value.parse().map_err(|_| unparsable())?,
                "sizes" => self.sizes = parse_list(value, "sizes")?,
                "d" => self.d = value.parse().map_err(|_| unparsable())?,
                "mechanisms" => self.mechanisms = parse_list(value, "mechanisms")?,
                "steps" => self.steps = value.parse().map_err(|_| unparsable())?,
                "batch" => self.batch = value.parse().map_err(|_| unparsable())?,
                "lr" => self.lr = value.parse().map_err(|_| unparsable())?,
                "guidance" => self.guidance = value.parse().map_err(|_| unparsable())?,
                "out" => self.out = PathBuf::from(value),
                "format" => self.format = value.clone(),
                "filter" => self.filter = value.clone(),
                "no_timing" => self.no_timing = value.parse().map_err(|_| unparsable())?,
                "parallel" => self.parallel = value.parse().map_err(|_| unparsable())?,
                "frames" => self.frames = value.parse().map_err(|_| unparsable())?,
                "img" => self.img = value.parse().map_err(|_| unparsable())?,
                "patch" => self.patch = value.parse().map_err(|_| unparsable())?,
                "blocks" => self.blocks = value.parse().map_err(|_| unparsable())?,
                "sample_steps" => self.sample_steps = value.parse().map_err(|_| unparsable())?,
                "sample_class" => self.sample_class = value.parse().map_err(|_| unparsable())?,
                "clips" => self.clips = value.parse().map_err(|_| unparsable())?,
                "repeats" => self.repeats = value.parse().map_err(|_| unparsable())?,
                "warmup" => self.warmup = value.parse().map_err(|_| unparsable())?,
                "window" => self.window = value.parse().map_err(|_| unparsable())?,
                "mem_d" => self.mem_d = value.parse().map_err(|_| unparsable())?,
                "t_steps" => self.t_steps = value.parse().map_err(|_| unparsable())?,
                "beta_min" => self.beta_min = value.parse().map_err(|_| unparsable())?,
                "beta_max" => self.beta_max = value.parse().map_err(|_| unparsable())?,
                "p_uncond" => self.p_uncond = value.parse().map_err(|_| unparsable())?,
                "element_budget" => {
                    self.element_budget = value.parse().map_err(|_| unparsable())?
                }
                "local_init" => self.local_init = value.parse().map_err(|_| unparsable())?,
                "joint_tokens" => self.joint_tokens = value.parse().map_err(|_| unparsable())?,
                other => bail!("unknown config key {other:?}"),
            }
        }
        Ok(())
    }

    fn apply_cli(&mut self, opts: &CliOpts) -> anyhow::Result<()> {
        if let Some(v) = opts.seed {
            self.seed = v;
        }
        if let Some(v) = &opts.sizes {
            self.sizes = parse_list(v, "sizes")?;
        }
        if let Some(v) = opts.d {
            self.d = v;
        }
        if let Some(v) = &opts.mechanisms {
            self.mechanisms = parse_list(v, "mechanisms")?;
        }
        if let Some(v) = opts.steps {
            self.steps = v;
        }
        if let Some(v) = opts.batch {
            self.batch = v;
        }
        if let Some(v) = opts.lr {
            self.lr = v;
        }
        if let Some(v) = opts.guidance {
            self.guidance = v;
        }
        if let Some(v) = &opts.out {
            self.out = v.clone();
        }
        if let Some(v) = &opts.format {
            self.format = v.clone();
        }
        if let Some(v) = &opts.filter {
            self.filter = v.clone();
        }
        // Boolean flags only turn features on; absence defers to the file.
        self.no_timing |= opts.no_timing;
        self.perturb_scan |= opts.perturb_scan;
        self.parallel |= opts.parallel;
        if let Some(v) = opts.frames {
            self.frames = v;
        }
        if let Some(v) = opts.img {
            self.img = v;
        }
        if let Some(v) = opts.patch {
            self.patch = v;
        }
        if let Some(v) = opts.blocks {
            self.blocks = v;
        }
        if let Some(v) = opts.sample_steps {
            self.sample_steps = v;
        }
        if let Some(v) = opts.sample_class {
            self.sample_class = v;
        }
        if let Some(v) = opts.clips {
            self.clips = v;
        }
        if let Some(v) = opts.repeats {
            self.repeats = v;
        }
        if let Some(v) = opts.window {
            self.window = v;
        }
        Ok(())
    }

    /// Defaults, overlaid by the config file, overlaid by flags.
    pub fn resolve(opts: &CliOpts) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &opts.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            cfg.apply_file(&parse_config_file(&text)?)?;
        }
        cfg.apply_cli(opts)?;
        Ok(cfg)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            d: self.d,
            blocks: self.blocks,
            patch: self.patch,
            frames: self.frames,
            height: self.img,
            width: self.img,
            channels: 1,
            t_steps: self.t_steps,
            heads: 1,
            n_classes: N_CLASSES,
            shift_px: 1,
            gamma: 0.25,
            local_init: self.local_init,
            joint_tokens: self.joint_tokens,
        }
    }

    pub fn schedule(&self) -> anyhow::Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(
            self.t_steps,
            self.beta_min,
            self.beta_max,
        )?)
    }
}

/// Dispatches a parsed invocation and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match RunConfig::resolve(&cli.opts) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    vrwkv_core::config::set_parallelism(cfg.parallel);
    let outcome = match cli.command {
        Command::Verify => cmd_verify(&cfg),
        Command::Bench => cmd_bench(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Sample => cmd_sample(&cfg),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

/// Runs the verification checks and prints one line per check.
pub fn cmd_verify(cfg: &RunConfig) -> anyhow::Result<i32> {
    if cfg.perturb_scan {
        vrwkv_core::wkv::set_scan_perturbation(1.0 + 1e-3);
    }
    let reports = verify::run_checks(cfg.seed, &cfg.filter);
    if cfg.perturb_scan {
        vrwkv_core::wkv::set_scan_perturbation(1.0);
    }
    if reports.is_empty() {
        println!("no checks match filter {:?}", cfg.filter);
        return Ok(2);
    }
    let mut failures = 0;
    for r in &reports {
        let status = if r.pass { "PASS" } else { "FAIL" };
        println!("{status} {} worst={:.3e} tol={:.3e}", r.name, r.worst, r.tol);
        if !r.pass {
            failures += 1;
        }
    }
    println!(
        "{} checks, {} failed",
        reports.len(),
        failures
    );
    Ok(if failures == 0 { 0 } else { 1 })
}

fn parse_mechanisms(names: &[String]) -> anyhow::Result<Vec<Mechanism>> {
    names
        .iter()
        .map(|n| Ok(Mechanism::from_str(n)?))
        .collect()
}

struct PropertyCheck {
    name: String,
    detail: String,
    pass: bool,
}

fn slope_check(
    report: &ScalingReport,
    name: &str,
    what: &str,
    max: Option<f64>,
    min: Option<f64>,
) -> Option<PropertyCheck> {
    let ms = report.scaling_for(name)?;
    let fit = if what == "runtime" { ms.runtime } else { ms.memory };
    Some(match fit {
        Some(fit) if ms.well_spanned => {
            let pass =
                max.is_none_or(|m| fit.slope <= m) && min.is_none_or(|m| fit.slope >= m);
            let bound = match (max, min) {
                (Some(m), _) => format!("<= {m}"),
                (_, Some(m)) => format!(">= {m}"),
                _ => String::new(),
            };
            PropertyCheck {
                name: format!("{what}_slope_{name}"),
                detail: format!("slope {:.3} (r2 {:.3}), required {bound}", fit.slope, fit.r2),
                pass,
            }
        }
        _ => PropertyCheck {
            name: format!("{what}_slope_{name}"),
            detail: "size span too narrow to assert (needs >= 4 sizes over >= 16x); reported only"
                .into(),
            pass: true,
        },
    })
}

fn check_scaling_properties(
    timing: &ScalingReport,
    memory: &ScalingReport,
    mechanisms: &[Mechanism],
) -> Vec<PropertyCheck> {
    let mut checks = Vec::new();
    let has = |m: Mechanism| mechanisms.contains(&m);

    if has(Mechanism::BiWkvScan) {
        checks.extend(slope_check(timing, "scan", "runtime", Some(1.25), None));
    }
    if has(Mechanism::BiWkvDirect) {
        checks.extend(slope_check(timing, "direct", "runtime", None, Some(1.7)));
    }
    if has(Mechanism::SoftmaxFull) {
        checks.extend(slope_check(timing, "softmax", "runtime", None, Some(1.7)));
    }
    if has(Mechanism::SparseCausal) {
        checks.extend(slope_check(timing, "sparse_causal", "runtime", None, Some(1.7)));
    }
    if has(Mechanism::WkvPerFrame) {
        checks.extend(slope_check(timing, "wkv_frame", "runtime", Some(1.25), None));
    }

    if has(Mechanism::BiWkvScan) && has(Mechanism::BiWkvDirect) {
        let rows = &timing.speedup_direct_over_scan;
        let monotone = rows.windows(2).all(|w| w[1].ratio >= w[0].ratio);
        let series: Vec<String> = rows.iter().map(|r| format!("{:.1}", r.ratio)).collect();
        checks.push(PropertyCheck {
            name: "speedup_direct_over_scan_monotone".into(),
            detail: format!("ratios by size: [{}]", series.join(", ")),
            pass: monotone && rows.len() >= 2,
        });
    }

    if has(Mechanism::BiWkvScan) && has(Mechanism::SoftmaxFull) {
        checks.extend(slope_check(memory, "softmax", "memory", None, Some(1.9)));
        checks.extend(slope_check(memory, "scan", "memory", Some(1.1), None));
        if let Some(last) = memory.memory_softmax_over_scan.last() {
            checks.push(PropertyCheck {
                name: "memory_ratio_softmax_over_scan".into(),
                detail: format!("ratio {:.2} at size {}, required >= 2.0", last.ratio, last.size),
                pass: last.ratio >= 2.0,
            });
        }
    }
    checks
}

fn render_scaling_summary(report: &ScalingReport, label: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "== {label} ==");
    for m in &report.mechanisms {
        let fmt_fit = |f: Option<vrwkv_core::bench::SlopeFit>| match f {
            Some(f) => format!("slope {:.3} intercept {:.2} r2 {:.4}", f.slope, f.intercept, f.r2),
            None => "n/a".into(),
        };
        let _ = writeln!(
            out,
            "{:<16} runtime: {:<44} memory: {}",
            m.mechanism,
            fmt_fit(m.runtime),
            fmt_fit(m.memory)
        );
    }
    for r in &report.speedup_direct_over_scan {
        let _ = writeln!(out, "speedup direct/scan @ {:>6}: {:.2}x", r.size, r.ratio);
    }
    for r in &report.memory_softmax_over_scan {
        let _ = writeln!(out, "memory softmax/scan @ {:>6}: {:.2}x", r.size, r.ratio);
    }
    out
}

/// Runs the benchmark suites, writes the report files, prints the scaling
/// summary and asserts the complexity properties.
pub fn cmd_bench(cfg: &RunConfig) -> anyhow::Result<i32> {
    let mechanisms = parse_mechanisms(&cfg.mechanisms)?;
    let format = ReportFormat::from_str(&cfg.format)?;
    let flags = format!(
        "mechanisms={} sizes={:?} d={} mem_d={} parallel={}",
        cfg.mechanisms.join(","),
        cfg.sizes,
        cfg.d,
        cfg.mem_d,
        cfg.parallel
    );
    let meta = ReportMeta::for_host(cfg.seed, flags);

    let suite = SuiteConfig {
        mechanisms: mechanisms.clone(),
        sizes: cfg.sizes.clone(),
        d: cfg.d,
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        frames: cfg.frames,
        window: cfg.window,
        seed: cfg.seed,
        element_budget: cfg.element_budget,
        measure_memory: true,
    };
    let mut records = run_benchmark(&suite)?;
    let timing_report = ScalingReport::from_records(&records);

    // Dedicated memory series at a narrow channel count, where the score
    // matrix dominates from the smallest size on.
    let memory_mechs: Vec<Mechanism> = mechanisms
        .iter()
        .copied()
        .filter(|m| matches!(m, Mechanism::BiWkvScan | Mechanism::SoftmaxFull))
        .collect();
    let memory_report = if memory_mechs.len() == 2 {
        let mem_suite = SuiteConfig {
            mechanisms: memory_mechs,
            d: cfg.mem_d,
            ..suite.clone()
        };
        let mem_records = run_benchmark(&mem_suite)?;
        let report = ScalingReport::from_records(&mem_records);
        records.extend(mem_records);
        report
    } else {
        ScalingReport::from_records(&[])
    };

    let paths = emit_report(&records, format, &cfg.out, "bench", Some(&meta), !cfg.no_timing)?;
    for p in &paths {
        println!("wrote {}", p.display());
    }
    print!("{}", render_scaling_summary(&timing_report, "runtime scaling"));
    if !memory_report.mechanisms.is_empty() {
        print!("{}", render_scaling_summary(&memory_report, "memory scaling"));
    }

    let checks = check_scaling_properties(&timing_report, &memory_report, &mechanisms);
    let mut failures = 0;
    for c in &checks {
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
        if !c.pass {
            failures += 1;
        }
    }
    Ok(if failures == 0 { 0 } else { 1 })
}

/// Formats the loss log as CSV; wall time is dropped when `no_timing`.
pub fn render_loss_csv(log: &[vrwkv_core::denoiser::TrainLogRow], include_timing: bool) -> String {
    let mut out = String::new();
    if include_timing {
        out.push_str("step,loss,wall_ms\n");
        for row in log {
            let _ = writeln!(out, "{},{},{:.3}", row.step, row.loss, row.wall_ms);
        }
    } else {
        out.push_str("step,loss\n");
        for row in log {
            let _ = writeln!(out, "{},{}", row.step, row.loss);
        }
    }
    out
}

/// Trains the toy denoiser and writes the checkpoint plus the loss log.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<i32> {
    let dconfig = cfg.denoiser_config();
    let schedule = cfg.schedule()?;
    let codec = IdentityCodec;
    let dataset: Vec<Clip> = make_synthetic_dataset(
        cfg.clips,
        cfg.frames,
        cfg.img,
        cfg.img,
        &mut rng::stream(cfg.seed, stream_ids::DATASET),
    )?
    .into_iter()
    .map(|clip| {
        Ok(Clip {
            frames: FrameSequence::new(codec.encode(clip.frames.tensor())?)?,
            class_id: clip.class_id,
        })
    })
    .collect::<vrwkv_core::Result<_>>()?;
    let mut model = Denoiser::init(dconfig, &mut rng::stream(cfg.seed, stream_ids::INIT))?;
    println!(
        "training {} parameters on {} clips for {} steps",
        model.params.param_count(),
        dataset.len(),
        cfg.steps
    );
    let opts = TrainOptions {
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        p_uncond: cfg.p_uncond,
        seed: cfg.seed,
    };
    let log = if cfg.steps == 0 {
        Vec::new()
    } else {
        run_training(&mut model, &dataset, &schedule, &opts)?
    };

    std::fs::create_dir_all(&cfg.out)?;
    let ckpt_path = cfg.out.join("checkpoint.bin");
    model.to_checkpoint()?.save(&ckpt_path)?;
    let loss_path = cfg.out.join("loss.csv");
    std::fs::write(&loss_path, render_loss_csv(&log, !cfg.no_timing))?;
    println!("wrote {}", ckpt_path.display());
    println!("wrote {}", loss_path.display());
    if !log.is_empty() {
        let head = window_mean_loss(&log, 50, false);
        let tail = window_mean_loss(&log, 50, true);
        println!(
            "smoothed loss: first-window {head:.4}, last-window {tail:.4}, ratio {:.3}",
            tail / head
        );
    }
    Ok(0)
}

/// Renders one frame as a binary PGM image; values in [-1, 1] map to [0, 255].
pub fn frame_to_pgm(frame: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| {
        let unit = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
        (unit * 255.0).round() as u8
    }));
    out
}

/// Samples a clip from the checkpoint in the output directory and writes a
/// raw tensor plus one PGM per frame.
pub fn cmd_sample(cfg: &RunConfig) -> anyhow::Result<i32> {
    let ckpt_path = cfg.out.join("checkpoint.bin");
    if !ckpt_path.exists() {
        bail!("checkpoint {} does not exist; run train first", ckpt_path.display());
    }
    let model = Denoiser::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
    let schedule = NoiseSchedule::linear(model.config.t_steps, cfg.beta_min, cfg.beta_max)?;
    let cond = ConditionEmbedding::for_class(cfg.sample_class, model.config.n_classes, model.config.d)?;
    let shape = vec![
        model.config.frames,
        model.config.channels,
        model.config.height,
        model.config.width,
    ];
    let latents = ddim_sample(
        &model,
        &schedule,
        &cond,
        cfg.guidance,
        cfg.sample_steps,
        &mut rng::stream(cfg.seed, stream_ids::SAMPLE),
        shape,
    )?;
    let clip = IdentityCodec.decode(&latents)?;

    std::fs::create_dir_all(&cfg.out)?;
    let tensor_path = cfg.out.join("sample.tensor");
    let mut bytes = Vec::new();
    clip.write_to(&mut bytes)?;
    std::fs::write(&tensor_path, bytes)?;
    println!("wrote {}", tensor_path.display());

    let (h, w) = (model.config.height, model.config.width);
    let per_frame = model.config.channels * h * w;
    for f in 0..model.config.frames {
        let frame = &clip.data()[f * per_frame..f * per_frame + h * w];
        let path = cfg.out.join(format!("sample_frame_{f}.pgm"));
        std::fs::write(&path, frame_to_pgm(frame, h, w))?;
        println!("wrote {}", path.display());
    }
    let lo = clip.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = clip.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "sampled class {} at guidance {}: values in [{lo:.3}, {hi:.3}]",
        cfg.sample_class, cfg.guidance
    );
    Ok(0)
}

/// Convenience wrapper used by tests: samples with an explicit config and
/// returns the clip tensor.
pub fn sample_clip(cfg: &RunConfig) -> anyhow::Result<Tensor> {
    let ckpt_path = cfg.out.join("checkpoint.bin");
    let model = Denoiser::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
    let schedule = NoiseSchedule::linear(model.config.t_steps, cfg.beta_min, cfg.beta_max)?;
    let cond = ConditionEmbedding::for_class(cfg.sample_class, model.config.n_classes, model.config.d)?;
    let shape = vec![
        model.config.frames,
        model.config.channels,
        model.config.height,
        model.config.width,
    ];
    Ok(ddim_sample(
        &model,
        &schedule,
        &cond,
        cfg.guidance,
        cfg.sample_steps,
        &mut rng::stream(cfg.seed, stream_ids::SAMPLE),
        shape,
    )?)
}
