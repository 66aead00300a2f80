//! Configuration resolution and command-level behavior.

use std::fs;
use std::path::PathBuf;
use std::sync::{Mutex, MutexGuard, OnceLock};

use vrwkv_cli::{cmd_bench, cmd_sample, cmd_train, cmd_verify, parse_config_file, CliOpts, RunConfig};

// Commands touch process-global state (the counting arena, the scan
// perturbation hook) and some are timing-sensitive; serialize them.
fn lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vrwkv_cli_{tag}_{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn flag_precedence_cli_over_file_over_default() {
    let dir = tmpdir("precedence");
    let cfg_path = dir.join("run.cfg");
    fs::write(&cfg_path, "# comment line\nseed=7\nbatch=3\n").unwrap();

    // Default only.
    let none = RunConfig::resolve(&CliOpts::default()).unwrap();
    assert_eq!(none.seed, 42);

    // Config file overrides the default.
    let file_only = RunConfig::resolve(&CliOpts {
        config: Some(cfg_path.clone()),
        ..CliOpts::default()
    })
    .unwrap();
    assert_eq!(file_only.seed, 7);
    assert_eq!(file_only.batch, 3);

    // The flag overrides the file.
    let flag = RunConfig::resolve(&CliOpts {
        config: Some(cfg_path),
        seed: Some(9),
        ..CliOpts::default()
    })
    .unwrap();
    assert_eq!(flag.seed, 9);
    assert_eq!(flag.batch, 3);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_file_rejects_unknown_keys_and_junk() {
    assert!(parse_config_file("this is not a pair").is_err());
    let dir = tmpdir("badcfg");
    let path = dir.join("bad.cfg");
    fs::write(&path, "unknown_key=1\n").unwrap();
    let err = RunConfig::resolve(&CliOpts {
        config: Some(path),
        ..CliOpts::default()
    });
    assert!(err.is_err());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn verify_default_passes_and_filter_narrows() {
    let _guard = lock();
    let cfg = RunConfig::default();
    assert_eq!(cmd_verify(&cfg).unwrap(), 0);

    let filtered = vrwkv_cli::verify::run_checks(cfg.seed, "gradient");
    assert_eq!(filtered.len(), 3);
    assert!(filtered.iter().all(|r| r.name.contains("gradient")));
}

#[test]
fn perturbed_scan_fails_equivalence_with_nonzero_exit() {
    let _guard = lock();
    let cfg = RunConfig {
        perturb_scan: true,
        filter: "scan_direct_equivalence".into(),
        ..RunConfig::default()
    };
    assert_eq!(cmd_verify(&cfg).unwrap(), 1);
    // The hook is reset afterwards; a clean run passes again.
    let clean = RunConfig {
        filter: "scan_direct_equivalence".into(),
        ..RunConfig::default()
    };
    assert_eq!(cmd_verify(&clean).unwrap(), 0);
}

#[test]
fn train_zero_steps_writes_init_checkpoint_and_bare_csv() {
    let _guard = lock();
    let dir = tmpdir("train0");
    let cfg = RunConfig {
        steps: 0,
        out: dir.clone(),
        ..RunConfig::default()
    };
    assert_eq!(cmd_train(&cfg).unwrap(), 0);
    assert!(dir.join("checkpoint.bin").exists());
    let csv = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(csv, "step,loss,wall_ms\n");
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn sample_without_checkpoint_fails() {
    let _guard = lock();
    let dir = tmpdir("nockpt");
    let cfg = RunConfig {
        out: dir.clone(),
        ..RunConfig::default()
    };
    assert!(cmd_sample(&cfg).is_err());
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn zero_guidance_sample_is_bitwise_unconditional() {
    let _guard = lock();
    let dir = tmpdir("guidance0");
    let train_cfg = RunConfig {
        steps: 5,
        batch: 2,
        clips: 6,
        out: dir.clone(),
        ..RunConfig::default()
    };
    assert_eq!(cmd_train(&train_cfg).unwrap(), 0);

    // Guidance 0 with different conditioning classes must agree bit for bit
    // because the conditional branch is never evaluated.
    let a = vrwkv_cli::sample_clip(&RunConfig {
        guidance: 0.0,
        sample_class: 0,
        sample_steps: 8,
        ..train_cfg.clone()
    })
    .unwrap();
    let b = vrwkv_cli::sample_clip(&RunConfig {
        guidance: 0.0,
        sample_class: 2,
        sample_steps: 8,
        ..train_cfg.clone()
    })
    .unwrap();
    assert_eq!(a, b);

    // A positive guidance with a class condition changes the trajectory.
    let c = vrwkv_cli::sample_clip(&RunConfig {
        guidance: 2.0,
        sample_class: 0,
        sample_steps: 8,
        ..train_cfg
    })
    .unwrap();
    assert_ne!(a, c);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_plotdata_writes_one_series_per_mechanism() {
    let _guard = lock();
    let dir = tmpdir("plotdata");
    let cfg = RunConfig {
        sizes: vec![8, 16, 32],
        mechanisms: vec!["scan".into(), "direct".into()],
        format: "plotdata".into(),
        out: dir.clone(),
        ..RunConfig::default()
    };
    assert_eq!(cmd_bench(&cfg).unwrap(), 0);
    let scan = fs::read_to_string(dir.join("bench_scan.dat")).unwrap();
    let direct = fs::read_to_string(dir.join("bench_direct.dat")).unwrap();
    // Three sizes -> three data lines after the # metadata header.
    assert_eq!(scan.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert_eq!(direct.lines().filter(|l| !l.starts_with('#')).count(), 3);
    fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_mechanism_is_an_error() {
    let _guard = lock();
    let cfg = RunConfig {
        mechanisms: vec!["warp_drive".into()],
        ..RunConfig::default()
    };
    assert!(cmd_bench(&cfg).is_err());
}
