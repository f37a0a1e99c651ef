//! Stage commands on a reduced configuration: routing, persistence,
//! resumption and error reporting.

use std::path::Path;
use std::sync::OnceLock;

use semi_core::checkpoint::Checkpoint;
use semi_core::config::ExperimentConfig;
use semi_core::eval::{parse_metrics_csv, HeldOut, Method, Route};
use semi_core::pipeline::{self, AdaptRecord, Layout};
use semi_core::{Exec, SemiError};

fn reduced() -> ExperimentConfig {
    let sets: Vec<String> = [
        "stage1.steps=200",
        "stage1.optimizer.schedule.total=200",
        "stage1.optimizer.schedule.warmup=20",
        "stage2.steps=40",
        "stage2.optimizer.schedule.total=40",
        "stage2.optimizer.schedule.warmup=4",
        "stage2.eval_episodes=4",
        "finetune.steps=20",
        "benchmark.shots=[4, 8]",
        "benchmark.seeds=[0]",
        "benchmark.val_size=16",
        "benchmark.test_size=16",
        "benchmark.cka_shots=4",
        "benchmark.held_out=[{modality = 3, enc_dim = 48, seed = 5000}, {modality = 4, enc_dim = 96, seed = 5001}]",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ExperimentConfig::from_toml_with_overrides("", &sets).unwrap()
}

/// Stage 1 and 2 trained once for the whole test binary.
fn trained() -> &'static (ExperimentConfig, tempfile::TempDir) {
    static RUN: OnceLock<(ExperimentConfig, tempfile::TempDir)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = reduced();
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        pipeline::cmd_stage1(&cfg, &layout).unwrap();
        pipeline::cmd_stage2(&cfg, &layout).unwrap();
        (cfg, dir)
    })
}

fn copy_stage_outputs(from: &Path, to: &Path) {
    for f in ["decoder.ckpt", "stage1/projector.ckpt", "stage2/hypernet.ckpt"] {
        std::fs::create_dir_all(to.join(f).parent().unwrap()).unwrap();
        std::fs::copy(from.join(f), to.join(f)).unwrap();
    }
}

#[test]
fn stage1_creates_decoder_and_reproduces_its_loss_curve() {
    let (cfg, dir) = trained();
    let layout = Layout::new(dir.path());
    assert!(layout.decoder().exists());
    let other = tempfile::tempdir().unwrap();
    std::fs::copy(layout.decoder(), other.path().join("decoder.ckpt")).unwrap();
    let again = Layout::new(other.path());
    pipeline::cmd_stage1(cfg, &again).unwrap();
    assert_eq!(std::fs::read(layout.stage1_log()).unwrap(), std::fs::read(again.stage1_log()).unwrap());
    assert_eq!(std::fs::read(layout.projector()).unwrap(), std::fs::read(again.projector()).unwrap());
    let ck = Checkpoint::load(&layout.projector()).unwrap();
    assert_eq!(ck.config_hash, cfg.hash());
}

#[test]
fn stage2_without_projector_is_a_config_error() {
    let cfg = reduced();
    let dir = tempfile::tempdir().unwrap();
    let err = pipeline::cmd_stage2(&cfg, &Layout::new(dir.path())).unwrap_err();
    assert!(matches!(err, SemiError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn adapt_routes_by_encoder_width() {
    let (cfg, dir) = trained();
    let layout = Layout::new(dir.path());
    let cases = [(48, Route::Pruned), (64, Route::Direct), (96, Route::Selected)];
    for (d, route) in cases {
        let held = HeldOut {
            modality: 3,
            enc_dim: d,
            seed: 5000,
        };
        let rec = pipeline::cmd_adapt(cfg, &layout, Method::Semi, &held, 4, 0).unwrap();
        assert_eq!(rec.route, route, "d_e={d}");
        assert_eq!(rec.selected.len(), if route == Route::Selected { cfg.hypernet.d_h } else { 0 });
        let stored: AdaptRecord = serde_json::from_slice(
            &std::fs::read(layout.adapt_dir().join(format!("m3-d{d}-semi-s4-seed0.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(stored.selected, rec.selected);
        assert_eq!(stored.subset_sha256, rec.subset_sha256);
    }
    let rows = parse_metrics_csv(&std::fs::read_to_string(layout.adapt_dir().join("metrics.csv")).unwrap()).unwrap();
    assert!(rows.len() >= 3);
}

#[test]
fn unknown_method_is_rejected() {
    let err = Method::parse("adapter-soup").unwrap_err();
    assert!(matches!(err, SemiError::Config(_)));
    assert_eq!(Method::parse("ft-projector").unwrap(), Method::FtProjector);
}

#[test]
fn benchmark_resumes_partial_grids() {
    let (cfg, dir) = trained();
    let work = tempfile::tempdir().unwrap();
    copy_stage_outputs(dir.path(), work.path());
    let layout = Layout::new(work.path());
    let full = pipeline::cmd_benchmark(cfg, &layout, Exec::Parallel).unwrap();
    assert_eq!(full.rows.len(), cfg.benchmark.cells());
    // Drop the last rows to simulate an interrupted sweep.
    let text = std::fs::read_to_string(layout.metrics()).unwrap();
    let kept: Vec<&str> = text.lines().take(text.lines().count() - 3).collect();
    std::fs::write(layout.metrics(), kept.join("\n") + "\n").unwrap();
    let resumed = pipeline::cmd_benchmark(cfg, &layout, Exec::Sequential).unwrap();
    let strip = |rows: &[semi_core::eval::MetricsRow]| semi_core::eval::metrics_csv(rows, false);
    assert_eq!(strip(&full.rows), strip(&resumed.rows));
    assert_eq!(full.cka, resumed.cka);
    let routes: Vec<Route> = resumed.subsets.iter().map(|s| s.route).collect();
    assert!(routes.contains(&Route::Pruned) && routes.contains(&Route::Selected));
    let on_disk = pipeline::read_metrics(&layout.metrics()).unwrap();
    assert_eq!(on_disk.len(), cfg.benchmark.cells());
}
