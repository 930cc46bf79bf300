//! Ablation drivers: cell enumeration, detail labels, and the entangled
//! weight table, all on miniature epoch budgets.

use lora_compose::io::{AblationKind, RunConfig};
use lora_compose::pipeline::cmd_ablate;
use lora_compose::tasks::KShot;

fn tiny_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{
        "suite": {"regime": "label_shift", "total_classes": 32, "n_upstream": 3, "noise_sigma": 0.5, "seed": 7},
        "k_grid": [2],
        "seeds": [0],
        "pipeline_seed": 7,
        "hyperparams": {"pretrain_epochs": 20, "upstream_epochs": 5, "adaptation_epochs": 6, "warmup_epochs": 1, "lr_v": 0.001}
    }"#,
    )
    .unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn scaling_n_enumerates_singles_then_compositions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.ablation.kind = AblationKind::ScalingN;
    cfg.ablation.n_grid = vec![1, 3];
    cfg.ablation.k = KShot::Shot(2);
    cfg.suite.n_upstream = 3;

    let (_, report) = cmd_ablate(&cfg).unwrap();
    assert!(!report.incomplete, "{:?}", report.failures);
    // n=1: one uniform cell per upstream task (3); n=3: uniform + learned
    let singles: Vec<&str> = report
        .rows
        .iter()
        .filter(|r| r.detail.starts_with("n=1:"))
        .map(|r| r.detail.as_str())
        .collect();
    assert_eq!(singles.len(), 3, "{singles:?}");
    let composed: Vec<&String> = report
        .rows
        .iter()
        .filter(|r| r.detail == "n=3")
        .map(|r| &r.method)
        .collect();
    assert_eq!(composed.len(), 2);
    assert!(composed.iter().any(|m| *m == "uniform_composition"));
    assert!(composed.iter().any(|m| *m == "learned_composition"));
}

#[test]
fn split_size_covers_every_split() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.ablation.kind = AblationKind::SplitSize;
    cfg.ablation.split_grid = vec![1, 3];
    cfg.ablation.upstream_pool = 30;
    cfg.ablation.k = KShot::Shot(2);

    let (_, report) = cmd_ablate(&cfg).unwrap();
    assert!(!report.incomplete, "{:?}", report.failures);
    for splits in [1usize, 3] {
        let rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.detail == format!("splits={splits}"))
            .collect();
        assert_eq!(rows.len(), 2, "splits={splits}: {rows:?}");
    }
}

#[test]
fn entangled_ablation_reports_mean_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.suite.n_upstream = 4;
    cfg.ablation.kind = AblationKind::Entangled;
    cfg.ablation.entangled_windows = vec![8];
    cfg.ablation.k = KShot::Shot(2);

    let (paths, report) = cmd_ablate(&cfg).unwrap();
    assert!(!report.incomplete, "{:?}", report.failures);
    assert_eq!(report.rows.len(), 2); // uniform + learned
    // the learned cell carries a per-upstream mean-weight summary
    assert_eq!(report.weight_summaries.len(), 1);
    let summary = &report.weight_summaries[0];
    assert_eq!(summary.upstream.len(), 4);
    let total: f64 = summary.mean_weights.iter().sum();
    assert!((total - 1.0).abs() <= 1e-9);
    let csv = std::fs::read_to_string(&paths.weights_csv).unwrap();
    assert!(csv.lines().count() > 2, "{csv}");
}
