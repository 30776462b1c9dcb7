use std::fs;
use std::path::Path;

use debias_core::dataset::amplify_bias;
use debias_core::harness::{prepare_base, run_experiment, test_split_fingerprint, ExperimentSpec};

fn spec(out: &Path) -> ExperimentSpec {
    let json = serde_json::json!({
        "source": {"synth": {"n": 300, "classes": 4, "dims": 6, "layers": 2, "bias_strength": 0.8, "seed": 9}},
        "ratios": [1, 10],
        "methods": ["ERM", "RW"],
        "seeds": [0],
        "output_dir": out,
        "train": {"learning_rate": 1e-3, "max_epochs": 2, "widths": {"hidden": 8, "adv_hidden": 8, "dual_hidden": 4}},
        "workers": 2
    });
    ExperimentSpec::from_json(&json.to_string()).unwrap()
}

#[test]
fn rerun_only_fills_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec(tmp.path());
    let rows = run_experiment(&spec).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_none()));
    let csv = fs::read(tmp.path().join("report.csv")).unwrap();
    let md = fs::read(tmp.path().join("report.md")).unwrap();

    // A marker in a surviving log shows whether that run was redone.
    let kept = tmp.path().join("logs/ERM_r1_s0.csv");
    fs::write(&kept, "marker").unwrap();
    let missing = tmp.path().join("runs/RW_r10_s0.json");
    fs::remove_file(&missing).unwrap();
    fs::remove_file(tmp.path().join("logs/RW_r10_s0.csv")).unwrap();

    let again = run_experiment(&spec).unwrap();
    assert_eq!(again, rows);
    assert!(missing.exists());
    assert!(tmp.path().join("logs/RW_r10_s0.csv").exists());
    assert_eq!(fs::read_to_string(&kept).unwrap(), "marker");
    assert_eq!(fs::read(tmp.path().join("report.csv")).unwrap(), csv);
    assert_eq!(fs::read(tmp.path().join("report.md")).unwrap(), md);
}

#[test]
fn test_split_is_shared_across_ratios() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = spec(tmp.path());
    let (base, dir) = prepare_base(&spec.source).unwrap();
    let expected = test_split_fingerprint(&base);
    for (ratio, seed) in [(1, 0), (5, 1), (20, 2), (40, 3)] {
        let amplified = amplify_bias(&base, &dir.with_ratio(ratio).unwrap(), seed).unwrap();
        assert_eq!(
            test_split_fingerprint(&amplified),
            expected,
            "ratio {ratio}"
        );
    }
}
