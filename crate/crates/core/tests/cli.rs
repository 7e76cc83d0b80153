mod common;

use std::collections::BTreeMap;
use std::path::Path;

use hysnet::cli::{AblationSummary, WeightStats};
use hysnet::data::Provenance;
use hysnet::model::PredictorMode;
use hysnet::train::Checkpoint;
use tempfile::TempDir;

use common::*;

fn ok(args: &[&str]) -> String {
    let out = run_cli(args);
    assert!(
        out.status.success(),
        "hysnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails(args: &[&str]) -> (i32, String) {
    let out = run_cli(args);
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

const TINY: &str = r#"{"train": {"epochs": 2, "base_lr": 0.001, "batch_size": 2, "patches_per_volume": 1}}"#;

/// Six 16^3 phantoms and a two-epoch hyper-mode checkpoint.
fn tiny_run(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    ok(&["synth", "--out", s(&data), "--count", "6", "--extent", "16", "--seed", "2"]);
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = dir.join("run");
    ok(&["train", "--manifest", s(&data.join("manifest.csv")), "--config", s(&cfg), "--out", s(&run)]);
    (data.join("manifest.csv"), run.join("final.hckp"))
}

#[test]
fn synth_is_deterministic_and_complete() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("d");
    let args = ["synth", "--out", s(&out), "--count", "10", "--seed", "7", "--extent", "16"];
    ok(&args);
    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    ok(&args);
    assert_eq!(first, snapshot(&out));
    assert_eq!(csv_rows(&out.join("manifest.csv")).len(), 10);
    assert_eq!(first.keys().filter(|k| k.ends_with(".hvol")).count(), 10);
    assert!(first.contains_key("run.json"));
}

#[test]
fn degenerate_sigma_range_shares_sigma() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("d");
    ok(&["synth", "--out", s(&out), "--count", "4", "--extent", "16", "--sigma-range", "0.1:0.1"]);
    let prov = Provenance::load(&out.join("phantoms.json")).unwrap();
    assert!(prov.phantoms.iter().all(|p| p.spec.sigma == 0.1));
    let (code, err) = fails(&["synth", "--out", s(&out), "--sigma-range", "0.2:0.1"]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(fails(&["synth", "--out", "x", "--bogus", "1"]).0, 2);
    assert_eq!(fails(&["nonsense"]).0, 2);
    let t = TempDir::new().unwrap();
    let missing = t.path().join("missing.csv");
    let (code, err) = fails(&["train", "--manifest", s(&missing), "--out", s(&t.path().join("r"))]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.csv"), "{err}");
    let bad_cfg = t.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"train": {"epoch": 1}}"#).unwrap();
    std::fs::write(&missing, "path,score\n").unwrap();
    let (code, err) = fails(&["train", "--manifest", s(&missing), "--config", s(&bad_cfg), "--out", "r"]);
    assert_eq!(code, 2);
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn gradcheck_passes_with_exit_0() {
    let out = ok(&["gradcheck", "--seed", "3"]);
    assert!(out.contains("PASS conv3d.input"), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn train_eval_and_weights_pca() {
    let t = TempDir::new().unwrap();
    let (manifest, ckpt) = tiny_run(t.path());
    let run = ckpt.parent().unwrap();
    for f in ["final.hckp", "best.hckp", "log.csv", "run.json", "train_manifest.csv", "val_manifest.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    assert_eq!(csv_rows(&run.join("log.csv")).len(), 2);

    let out = t.path().join("eval/pred.csv");
    ok(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--patch", "16", "--stride", "8", "--out", s(&out)]);
    assert_eq!(csv_rows(&out).len(), 6);
    assert_eq!(csv_rows(&t.path().join("eval/pred.metrics.csv")).len(), 1);
    assert!(t.path().join("eval/pred.run.json").is_file());

    let rejected = t.path().join("eval/rejected.csv");
    let (code, err) = fails(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--patch", "6", "--stride", "2", "--out", s(&rejected)]);
    assert_eq!(code, 2);
    assert!(err.contains("incompatible"), "{err}");
    assert!(!rejected.exists());

    let cloud = t.path().join("pca/cloud.csv");
    let stdout = ok(&["weights-pca", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&cloud)]);
    assert!(stdout.contains("between="), "{stdout}");
    let rows = csv_rows(&cloud);
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0][0], "blobs");
    assert_eq!(rows[1][0], "lattice");
    let stats = WeightStats::load(&t.path().join("pca/cloud.stats.json")).unwrap();
    assert_eq!(stats.dims, 8 * 33 + 4 * 9 + 5);

    let layer = t.path().join("pca/layer2.csv");
    ok(&["weights-pca", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&layer), "--layer", "2"]);
    assert_eq!(WeightStats::load(&t.path().join("pca/layer2.stats.json")).unwrap().dims, 5);
}

#[test]
fn weights_pca_guards() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("blobs");
    ok(&["synth", "--out", s(&data), "--count", "4", "--extent", "16", "--classes", "blobs"]);
    let cfg = t.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let manifest = data.join("manifest.csv");
    ok(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&t.path().join("h"))]);
    let cloud = t.path().join("single.csv");
    let (code, err) = fails(&["weights-pca", "--manifest", s(&manifest), "--checkpoint", s(&t.path().join("h/final.hckp")), "--out", s(&cloud)]);
    assert_eq!(code, 2);
    assert!(err.contains("contract"), "{err}");
    assert_eq!(csv_rows(&cloud).len(), 4);

    ok(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--mode", "fixed", "--out", s(&t.path().join("f"))]);
    let fixed = t.path().join("f/final.hckp");
    assert_eq!(Checkpoint::load(&fixed).unwrap().mode(), PredictorMode::Fixed);
    let (code, err) = fails(&["weights-pca", "--manifest", s(&manifest), "--checkpoint", s(&fixed), "--out", s(&t.path().join("x.csv"))]);
    assert_eq!(code, 2);
    assert!(err.contains("fixed"), "{err}");
}

#[test]
fn ablate_reports_both_modes() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "8", "--extent", "16"]);
    let cfg = t.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = t.path().join("ablate");
    ok(&["ablate", "--manifest", s(&data.join("manifest.csv")), "--config", s(&cfg), "--out", s(&out)]);
    let rows = csv_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0].as_str(), rows[1][0].as_str()), ("hyper", "fixed"));
    let summary = AblationSummary::load(&out.join("summary.json")).unwrap();
    for r in &summary.rows {
        assert!(r.srocc.is_finite() && r.plcc.is_finite(), "{r:?}");
    }
    let split = |m: &str| std::fs::read(out.join(m).join("val_manifest.csv")).unwrap();
    assert_eq!(split("hyper"), split("fixed"));
}

#[test]
fn strict_training_is_byte_identical() {
    let t = TempDir::new().unwrap();
    let data = t.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "4", "--extent", "16"]);
    let cfg = t.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let run = |name: &str| {
        let out = t.path().join(name);
        ok(&["train", "--manifest", s(&data.join("manifest.csv")), "--config", s(&cfg), "--out", s(&out), "--strict-deterministic"]);
        ["final.hckp", "best.hckp", "log.csv"].map(|f| std::fs::read(out.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}
