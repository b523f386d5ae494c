use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stratoseg::data::{load_labels, load_volume};

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_stratoseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("STRATOSEG_CACHE_DIR")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn phantoms(dir: &Path, n: usize) -> PathBuf {
    let d = dir.join("data");
    ok(&[
        "phantom",
        "--miniature",
        "--phantoms",
        &n.to_string(),
        "--seed",
        "1",
        "-o",
        s(&d),
    ]);
    d
}

/// Miniature training settings shared by the train/infer tests.
fn train_config(dir: &Path) -> PathBuf {
    let p = dir.join("train.json");
    std::fs::write(
        &p,
        r#"{
  "schema_version": 1,
  "width": 0.125,
  "augment": false,
  "sampling": {"voi_size": [16, 16, 16], "negatives_per_scan": 1},
  "sliding": {"window": [32, 32, 32], "stride": [16, 16, 16]},
  "plan": {"stage1_epochs": 1, "stage2_epochs": 2, "stage3_epochs": 1, "batch_size": 4}
}"#,
    )
    .unwrap();
    p
}

#[test]
fn phantom_generation_is_seeded() {
    let t = tempfile::tempdir().unwrap();
    let a = phantoms(t.path(), 2);
    let b = t.path().join("again");
    ok(&["phantom", "--miniature", "--phantoms", "2", "--seed", "1", "-o", s(&b)]);
    for f in ["phantom_000_ct.nii.gz", "phantom_001_label.nii.gz", "catalog.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let vol = load_volume(&a.join("phantom_000_ct.nii.gz")).unwrap();
    assert_eq!(vol.shape(), [32, 32, 32]);
    assert!(a.join("config.json").exists());
}

#[test]
fn search_needs_something_to_search() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["search", "--miniature", "-o", s(&t.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing to search"));
}

#[test]
fn search_is_reproducible_and_holds_logits_during_warmup() {
    let t = tempfile::tempdir().unwrap();
    let data = phantoms(t.path(), 2);
    let args = |o: &Path| {
        vec![
            "search".to_string(),
            "--data-dir".into(),
            s(&data).into(),
            "--sh".into(),
            "search".into(),
            "--warmup-epochs".into(),
            "2".into(),
            "--joint-epochs".into(),
            "1".into(),
            "--width".into(),
            "0.125".into(),
            "-o".into(),
            s(o).into(),
        ]
    };
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for o in [&a, &b] {
        let v = args(o);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    for f in ["genotype_sh.json", "alphas_sh.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    assert!(!a.join("genotype_anchor.json").exists());
    let csv = String::from_utf8(read(a.join("alphas_sh.csv"))).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3 * 4);
    for r in rows.iter().filter(|r| r[0] != "2") {
        assert!(r[2..].iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{r:?}");
    }
    // the searched file is usable as a training source
    let g = stratoseg::Genotype::from_json(&String::from_utf8(read(a.join("genotype_sh.json"))).unwrap()).unwrap();
    assert_eq!(g.len(), 4);
}

#[test]
fn train_resume_infer_eval() {
    let t = tempfile::tempdir().unwrap();
    let data = phantoms(t.path(), 3);
    let cfg = train_config(t.path());
    let full = t.path().join("full");
    ok(&["train", "--config", s(&cfg), "--data-dir", s(&data), "-o", s(&full)]);

    let log = String::from_utf8(read(full.join("train_log.csv"))).unwrap();
    let stages: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(stages, ["1", "2", "2", "2", "2", "2", "2", "3", "3", "3", "3"]);
    for c in [
        "stage1_epoch000",
        "stage2_epoch001",
        "stage2_epoch002",
        "stage3_epoch003",
    ] {
        assert!(full.join("checkpoints").join(format!("{c}.ckpt")).exists(), "{c}");
    }
    let snapshot = String::from_utf8(read(full.join("config.json"))).unwrap();
    assert!(snapshot.contains("\"mode\": \"train\""));

    // resuming after stage 1 reproduces the rest of the run
    let resumed = t.path().join("resumed");
    let ck = full.join("checkpoints/stage1_epoch000.ckpt");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&data),
        "--resume",
        s(&ck),
        "-o",
        s(&resumed),
    ]);
    assert_eq!(read(resumed.join("train_log.csv")), read(full.join("train_log.csv")));

    // inference twice gives identical label files of the input's shape
    let ckpt = full.join("pipeline.ckpt");
    let ct = data.join("phantom_000_ct.nii.gz");
    let (p1, p2) = (t.path().join("pred1"), t.path().join("pred2"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--overlays", "-o", s(&p1), s(&ct)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "-o", s(&p2), s(&ct)]);
    let label = "phantom_000_label.nii.gz";
    assert_eq!(read(p1.join(label)), read(p2.join(label)));
    let pred = load_labels(&p1.join(label), None).unwrap();
    assert_eq!(pred.shape(), load_volume(&ct).unwrap().shape());
    assert!(p1.join("phantom_000_overlay.png").exists());
    let runtime = String::from_utf8(read(p1.join("runtime.csv"))).unwrap();
    assert!(runtime.starts_with("case,seconds\nphantom_000,"));

    // the prediction is scored; the two cases without predictions are listed as skipped
    let ev = t.path().join("eval");
    ok(&["eval", "--pred", s(&p1), "--gt", s(&data), "-o", s(&ev)]);
    let report: serde_json::Value = serde_json::from_slice(&read(ev.join("metrics.json"))).unwrap();
    assert_eq!(report["cases"], serde_json::json!(["phantom_000"]));
    assert_eq!(report["skipped"].as_array().unwrap().len(), 2);
    assert!(read(ev.join("metrics.csv")).starts_with(b"organ,stratum,dsc,hd_mm,asd_mm\n"));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = phantoms(t.path(), 2);
    let ev = t.path().join("eval");
    ok(&["eval", "--pred", s(&data), "--gt", s(&data), "-o", s(&ev)]);
    let report: serde_json::Value = serde_json::from_slice(&read(ev.join("metrics.json"))).unwrap();
    let r = &report["report"];
    let organs = r["organs"].as_array().unwrap();
    assert_eq!(organs.len(), 6);
    for o in organs {
        assert_eq!(o["dsc"], 1.0);
        assert_eq!(o["hd_mm"], 0.0);
        assert_eq!(o["asd_mm"], 0.0);
    }
    // stratum rows average their member organs
    for st in r["strata"].as_array().unwrap() {
        let members: Vec<f64> = organs
            .iter()
            .filter(|o| o["stratum"] == st["stratum"])
            .map(|o| o["dsc"].as_f64().unwrap())
            .collect();
        let mean = members.iter().sum::<f64>() / members.len() as f64;
        assert!((st["dsc"].as_f64().unwrap() - mean).abs() < 1e-12);
    }
    assert!(report["skipped"].as_array().unwrap().is_empty());

    // nothing matched: nonzero exit
    let empty = t.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(&[
        "eval",
        "--pred",
        s(&empty),
        "--gt",
        s(&data),
        "-o",
        s(&t.path().join("e2")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no case has both"));
}

#[test]
fn config_flags_override_file_values() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"schema_version": 1, "seed": 5, "phantom": {"count": 1, "miniature": true}}"#,
    )
    .unwrap();
    let o = t.path().join("o");
    ok(&["phantom", "--config", s(&cfg), "--seed", "9", "-o", s(&o)]);
    let snap: serde_json::Value = serde_json::from_slice(&read(o.join("config.json"))).unwrap();
    assert_eq!(snap["seed"], 9);
    assert_eq!(snap["phantom"]["count"], 1);
    assert_eq!(snap["mode"], "phantom");
    assert!(o.join("phantom_000_ct.nii.gz").exists() && !o.join("phantom_001_ct.nii.gz").exists());

    std::fs::write(&cfg, r#"{"schema_version": 7}"#).unwrap();
    assert!(!run(&["phantom", "--config", s(&cfg), "-o", s(&o)]).status.success());
}
