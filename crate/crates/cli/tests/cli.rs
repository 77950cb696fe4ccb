use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
track = "synthetic"
seed = 1

[synthetic]
n_per_class = 4

[train]
epochs = 2
pretrain_epochs = 1
batch_size = 16
"#;

fn odg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run odg")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("runs/a");
    ok(&odg(&["train", "--config", &cfg, "--out-dir", s(&run)]));
    for f in ["model.ckpt", "losses.jsonl", "config.effective.toml", "train_summary.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(run.join("checkpoints/epoch-000.ckpt").is_file());
    assert!(run.join("checkpoints/epoch-001.ckpt").is_file());
    let effective = fs::read_to_string(run.join("config.effective.toml")).unwrap();
    assert!(effective.contains("n_per_class = 4"));

    let ckpt = run.join("model.ckpt");
    let out = odg(&["eval", "--config", &cfg, "--checkpoint", s(&ckpt), "--out-dir", s(&run)]);
    ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("hs"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);

    let rep = dir.path().join("rep");
    ok(&odg(&["report", "--log-dir", s(&dir.path().join("runs")), "--out-dir", s(&rep)]));
    let summary = fs::read_to_string(rep.join("summary.md")).unwrap();
    assert!(summary.contains("final ce"));
    let svg = fs::read_to_string(rep.join("losses-00.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<text"));
}

#[test]
fn unknown_key_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "track = \"synthetic\"\n\n[train]\nlearning_rat = 0.1\n");
    let out = odg(&["train", "--config", &cfg, "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("learning_rat") && err.contains("line 4"), "{err}");
}

#[test]
fn overrides_reach_the_effective_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let args = [
        "train", "--config", &cfg, "--out-dir", s(&run), "--seed", "9", "--loss-weights", "1,0,0.5",
        "--split-depth", "shallow",
    ];
    ok(&odg(&args));
    let effective = fs::read_to_string(run.join("config.effective.toml")).unwrap();
    assert!(effective.contains("seed = 9"));
    assert!(effective.contains("split_depth = \"shallow\""), "{effective}");
    assert!(effective.contains("disc = 0.0"));
}

#[test]
fn empty_log_dir_exits_with_dedicated_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = odg(&["report", "--log-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));
}

#[test]
fn ablation_writes_tables_for_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out_dir = dir.path().join("abl");
    let args = [
        "ablate", "--config", &cfg, "--axis", "split-depth", "--seeds", "0,1", "--parallel", "2", "--out-dir",
        s(&out_dir),
    ];
    ok(&odg(&args));
    let tables: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("tables.json")).unwrap()).unwrap();
    let tables = tables.as_array().unwrap();
    assert_eq!(tables.len(), 2);
    for t in tables {
        assert_eq!(t["col_labels"].as_array().unwrap().len(), 3);
        assert!(t["mean"][0].as_array().unwrap().iter().all(|v| v.is_number()));
    }
    let cells: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("cells.json")).unwrap()).unwrap();
    assert_eq!(cells.as_array().unwrap().len(), 6);
    assert!(fs::read_to_string(out_dir.join("tables.txt")).unwrap().contains("split-depth hs"));
}

#[test]
fn unknown_axis_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = odg(&["ablate", "--config", &cfg, "--axis", "depth", "--out-dir", s(dir.path())]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    ok(&odg(&["gradcheck", "--samples", "50", "--out-dir", s(dir.path())]));
    let reports: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 5);
    assert!(reports.iter().all(|r| r["passed"] == true));
}

#[test]
fn generate_writes_images_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let data = dir.path().join("data");
    ok(&odg(&["generate", "--config", &cfg, "--out-dir", s(&data)]));
    for d in 0..3 {
        let manifest = fs::read_to_string(data.join(format!("domain{d}.tsv"))).unwrap();
        assert_eq!(manifest.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).count(), 40);
    }
    let pngs = fs::read_dir(data.join("domain0")).unwrap().count();
    assert_eq!(pngs, 40);
}
