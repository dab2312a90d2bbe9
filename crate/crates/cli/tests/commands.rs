use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
version = 1
seed = 3

[data]
slides = 2
first_seed = 1

[data.slide]
width = 256
height = 256

[data.manifest]
patches_per_slide = 40
patch_size = 32
label_budget = 1.0

[train]
epochs = 2
batch_size = 16

[train.encoder]
architecture = "small-conv"
input_size = 32
width = 8

[heatmap]
slides = 4
first_seed = 50
overlay_size = 64

[heatmap.forest]
trees = 10

[preview]
patches = 1
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn selfpath(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfpath")).args(args).env("SELFPATH_WORKERS", "2").output().unwrap()
}

fn run_ok(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend(extra);
    let o = selfpath(&args);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

#[test]
fn datagen_writes_slides_manifest_and_record() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let dir = run_ok("datagen", &cfg, tmp.path(), &[]);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("datagen-"));
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["seed"], 3);
    for out in record["outputs"].as_array().unwrap() {
        assert!(dir.join(out.as_str().unwrap()).exists(), "{out} missing");
    }
    let manifest = std::fs::read_to_string(dir.join("source/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 80);
    assert_eq!(std::fs::read_dir(dir.join("source/slides")).unwrap().count(), 2);
}

#[test]
fn train_is_idempotent_and_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let a = run_ok("train", &cfg, tmp.path(), &[]);
    let first = std::fs::read(a.join("summary.json")).unwrap();
    let ckpt = std::fs::read(a.join("model.ckpt")).unwrap();
    let b = run_ok("train", &cfg, tmp.path(), &[]);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(b.join("summary.json")).unwrap(), first);
    assert_eq!(std::fs::read(b.join("model.ckpt")).unwrap(), ckpt);
    assert!(std::fs::read_to_string(b.join("metrics.jsonl")).unwrap().contains("\"split\":\"val\""));

    let c = run_ok("train", &cfg, tmp.path(), &["--seed", "4"]);
    assert_ne!(a, c);

    // an explicit empty task list and full budget is the supervised reference
    let reference = SMALL.replace("[train]\n", "[train]\ntasks = []\n");
    let r = run_ok("train", &write_config(tmp.path(), "ref.toml", &reference), tmp.path(), &[]);
    assert_eq!(std::fs::read(r.join("summary.json")).unwrap(), first);
}

#[test]
fn sweep_with_one_budget_and_seed_has_one_row() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}\n[sweep]\nbudgets = [0.5]\nseeds = [1]\n");
    let dir = run_ok("sweep", &write_config(tmp.path(), "sweep.toml", &text), tmp.path(), &[]);
    let table = std::fs::read_to_string(dir.join("table.txt")).unwrap();
    let rows = table.lines().filter(|l| l.starts_with("supervised")).count();
    assert_eq!(rows, 1, "{table}");
    let records = std::fs::read_to_string(dir.join("results.jsonl")).unwrap();
    assert_eq!(records.lines().filter(|l| l.contains("\"kind\":\"summary\"")).count(), 1);
    assert_eq!(records.lines().filter(|l| l.contains("\"kind\":\"cell\"")).count(), 1);
    assert!(std::fs::read_to_string(dir.join("auc_vs_budget.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn heatmap_and_preview_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMALL);
    let dir = run_ok("heatmap", &cfg, tmp.path(), &[]);
    let csv = std::fs::read_to_string(dir.join("features.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().all(|l| l.split(',').count() == 122));
    assert!(dir.join("summary.json").exists() && dir.join("slide_scores.csv").exists());
    assert_eq!(std::fs::read_dir(dir.join("overlays")).unwrap().count(), 4);

    let with_ckpt = SMALL.replace("[heatmap]\n", &format!("[heatmap]\ncheckpoint = {:?}\n", dir.join("model.ckpt")));
    let d2 = run_ok("heatmap", &write_config(tmp.path(), "ckpt.toml", &with_ckpt), tmp.path(), &[]);
    assert_eq!(std::fs::read_to_string(d2.join("features.csv")).unwrap(), csv);

    let p = run_ok("pretext-preview", &cfg, tmp.path(), &[]);
    assert!(p.join("preview.png").exists());
    assert_eq!(std::fs::read_to_string(p.join("preview_rows.txt")).unwrap().lines().count(), 6);
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_task = SMALL.replace("[train]\n", "[train]\ntasks = [{ name = \"jigsaw\" }]\n");
    let cfg = write_config(tmp.path(), "bad.toml", &bad_task);
    let o = selfpath(&["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tasks") && err.contains("jigsaw"), "{err}");

    let unknown = write_config(tmp.path(), "unknown.toml", &SMALL.replace("epochs = 2", "epochz = 2"));
    let o = selfpath(&["train", "--config", unknown.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    let da = write_config(tmp.path(), "da.toml", &SMALL.replace("[train]\n", "[train]\nmode = \"da\"\n"));
    let o = selfpath(&["train", "--config", da.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[target]"));
}

#[test]
fn missing_inputs_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = selfpath(&["train", "--config", "/nonexistent.toml", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent.toml"));

    let text = SMALL.replace("[heatmap]\n", "[heatmap]\ncheckpoint = \"/nonexistent/model.ckpt\"\n");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let o = selfpath(&["heatmap", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
}
