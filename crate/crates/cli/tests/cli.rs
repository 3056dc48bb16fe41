use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_latentloop");

const TINY: &str = r#"{
  "model": {"family": "ts", "context_len": 32, "horizon": 8, "patch_size": 8,
    "stack": {"kind": "plain", "layers": 1, "block": {"model_dim": 16, "n_heads": 2, "ffn_dim": 32, "dropout_p": 0.0}},
    "feedback_hidden": 16, "recurrence": {"r_train": 1, "r_eval": 1, "max_step_embeddings": 1}},
  "optim": {"lr": 0.003, "batch_size": 16, "max_epochs": 2, "patience": 2},
  "data": {"name": "tiny", "seed": 3, "split": {"stride": 4}, "source": {"type": "synthetic_ts", "generator": {"family": "sinusoid", "periods": [12.0], "amplitudes": [1.0], "ar_coef": 0.5, "noise_std": 0.1, "length": 300, "channels": 1}}},
  "sweep": {"r_train": [0, 1], "r_eval": [0, 1, 2], "looped": [[1, 2]]},
  "seeds": [0, 1]}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("LATENTLOOP_SEED").output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", s(&out), "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["weights.bin", "history.jsonl", "records.jsonl", "config.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let records = std::fs::read_to_string(out.join("records.jsonl")).unwrap();
    assert!(records.lines().all(|l| l.contains("\"seed\":4")));
}

#[test]
fn sweep_and_report_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut reports = Vec::new();
    for (run_dir, jobs) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(run_dir);
        let o = run(&["sweep", "--config", &cfg, "--out", s(&out), "--jobs", jobs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(&["report", "--config", &cfg, "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["report.json", "report.txt", "depth_scaling.json"] {
            assert!(out.join(f).is_file(), "missing {f}");
        }
        reports.push((std::fs::read(out.join("records.jsonl")).unwrap(), std::fs::read(out.join("report.json")).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &TINY.replace("\"patch_size\": 8", "\"patch_size\": 0"));
    let o = run(&["train", "--config", &cfg, "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());

    let o = run(&["sweep", "--config", s(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn incomplete_records_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    assert!(run(&["sweep", "--config", &cfg, "--out", s(&out)]).status.success());
    let path = out.join("records.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"looped(1,2)\"")).collect();
    assert!(kept.len() < text.lines().count());
    std::fs::write(&path, kept.join("\n") + "\n").unwrap();
    let o = run(&["report", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = Command::new(BIN)
        .args(["train", "--config", &cfg, "--out", s(&out)])
        .env("LATENTLOOP_SEED", "9")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(out.join("records.jsonl")).unwrap().contains("\"seed\":9"));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if let Err(e) = latentloop::harness::RunConfig::load(&path) {
            panic!("{}: {e}", path.display());
        }
        n += 1;
    }
    assert!(n >= 3);
}
