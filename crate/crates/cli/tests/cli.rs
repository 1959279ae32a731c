use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "env": {"name": "secret_slots"},
  "variant": "vdn_sgi",
  "learner": {"total_episodes": 32, "batch_size": 8, "eval_interval": 16, "eval_episodes": 10},
  "distill": {"episodes": 4, "epochs": 30},
  "eval": {"episodes": 10},
  "seeds": [0, 1]
}"#;

fn ptde(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptde"))
        .args(args)
        .current_dir(dir)
        .env("PTDE_LOG", "quiet")
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("spawn ptde")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_then_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    for verb in ["train1", "distill", "eval"] {
        let o = ptde(dir.path(), &[verb, "--config", "c.json", "--out", "runs"]);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    let o = ptde(dir.path(), &["report", "runs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("vdn_sgi"), "{table}");
    let csv = std::fs::read_to_string(dir.path().join("runs/report.csv")).unwrap();
    assert!(csv.starts_with("variant,seeds,"));
}

#[test]
fn single_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    let o = ptde(dir.path(), &["train1", "--config", "c.json", "--seed", "4", "--out", "out"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("out")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    assert!(run.join("seed-4/stage1.ckpt").exists());
    assert!(!run.join("seed-0").exists());
}

#[test]
fn distill_before_train1_fails_with_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    let o = ptde(dir.path(), &["distill", "--config", "c.json", "--seed", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("stage1.ckpt"), "{}", stderr(&o));
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{"env":{"name":"secret_slots"},"variant":"qmix","learner":{"lr":"fast"}}"#).unwrap();
    let o = ptde(dir.path(), &["train1", "--config", "c.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learner.lr"), "{}", stderr(&o));
    std::fs::write(dir.path().join("c.json"), r#"{"env":{"name":"secret_slots"},"variant":"qmix_xyz"}"#).unwrap();
    let o = ptde(dir.path(), &["train1", "--config", "c.json"]);
    assert!(stderr(&o).contains("variant"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ptde(dir.path(), &["report", "."]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("eval.csv"), "{}", stderr(&o));
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for e in std::fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        ptde::config::ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}
