use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
num_tasks = 4
input_dim = 4
trunk_dims = [6]
cluster_hidden_dims = [5]
cluster_counts = [2]
batch_size = 16
learning_rate = 0.01
epochs = 3
freeze_after_epochs = 2
seed = 5

[data]
num_groups = 2
examples_per_task = 30
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clustershare"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["config.toml", "metrics.csv", "clusters.json", "model.ckpt"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,task_id,split,accuracy,loss_lp,loss_lc"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 4 * 2);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train(&config, &a, &[]).status.success());
    assert!(train(&config, &b, &[]).status.success());
    for f in ["metrics.csv", "clusters.json", "model.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(train(&config, &out, &["--seed", "77"]).status.success());
    let snapshot = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(snapshot.lines().any(|l| l.trim() == "seed = 77"), "{snapshot}");
    let base = dir.path().join("base");
    assert!(train(&config, &base, &[]).status.success());
    assert_ne!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(base.join("metrics.csv")).unwrap());
}

#[test]
fn too_many_clusters_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("cluster_counts = [2]", "cluster_counts = [9]"));
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cluster_counts"), "{}", stderr(&o));
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn divergence_exits_with_two_and_keeps_partial_logs() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace("learning_rate = 0.01", "learning_rate = 1e300\noptimizer = \"sgd\"\nhidden_activation = \"identity\"");
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out.join("metrics.csv").is_file());
    assert!(out.join("clusters.json").is_file());
    assert!(!out.join("model.ckpt").exists());
}

#[test]
fn eval_prints_every_task_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    assert!(train(&config, &out, &[]).status.success());
    let ckpt = out.join("model.ckpt");
    let o = run(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", out.join("config.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 4 + 1, "{text}");
    for t in 0..4 {
        assert!(lines[1 + t].starts_with(&format!("task{t:02}")), "{text}");
    }
    assert!(lines[5].starts_with("AVG"));
    assert!(out.join("eval.csv").is_file());
}

#[test]
fn eval_of_a_missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--checkpoint", dir.path().join("nope.ckpt").to_str().unwrap(), "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

fn dump_for(counts: &str) -> String {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &SMALL.replace("cluster_counts = [2]", counts));
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["dump-clusters", "--checkpoint", out.join("model.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    stdout(&o)
}

#[test]
fn dump_clusters_with_one_cluster_per_task_lists_singletons() {
    let text = dump_for("cluster_counts = [4]");
    let groups: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with("cluster")).collect();
    assert_eq!(groups.len(), 4, "{text}");
    assert!(groups.iter().all(|g| !g.contains(',')), "{text}");
}

#[test]
fn dump_clusters_with_one_cluster_lists_every_task() {
    let text = dump_for("cluster_counts = [1]");
    assert!(text.contains("cluster 0: {task00, task01, task02, task03}"), "{text}");
}

#[test]
fn bad_flags_exit_with_one() {
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
