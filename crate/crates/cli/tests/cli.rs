use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[sim]
n_users = 240

[train]
epochs = 3
batch_size = 64

[select]
clusters_per_level = 4

[eval]
n_users = 100

[ablation]
n_seeds = 1
"#;

fn sec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sec")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (dir, cfg)
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).to_str().unwrap().to_string()
}

#[test]
fn pipeline_runs_end_to_end() {
    let (dir, cfg) = setup();
    let d = dir.path();
    ok(&sec(&["gen-data", "--config", &cfg, "--out", &p(d, "data")]));
    ok(&sec(&["train", "--config", &cfg, "--data", &p(d, "data/trajectories.jsonl"), "--out", &p(d, "train")]));
    ok(&sec(&[
        "build-centroids",
        "--config",
        &cfg,
        "--data",
        &p(d, "data/trajectories.jsonl"),
        "--checkpoint",
        &p(d, "train/checkpoint.json"),
        "--out",
        &p(d, "bank"),
    ]));
    let ev = sec(&[
        "evaluate",
        "--config",
        &cfg,
        "--checkpoint",
        &p(d, "train/checkpoint.json"),
        "--bank",
        &p(d, "bank/centroids.json"),
        "--out",
        &p(d, "eval"),
    ]);
    ok(&ev);
    let stdout = String::from_utf8(ev.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4, "{stdout}");
    assert!(stdout.contains("adaptive"));

    for f in ["data/summary.json", "train/train_log.csv", "train/leveled/manifest.json", "eval/eval_summary.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/resolved_config.json")).unwrap()).unwrap();
    assert!(resolved["tool_version"].as_str().unwrap().starts_with("sec "));
    assert_eq!(resolved["config"]["sim"]["n_users"], 240);
}

#[test]
fn existing_output_needs_overwrite() {
    let (dir, cfg) = setup();
    let out = p(dir.path(), "data");
    ok(&sec(&["gen-data", "--config", &cfg, "--out", &out]));
    let again = sec(&["gen-data", "--config", &cfg, "--out", &out]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    ok(&sec(&["gen-data", "--config", &cfg, "--out", &out, "--overwrite"]));
}

#[test]
fn exit_codes_follow_error_kind() {
    let (dir, cfg) = setup();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[strat]\nk_levels = 0\n").unwrap();
    assert_eq!(sec(&["gen-data", "--config", &p(d, "bad.toml"), "--out", &p(d, "x")]).status.code(), Some(2));
    assert_eq!(sec(&["gen-data", "--config", &p(d, "missing.toml"), "--out", &p(d, "x")]).status.code(), Some(2));
    assert_eq!(sec(&["train", "--config", &cfg, "--out", &p(d, "t")]).status.code(), Some(2));
    let missing = sec(&["train", "--config", &cfg, "--data", &p(d, "none.jsonl"), "--out", &p(d, "t2")]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(sec(&["ablate"]).status.code(), Some(2));
}

#[test]
fn seed_flag_controls_the_data() {
    let (dir, cfg) = setup();
    let d = dir.path();
    for (out, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        ok(&sec(&["gen-data", "--config", &cfg, "--seed", seed, "--out", &p(d, out)]));
    }
    let read = |o: &str| fs::read(d.join(o).join("trajectories.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn sweep_uses_the_given_grid() {
    let (dir, cfg) = setup();
    let out = p(dir.path(), "sweep");
    let r = sec(&["sweep-lambda", "--config", &cfg, "--grid", "0,0.1", "--out", &out]);
    ok(&r);
    let csv = fs::read_to_string(dir.path().join("sweep/lambda_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(String::from_utf8_lossy(&r.stdout).contains("best lambda"));
}

#[test]
fn show_config_round_trips() {
    let (dir, cfg) = setup();
    let r = sec(&["show-config", "--config", &cfg, "--seed", "3"]);
    ok(&r);
    let path = dir.path().join("resolved.toml");
    fs::write(&path, &r.stdout).unwrap();
    let again = sec(&["show-config", "--config", path.to_str().unwrap()]);
    ok(&again);
    assert_eq!(r.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&r.stdout).contains("seed = 3"));
}
