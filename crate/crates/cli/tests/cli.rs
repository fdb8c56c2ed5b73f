use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
seed = 11

[space]
input_shape = [2, 4, 4]
num_classes = 3

[[space.layers]]
in_channels = 2
out_channels = 3
kernel_sizes = [1, 3]

[[space.layers]]
in_channels = 3
out_channels = 2
kernel_sizes = [1]

[train]
max_steps = 30
batch_size = 8

[search]
candidates = 16

[data]
kind = "planted"
teacher_seed = 2
noise = 0.05
examples = 80
split = [0.6, 0.2, 0.2]
planted = [
  { layer = 0, channel = 0, kernel_size = 3 },
  { layer = 1, channel = 0, kernel_size = 1 },
]
"#;

fn postnas(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postnas"))
        .args(args)
        .env("POSTNAS_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, String) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.toml");
    fs::write(&cfg, CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    (tmp, cfg)
}

#[test]
fn stepwise_commands_match_run() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    let train = json(&postnas(&["train", "-c", &cfg], root));
    let search = json(&postnas(&["search", "-c", &cfg], root));
    let dir = root.join("seed-11");
    for f in ["supernet.ckpt", "train_log.jsonl", "search_report.jsonl", "architecture.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let arch = dir.join("architecture.toml");
    let best = json(&postnas(&["eval", "-c", &cfg, "--architecture", arch.to_str().unwrap()], root));
    assert_eq!(best, search["search"]["val"]);
    let full = json(&postnas(&["eval", "-c", &cfg], root));
    assert_eq!(full, train["train"]["val"]);
    let ckpt = fs::read(dir.join("supernet.ckpt")).unwrap();
    let report = fs::read(dir.join("search_report.jsonl")).unwrap();

    let run = json(&postnas(&["run", "-c", &cfg], root));
    assert_eq!(run["results"]["search"], search["search"]);
    assert_eq!(fs::read(dir.join("supernet.ckpt")).unwrap(), ckpt);
    assert_eq!(fs::read(dir.join("search_report.jsonl")).unwrap(), report);
    assert!(run["results"]["test"]["accuracy"].is_number());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["results"], run["results"]);
}

#[test]
fn enumerate_writes_ranked_lines() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    json(&postnas(&["train", "-c", &cfg], root));
    let e = json(&postnas(&["enumerate", "-c", &cfg], root));
    let text = fs::read_to_string(root.join("seed-11/enumeration.jsonl")).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), e["enumeration"]["evaluated"].as_u64().unwrap() as usize + 1);
    assert_eq!(lines[0]["accuracy"], e["enumeration"]["best"]["accuracy"]);
    assert_eq!(lines.last().unwrap()["kind"], "summary");
}

#[test]
fn overrides_change_the_run_directory() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    json(&postnas(&["train", "-c", &cfg, "--set", "seed=4", "--set", "train.max_steps=5"], root));
    assert!(root.join("seed-4/supernet.ckpt").exists());
    let log = fs::read_to_string(root.join("seed-4/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
}

#[test]
fn config_errors_exit_with_2() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    let out = postnas(&["train", "-c", &cfg, "--set", "train.learning_rate=-1"], root);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    let out = postnas(&["train", "-c", &cfg, "--set", "train.lerning_rate=0.1"], root);
    assert_eq!(out.status.code(), Some(2));
    let out = postnas(&["train", "-c", "/nonexistent.toml"], root);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_3() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    let csv = root.join("d.csv");
    fs::write(&csv, "1,2,3\n").unwrap();
    let text = CONFIG.split("[data]").next().unwrap().to_string()
        + &format!("[data]\nkind = \"csv\"\npath = \"{}\"\nhas_header = false\n", csv.display());
    let cfg2 = root.join("csv.toml");
    fs::write(&cfg2, text).unwrap();
    let out = postnas(&["train", "-c", cfg2.to_str().unwrap()], root);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let _ = cfg;
}

#[test]
fn foreign_checkpoint_is_refused() {
    let (tmp, cfg) = setup();
    let root = tmp.path();
    json(&postnas(&["train", "-c", &cfg], root));
    let ckpt = root.join("seed-11/supernet.ckpt");
    let out = postnas(
        &["search", "-c", &cfg, "--set", "space.layers.1.out_channels=3", "--checkpoint", ckpt.to_str().unwrap()],
        root,
    );
    assert!(!out.status.success());
}
