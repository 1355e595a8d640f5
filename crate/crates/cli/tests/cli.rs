use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
width = 32
height = 32
train_clips = 2
test_clips = 3
clip_len = 14
entities = 2
entity_size = 4
speed = 1.0
walkway = [14, 26]

[[anomalies]]
kind = "novel_shape"
clip = 0
start = 6
length = 5

[[anomalies]]
kind = "fast_mover"
clip = 1
start = 6
length = 5

[[anomalies]]
kind = "forbidden_region"
clip = 2
start = 6
length = 5
region = [0, 2, 32, 10]
"#;

fn vqunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqunet"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vqunet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn tiny_dataset(tmp: &Path) -> PathBuf {
    let cfg = tmp.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = tmp.join("data");
    ok(&["gen-synthetic", "--seed", "3", "--config", s(&cfg), "--out", s(&data)]);
    data
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(vqunet(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(vqunet(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(vqunet(&["score"]).status.code(), Some(2));
}

#[test]
fn help_documents_every_subcommand() {
    for cmd in ["gen-synthetic", "train", "ablate", "score", "eval-auc", "explain", "eval-map", "plot"] {
        let out = vqunet(&[cmd, "--help"]);
        assert!(out.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage:"), "{cmd}");
    }
    assert!(ok(&["train", "--help"]).contains("VQUNET_"));
}

#[test]
fn runtime_errors_print_one_categorized_line_and_exit_1() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.ckpt");
    let out = vqunet(&[
        "score",
        "--checkpoint",
        s(&missing),
        "--dataset",
        s(tmp.path()),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert!(line.starts_with("error[io]:"), "{stderr}");

    let out = vqunet(&["train", "--override", "epochs=abc", "--out", s(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]:"));
}

#[test]
fn gen_synthetic_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-synthetic", "--seed", "1", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen-synthetic", "--seed", "1", "--config", s(&cfg), "--out", s(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 40);
    assert_eq!(ta, tb);
    let c = tmp.path().join("c");
    ok(&["gen-synthetic", "--seed", "2", "--config", s(&cfg), "--out", s(&c)]);
    assert_ne!(ta, tree(&c));
}

#[test]
fn full_pipeline_on_tiny_synthetic_set() {
    let tmp = TempDir::new().unwrap();
    let data = tiny_dataset(tmp.path());
    let run = tmp.path().join("run");
    let root = format!("dataset_root=\"{}\"", s(&data));
    ok(&[
        "train",
        "--override",
        &root,
        "--override",
        "layout=synthetic",
        "--override",
        "image_size=[32, 32]",
        "--override",
        "epochs=1",
        "--override",
        "batch_size=4",
        "--override",
        "network.levels=2",
        "--override",
        "network.base_channels=4",
        "--override",
        "network.bottleneck_dim=8",
        "--override",
        "network.codebook_size=16",
        "--override",
        "network.n=3",
        "--out",
        s(&run),
    ]);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["finished"], true);
    assert_eq!(manifest["config"]["network"]["base_channels"], 4);
    let ckpt = run.join("last.ckpt");
    assert!(ckpt.is_file());

    let scored = tmp.path().join("scored");
    ok(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--layout",
        "synthetic",
        "--out",
        s(&scored),
        "--heatmaps",
    ]);
    let scores = scored.join("scores");
    let csvs = fs::read_dir(&scores).unwrap().count();
    assert_eq!(csvs, 3);
    let first = fs::read_to_string(scores.join("01.csv")).unwrap();
    assert!(first.starts_with("frame_index,raw_score,normalized_score"), "{first}");
    assert_eq!(first.lines().count(), 1 + 14 - 3);
    assert!(scored.join("heatmaps").join("01").join("000003.png").is_file());

    let auc_json = tmp.path().join("auc.json");
    let printed = ok(&[
        "eval-auc",
        "--scores",
        s(&scores),
        "--labels",
        s(&data),
        "--layout",
        "synthetic",
        "--out",
        s(&auc_json),
    ]);
    assert!(printed.contains("none") && printed.contains("per_video_minmax"));
    let reports: serde_json::Value = serde_json::from_str(&fs::read_to_string(&auc_json).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    for r in reports.as_array().unwrap() {
        let auc = r["auc"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&auc));
        assert_eq!(r["anomalous"], 15);
    }

    let explained = tmp.path().join("explained");
    ok(&[
        "explain",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&data),
        "--layout",
        "synthetic",
        "--out",
        s(&explained),
    ]);
    for agg in ["sum", "mean"] {
        let text = fs::read_to_string(explained.join(agg).join("01.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 11);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(explained.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["config"]["threshold_sum"].as_f64().unwrap() >= 0.0);

    let printed = ok(&[
        "eval-map",
        "--explanations",
        s(&explained),
        "--labels",
        s(&data),
        "--layout",
        "synthetic",
    ]);
    assert!(printed.contains("[sum]") && printed.contains("[mean]"), "{printed}");
    let csv = fs::read_to_string(explained.join("sum").join("map.csv")).unwrap();
    assert!(csv.starts_with("class,ap,support"), "{csv}");
    assert!(!csv.contains("anomalous location"), "{csv}");

    let plots = tmp.path().join("plots");
    ok(&[
        "plot",
        "--scores",
        s(&scores),
        "--dataset",
        s(&data),
        "--layout",
        "synthetic",
        "--out",
        s(&plots),
    ]);
    assert!(plots.join("roc.png").is_file());
    for clip in ["01", "02", "03"] {
        assert!(plots.join(format!("timeline_{clip}.png")).is_file(), "{clip}");
    }
    assert!(plots.join("manifest.json").is_file());
}

#[test]
fn environment_layer_sits_between_file_and_override() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, "epochs = 3\nbatch_size = 2\n").unwrap();
    let run = tmp.path().join("run");
    // Missing dataset root makes training fail after the manifest is written.
    let out = Command::new(env!("CARGO_BIN_EXE_vqunet"))
        .args(["train", "--config", s(&cfg), "--override", "epochs=5", "--out", s(&run)])
        .args(["--override", "image_size=[32, 32]", "--override", "network.levels=2"])
        .env("VQUNET_EPOCHS", "4")
        .env("VQUNET_BATCH_SIZE", "6")
        .env("VQUNET_DATASET_ROOT", s(&tmp.path().join("absent")))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["epochs"], 5);
    assert_eq!(manifest["config"]["batch_size"], 6);
    assert_eq!(manifest["finished"], false);
}
