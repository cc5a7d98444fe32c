use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "data": {"train_count": 200, "val_count": 300, "ood_count": 12},
  "validation": {"easy_size": 60, "hard_top_count": 42, "hard_bottom_count": 18},
  "sft": {"epochs": 2, "batch_size": 32},
  "rft": {"epochs": 1, "batch_size": 8, "mini_batch": 4, "max_steps": 3}
}"#;

struct Lab {
    dir: TempDir,
}

impl Lab {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("config.json"), SMALL).unwrap();
        Self { dir }
    }

    fn work(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_planlab"))
            .arg("--config")
            .arg(self.dir.path().join("config.json"))
            .arg("--workdir")
            .arg(self.work())
            .args(["--seed", "3"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "planlab {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.work().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn generate_honours_count() {
    let lab = Lab::new();
    let out = lab.ok(&["generate", "--count", "100"]);
    assert!(out.starts_with("generate: "), "{out}");
    assert_eq!(lines(&lab.work().join("data/train.jsonl")), 100);
    assert_eq!(lines(&lab.work().join("data/ood.jsonl")), 12);
    let manifest: serde_json::Value = serde_json::from_slice(&lab.read("manifests/generate.json")).unwrap();
    assert_eq!(manifest["config"]["data"]["train_count"], 100);
    assert_eq!(manifest["config"]["seed"], 3);
}

#[test]
fn split_reports_four_to_one() {
    let lab = Lab::new();
    lab.ok(&["generate", "--count", "100"]);
    let out = lab.ok(&["split", "--sft-rft", "4:1"]);
    let summary: serde_json::Value = serde_json::from_str(out.trim().strip_prefix("split: ").unwrap()).unwrap();
    assert_eq!(summary["sft"], 80);
    assert_eq!(summary["rft"], 20);
    assert_eq!(summary["val_easy"], 60);
    assert_eq!(summary["val_hard"], 60);
}

#[test]
fn rft_without_sft_names_the_missing_stage() {
    let lab = Lab::new();
    lab.ok(&["generate"]);
    lab.ok(&["split"]);
    let out = lab.run(&["rft"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[missing_stage]: "), "{err}");
    assert!(err.contains("planlab sft"), "{err}");
}

#[test]
fn stage_order_is_enforced() {
    let lab = Lab::new();
    let out = lab.run(&["split"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("planlab generate"));
}

#[test]
fn bad_config_is_a_config_error() {
    let lab = Lab::new();
    fs::write(lab.dir.path().join("config.json"), r#"{"sft": {"epochs": "many"}}"#).unwrap();
    let out = lab.run(&["generate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[config]: ") && err.contains("sft.epochs"), "{err}");
}

fn full_run(lab: &Lab) -> String {
    for args in [
        &["generate"][..],
        &["split"],
        &["sft"],
        &["rft"],
        &["eval"],
        &["ood"],
    ] {
        lab.ok(args);
    }
    lab.ok(&["report"])
}

#[test]
fn pipeline_is_deterministic() {
    let (a, b) = (Lab::new(), Lab::new());
    let report_a = full_run(&a);
    let report_b = full_run(&b);
    assert_eq!(report_a, report_b);
    for rel in [
        "data/train.jsonl",
        "data/tagged.jsonl",
        "logs/sft.jsonl",
        "logs/rft.jsonl",
        "checkpoints/rft.json",
        "eval/rft.planning.json",
        "eval/rft.ood.json",
    ] {
        assert!(a.read(rel) == b.read(rel), "{rel} differs between reruns");
    }
    assert!(report_a.contains("SFT vs RFT"), "{report_a}");
    assert!(report_a.contains("Balanced"), "{report_a}");
    assert!(a.work().join("report.json").exists());
}

#[test]
fn ratio_preset_emits_one_row_per_ratio() {
    let lab = Lab::new();
    lab.ok(&["generate"]);
    lab.ok(&["split"]);
    lab.ok(&["sft"]);
    let out = lab.ok(&["rft", "--ratios", "9:1,7:3,6:4"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("rft [rft-ratio-")).count(), 3, "{out}");
    let report = lab.ok(&["report"]);
    let section = report.split("RFT easy:hard ratio").nth(1).expect("ratio table");
    for ratio in ["9:1", "7:3", "6:4"] {
        assert!(section.contains(&format!("| {ratio} |")), "{ratio} missing from\n{report}");
    }
    let turns: Vec<u64> = out
        .lines()
        .filter_map(|l| l.strip_prefix("rft [rft-ratio-"))
        .map(|l| {
            let json: serde_json::Value = serde_json::from_str(l.split_once("]: ").unwrap().1).unwrap();
            json["turn_samples"].as_u64().unwrap()
        })
        .collect();
    assert!(turns[0] < turns[1] && turns[1] < turns[2], "{turns:?}");
}
