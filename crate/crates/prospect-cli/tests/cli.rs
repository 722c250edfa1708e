use std::path::Path;

use assert_cmd::Command;
use predicates::prelude::*;
use tempfile::TempDir;

fn prospect() -> Command {
    let mut cmd = Command::cargo_bin("prospect").unwrap();
    cmd.env_remove("PROSPECT_SIM_SEED");
    cmd
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gadgets_lists_the_catalog() {
    prospect()
        .arg("gadgets")
        .assert()
        .success()
        .stdout(predicate::str::contains("spectre-pht").and(predicate::str::contains("listing3")));
}

#[test]
fn run_writes_one_record_per_step() {
    let out = prospect()
        .args(["run", "--gadget", "example2", "-n", "25", "--secret", "mem:16=4"])
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let lines: Vec<serde_json::Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0]["step"], 0);
    assert_eq!(lines[0]["directive"], "fetch");
}

#[test]
fn run_in_architectural_mode() {
    prospect()
        .args(["run", "--gadget", "example2", "--arch", "-n", "2"])
        .assert()
        .success()
        .stdout(predicate::str::contains(r#""kind":"load_addr","value":16"#));
}

#[test]
fn run_reads_a_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"gadget":"spectre-pht","mode":"insecure","n":30,"out":"trace.jsonl"}"#).unwrap();
    prospect().args(["run", "--config"]).arg(&cfg).assert().success();
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 30);
}

#[test]
fn verify_passes_on_constant_time_gadgets() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("verdict.json");
    prospect()
        .args(["verify", "--kind", "thm1", "--gadget", "spectre-pht", "--seeds", "5", "--pairs", "4", "--out"])
        .arg(&out)
        .assert()
        .code(0);
    let v = read_json(&out);
    assert_eq!(v["verdict"], "pass");
    assert_eq!(v["cells_checked"], 20);
}

#[test]
fn verify_fails_with_a_witness_in_the_insecure_mode() {
    let dir = TempDir::new().unwrap();
    let (out, witness) = (dir.path().join("verdict.json"), dir.path().join("witness.json"));
    prospect()
        .args(["verify", "--kind", "thm1", "--gadget", "spectre-pht", "--mode", "insecure"])
        .args(["--seeds", "5", "--pairs", "4", "--out"])
        .arg(&out)
        .arg("--witness")
        .arg(&witness)
        .assert()
        .code(1);
    assert_eq!(read_json(&out)["verdict"], "fail");
    let w = read_json(&witness);
    assert_eq!(w["mode"], "insecure-baseline");
    assert_ne!(w["secrets_a"], w["secrets_b"]);
}

#[test]
fn verify_reports_precondition_violations() {
    prospect()
        .args(["verify", "--kind", "thm1", "--gadget", "listing2", "--seeds", "2", "--pairs", "2"])
        .assert()
        .code(2)
        .stdout(predicate::str::contains("precondition-violation"));
    prospect()
        .args(["verify", "--kind", "thm2", "--gadget", "listing2", "--seeds", "2", "--pairs", "2"])
        .assert()
        .code(0);
}

#[test]
fn verify_separates_the_classical_condition() {
    let args = ["--gadget", "listing3", "--mode", "insecure", "--seeds", "5", "--pairs", "4"];
    prospect().args(["verify", "--kind", "classical"]).args(args).assert().code(0);
    prospect().args(["verify", "--kind", "thm2"]).args(args).assert().code(1);
}

#[test]
fn verify_reads_an_experiment_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"kind":"thm2","gadget":"listing2","seeds":3,"pairs":2}"#).unwrap();
    let out = prospect().args(["verify", "--config"]).arg(&cfg).assert().code(0).get_output().stdout.clone();
    let v: serde_json::Value = serde_json::from_slice(&out).unwrap();
    assert_eq!((v["check"].as_str(), v["seeds"].as_u64()), (Some("thm2"), Some(3)));
}

#[test]
fn attack_finds_each_leak() {
    for gadget in ["spectre-pht", "spectre-btb", "spectre-stl", "lvi"] {
        prospect()
            .args(["attack", "--gadget", gadget, "--budget", "200"])
            .assert()
            .code(1)
            .stdout(predicate::str::contains("\"witness\""));
        prospect()
            .args(["attack", "--gadget", gadget, "--mode", "prospect", "--budget", "50"])
            .assert()
            .code(0);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    prospect().args(["verify", "--kind", "thm1", "--gadget", "nope"]).assert().code(2);
    prospect().args(["verify", "--gadget", "spectre-pht"]).assert().code(2);
    prospect().args(["run", "--program", "/nonexistent/p.uasm"]).assert().code(2);
    prospect().args(["run", "--gadget", "example2", "--secret", "mem:99=1"]).assert().code(2);
    prospect().args(["run", "--gadget", "example2", "--strategy", "psychic"]).assert().code(2);
    prospect().args(["verify", "--kind", "thm1", "--gadget", "lvi", "-n", "0"]).assert().code(2);
}

#[test]
fn seeds_fall_back_to_the_environment() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, env: Option<&str>, extra: &[&str]| {
        let path = dir.path().join(name);
        let mut cmd = prospect();
        if let Some(seed) = env {
            cmd.env("PROSPECT_SIM_SEED", seed);
        }
        cmd.args(["verify", "--kind", "thm1", "--gadget", "example2", "--mode", "insecure", "--no-attack"])
            .args(["--seeds", "6", "--pairs", "3"])
            .args(extra)
            .arg("--out")
            .arg(&path)
            .assert()
            .code(0);
        std::fs::read(path).unwrap()
    };
    let from_env = run("env.json", Some("7"), &["--jobs", "1"]);
    let from_env_parallel = run("env4.json", Some("7"), &["--jobs", "4"]);
    let from_flag = run("flag.json", None, &["--seed", "7"]);
    assert_eq!(from_env, from_env_parallel);
    assert_eq!(from_env, from_flag);
    let v: serde_json::Value = serde_json::from_slice(&from_env).unwrap();
    assert_eq!(v["seed"], 7);
}

#[test]
fn export_writes_the_corpus() {
    let dir = TempDir::new().unwrap();
    prospect().args(["export", "--dir"]).arg(dir.path()).assert().success();
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus");
    for entry in std::fs::read_dir(&shipped).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(dir.path().join(&name)).unwrap(),
            std::fs::read(shipped.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    prospect()
        .args(["run", "--program"])
        .arg(dir.path().join("pht.json"))
        .args(["--secret", "mem:16=9", "-n", "5"])
        .assert()
        .success();
}
