use std::path::Path;
use std::process::{Command, Output};

fn slotbell(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotbell"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"{
  "simulate": {
    "n_pulses": 60000,
    "pair_yield_per_pulse": 0.08,
    "schedule": {"kind": "chsh", "runs_per_setting": 2},
    "seed": 17
  },
  "analysis": {"slots": ["5x100"]}
}"#;

fn write_config(dir: &Path, body: &str) {
    std::fs::write(dir.join("cfg.json"), body).unwrap();
}

#[test]
fn pipeline_smoke_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    for out in ["o1", "o2"] {
        let r = slotbell(&["pipeline", "--config", "cfg.json", "--out", out], dir.path());
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let s1 = std::fs::read_to_string(dir.path().join("o1/summary.json")).unwrap();
    let s2 = std::fs::read_to_string(dir.path().join("o2/summary.json")).unwrap();
    assert_eq!(s1, s2);
    let v: serde_json::Value = serde_json::from_str(&s1).unwrap();
    assert_eq!(v["n_runs"], 8);
    for key in ["sync", "slot_configs", "coincidences"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("o1/chsh_5x100.csv").exists());
}

#[test]
fn seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), SMALL);
    assert!(slotbell(&["pipeline", "--config", "cfg.json", "--out", "a"], dir.path()).status.success());
    assert!(slotbell(&["pipeline", "--config", "cfg.json", "--out", "b", "--seed", "18"], dir.path()).status.success());
    let a = std::fs::read(dir.path().join("a/summary.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/summary.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("sim.json"),
        r#"{"n_pulses": 60000, "pair_yield_per_pulse": 0.08, "schedule": {"kind": "chsh", "runs_per_setting": 2}}"#,
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let r = slotbell(args, dir.path());
        assert!(r.status.success(), "{args:?}: {}", String::from_utf8_lossy(&r.stderr));
        r
    };
    ok(&["simulate", "--config", "sim.json", "--out", "data"]);
    ok(&["ingest", "--manifest", "data/manifest.json", "--out", "st"]);
    ok(&["sync", "--manifest", "data/manifest.json", "--out", "st"]);
    ok(&["coincidences", "--manifest", "data/manifest.json", "--out", "st", "--slots", "5x100"]);
    let chsh = ok(&["chsh", "--manifest", "data/manifest.json", "--slots", "5x100"]);
    let text = String::from_utf8(chsh.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("slot_index,S,sigma"));
    assert_eq!(text.lines().count(), 6);

    ok(&["randomness", "--series", "st/series_5x100.csv", "--out", "st"]);
    ok(&["ttest", "--series", "st/series_5x100.csv", "--out", "st", "--df-convention", "slots"]);
    ok(&["report", "--series", "st/series_5x100.csv", "st/series_5x100.csv", "--out", "rep"]);
    for f in ["st/ingest.json", "st/sync.json", "st/coincidences/run000.csv", "rep/report_5x100_kc_alice.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn bad_slots_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), &SMALL.replace("5x100", "4x100"));
    let r = slotbell(&["pipeline", "--config", "cfg.json", "--out", "o"], dir.path());
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("slots"));
    assert!(!dir.path().join("o/summary.json").exists());
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = slotbell(&["chsh", "--manifest", "absent.json"], dir.path());
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn unknown_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let r = slotbell(&["pipeline", "--frobnicate"], dir.path());
    assert!(!r.status.success());
    assert_eq!(r.status.code(), Some(2));
}
