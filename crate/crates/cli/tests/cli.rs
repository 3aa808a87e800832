use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sketchlab"))
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("sketchlab-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn schema_lists_every_table() {
    let o = run(&["report", "--schema"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for t in ["lemmas.csv", "extract.csv", "tv_sweep.csv", "smallball.csv"] {
        assert!(s.contains(t), "{s}");
    }
}

#[test]
fn extract_writes_csv_json_and_sketch() {
    let d = scratch("extract");
    let out = d.to_str().unwrap();
    let o = run(&["extract", "--scenario", "parity", "--route", "exact", "--seed", "3", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("extract.csv")).unwrap();
    assert!(csv.starts_with("scenario,route,r,m,"));
    assert!(csv.lines().nth(1).unwrap().starts_with("parity,exact,8,8,"));
    let json: String = std::fs::read_to_string(d.join("extract.json")).unwrap();
    assert!(json.contains("\"dimension\": 1"));
    let sketch = std::fs::read_to_string(d.join("sketch-parity-exact.txt")).unwrap();
    assert!(sketch.starts_with("sketch-report v1"));

    let r = run(&["report", "--out", out]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("extract: 1 rows, 0 failed"));
}

#[test]
fn config_file_and_flag_override() {
    let d = scratch("config");
    let cfg = d.join("run.toml");
    std::fs::write(&cfg, "[run]\nscenario = \"mod3\"\nseed = 11\n[params]\nm = 4\n").unwrap();
    let o = run(&["extract", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.join("extract.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("mod3,exact,8,4,"));

    let o = run(&["extract", "--config", cfg.to_str().unwrap(), "--scenario", "constant", "--out", d.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(d.join("sketch-constant-exact.txt").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["extract", "--route", "sideways"]).status.code(), Some(2));
    let d = scratch("codes");
    let bad = d.join("bad.toml");
    std::fs::write(&bad, "[params]\nkappa = 0.0001\nbig_q = 16\n").unwrap();
    let o = run(&["extract", "--config", bad.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("2 problem(s)"), "{err}");
    std::fs::write(&bad, "[params]\nr_sweep = []\n").unwrap();
    assert_eq!(run(&["tv-sweep", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    // The parity algorithm cannot answer a mod-3 question: conflicting fibers.
    let o = run(&["extract", "--scenario", "adversarial", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("conflict"));
    assert_eq!(run(&["report", "--out", d.join("missing").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn smallball_and_lemmas_pass() {
    let d = scratch("lemmas");
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "[budget]\nsmallball_trials = 20000\nlemma_trials = 20000\n").unwrap();
    for verb in ["smallball", "verify-lemmas"] {
        let o = run(&[verb, "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let lemmas = std::fs::read_to_string(d.join("lemmas.csv")).unwrap();
    assert_eq!(lemmas.lines().count(), 126);
    assert!(!lemmas.contains(",false"));
}
