use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_netslice"));
    c.env("RUST_LOG", "warn");
    c
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn demo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.json")
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(sub)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn series_csv(rows: &[(u32, u32, u32)]) -> String {
    let mut s = String::from("slot,users_q,mcs_q,demand_prb\n");
    for (t, (u, m, d)) in rows.iter().enumerate() {
        s += &format!("{t},{u},{m},{d}\n");
    }
    s
}

fn write_trial(dir: &Path, series: &[Vec<(u32, u32, u32)>], p_h: f64) -> PathBuf {
    let mut names = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let name = format!("s{i}.csv");
        fs::write(dir.join(&name), series_csv(s)).unwrap();
        names.push(format!("\"{name}\""));
    }
    let n = series.len();
    let cfg = format!(
        "{{\"series\": [{}], \"p_h\": [{}], \"alpha\": [{}]}}",
        names.join(", "),
        vec![p_h.to_string(); n].join(", "),
        vec!["0.05"; n].join(", ")
    );
    let path = dir.join("trial.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn ingest_config(dir: &Path, raw: &str) -> PathBuf {
    fs::write(dir.join("raw.csv"), raw).unwrap();
    let cfg = dir.join("ingest.json");
    fs::write(
        &cfg,
        r#"{"slices": [{"name": "s", "raw": "raw.csv", "bitrate_kbps": 500}]}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn ingest_reports_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ingest_config(
        dir.path(),
        "timestamp,sfn,subframe,rnti,direction,mcs_idx\n1.0,1,0,5,1,10\n",
    );
    let o = run("ingest", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nof_prb"), "{}", stderr(&o));
}

#[test]
fn ingest_reports_malformed_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ingest_config(
        dir.path(),
        "timestamp,sfn,subframe,rnti,direction,mcs_idx,nof_prb\n1.0,1,0,5,1,10,4\n1.5,1,0,5,1,ten,4\n",
    );
    let o = run("ingest", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("row 3") && stderr(&o).contains("mcs_idx"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn ingest_empty_file_writes_empty_series() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ingest_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = run("ingest", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"));
    assert_eq!(
        fs::read_to_string(out.join("s.csv")).unwrap().trim(),
        "slot,users_q,mcs_q,demand_prb"
    );
}

#[test]
fn ingest_fixture_matches_golden_series() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("ingest", &data("ingest_100.json"), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let got = fs::read_to_string(dir.path().join("fixture.csv")).unwrap();
    assert_eq!(got, fs::read_to_string(data("golden_slots.csv")).unwrap());
}

#[test]
fn trial_two_slices() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_trial(
        dir.path(),
        &[vec![(1, 1, 2), (2, 1, 4)], vec![(1, 1, 3), (2, 1, 5)]],
        0.9,
    );
    let out = dir.path().join("out");
    let o = run("trial", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("W_c = 9"), "{stdout}");
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("plan.json")).unwrap()).unwrap();
    assert_eq!(plan["w_c"], 9);
    assert_eq!(plan["w_h"], serde_json::json!([4, 5]));
    assert!(out.join("model_0.json").exists() && out.join("model_1.json").exists());
}

#[test]
fn trial_constant_demand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_trial(dir.path(), &[vec![(3, 2, 7); 10], vec![(1, 2, 4); 10]], 0.95);
    let o = run("trial", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(
        stdout.contains("slice 0: W_H = 7") && stdout.contains("slice 1: W_H = 4"),
        "{stdout}"
    );
    assert!(stdout.contains("W_c = 11"), "{stdout}");
}

#[test]
fn trial_rejects_single_slot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_trial(dir.path(), &[vec![(1, 1, 2)]], 0.9);
    let o = run("trial", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn trial_rejects_length_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_trial(dir.path(), &[vec![(1, 1, 2); 4], vec![(1, 1, 2); 5]], 0.9);
    let o = run("trial", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).to_lowercase().contains("length") || stderr(&o).contains("slots"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn demo_simulation_completes() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = run("simulate", &demo(), dir.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    for f in ["summary.csv", "report.csv", "slots.csv", "plan.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn one_report_row_per_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario: serde_json::Value = serde_json::from_str(&fs::read_to_string(demo()).unwrap()).unwrap();
    scenario.as_object_mut().unwrap().remove("sweep");
    scenario["schemes"] = serde_json::json!(["NoSh", "Sh", "ShT100"]);
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, scenario.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = run("simulate", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let schemes: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(schemes, ["NoSh", "Sh", "ShT100"]);
    assert_eq!(fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 4);
}

#[test]
fn unknown_scheme_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(demo()).unwrap().replace("\"ShT100\"", "\"Fancy\"");
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, text).unwrap();
    let o = run("simulate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schemes"), "{}", stderr(&o));
}

#[test]
fn reruns_overwrite_identically() {
    let dir = tempfile::tempdir().unwrap();
    let read =
        || ["report.csv", "slots.csv", "summary.csv", "plan.json"].map(|f| fs::read(dir.path().join(f)).unwrap());
    assert!(run("sweep", &demo(), dir.path(), &[]).status.success());
    let first = read();
    assert!(run("sweep", &demo(), dir.path(), &["--jobs", "3"]).status.success());
    assert_eq!(first, read());
}

#[test]
fn seed_flag_replaces_scenario_seeds() {
    let text = fs::read_to_string(demo()).unwrap();
    let mut scenario: serde_json::Value = serde_json::from_str(&text).unwrap();
    scenario["seed"] = serde_json::json!(99);
    scenario["anomaly"]["seed"] = serde_json::json!(99);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.json");
    fs::write(&cfg, scenario.to_string()).unwrap();

    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &demo(), &b, &["--seed", "99"]).status.success());
    assert!(run("simulate", &demo(), &c, &[]).status.success());
    let slots = |d: &Path| fs::read(d.join("slots.csv")).unwrap();
    assert_eq!(slots(&a), slots(&b));
    assert_ne!(slots(&b), slots(&c));
}

#[test]
fn synth_round_trips_through_series_files() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let o = run("synth", &demo(), &gen, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(gen.join("embb_trial.csv").exists() && gen.join("embb_regular.csv").exists());
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    assert!(run("simulate", &demo(), &x, &[]).status.success());
    assert!(run("simulate", &gen.join("scenario.json"), &y, &[]).status.success());
    assert_eq!(
        fs::read(x.join("slots.csv")).unwrap(),
        fs::read(y.join("slots.csv")).unwrap()
    );
}
