use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecolane::energy::{energy_rate, oracle_grid_samples, EnergyParams, FitReport, PowertrainModel};
use ecolane::report::RunReport;
use ecolane::scenario::{Jitter, NpcSeed, ScenarioConfig};
use ecolane::sim::{DriverPolicy, Metrics};
use ecolane::world::Lane;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecolane"))
}

fn reference_file() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/reference.toml")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn shipped_reference_matches_builtin_and_round_trips() {
    let text = fs::read_to_string(reference_file()).unwrap();
    let parsed = ScenarioConfig::from_toml_str(&text).unwrap();
    assert_eq!(parsed, ScenarioConfig::reference());
    let again = ScenarioConfig::from_toml_str(&parsed.to_toml_string()).unwrap();
    assert_eq!(again, parsed);
}

#[test]
fn validate_accepts_reference() {
    let out = bin().arg("validate").arg(reference_file()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn missing_lights_is_an_input_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut value: toml::Table = toml::from_str(&fs::read_to_string(reference_file()).unwrap()).unwrap();
    value.remove("lights");
    let path = dir.path().join("nolights.toml");
    fs::write(&path, toml::to_string(&value).unwrap()).unwrap();
    for sub in [vec!["validate"], vec!["run", "--out"]] {
        let mut cmd = bin();
        cmd.args(&sub);
        if sub.len() > 1 {
            cmd.arg(dir.path().join("o"));
        }
        let out = cmd.arg(&path).output().unwrap();
        assert_eq!(out.status.code(), Some(2));
        assert!(stderr(&out).contains("lights"), "{}", stderr(&out));
    }
}

#[test]
fn run_writes_three_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "--policy", "eco-lane", "--laps", "1", "--seed", "3", "--explain", "--out"])
        .arg(dir.path())
        .arg(reference_file())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics: Metrics = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert!(metrics.trip_time > 0.0 && metrics.motion_energy > 0.0);
    let events = fs::read_to_string(dir.path().join("events.csv")).unwrap();
    assert_eq!(events.lines().next().unwrap(), "t,s,v,a,lane,decision,next_phase,next_t_remaining,energy_Wh_cum");
    assert!(events.lines().count() > 100);
    let explain = fs::read_to_string(dir.path().join("explain.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(explain.lines().next().unwrap()).unwrap();
    assert_eq!(first["candidates"].as_array().unwrap().len(), 4);
    assert!(explain.lines().any(|l| l.contains("\"graph\"")));
}

#[test]
fn broken_policy_collision_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ScenarioConfig::reference();
    cfg.laps = 1;
    cfg.npc_spawn = vec![NpcSeed { lane: Lane::ZERO, s: 40.0, v: 0.0, desired_v: 0.5 }];
    cfg.jitter = Jitter::default();
    let path = dir.path().join("trap.toml");
    fs::write(&path, cfg.to_toml_string()).unwrap();
    let out = bin()
        .args(["run", "--broken-policy", "--out"])
        .arg(dir.path().join("o"))
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("collision"), "{}", stderr(&out));
}

#[test]
fn compare_is_deterministic_with_three_rows() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for d in &dirs {
        let out = bin()
            .args(["compare", "--laps", "1", "--seed", "2", "--out"])
            .arg(d.path())
            .arg(reference_file())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        reports.push(fs::read(d.path().join("report.json")).unwrap());
        for p in DriverPolicy::ALL {
            assert!(d.path().join(p.slug()).join("events.csv").exists());
        }
    }
    assert_eq!(reports[0], reports[1]);
    let report: RunReport = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(report.runs.len(), 3);
    assert!(!report.incomplete);
    let vs_human = report.savings.iter().find(|s| s.baseline == DriverPolicy::Human).unwrap();
    assert!(vs_human.motion_pct > 0.0);
}

fn write_samples(path: &Path, rows: &[(f64, f64, f64)]) {
    let mut text = String::from("v,a,power\n");
    for (v, a, p) in rows {
        text.push_str(&format!("{v},{a},{p}\n"));
    }
    fs::write(path, text).unwrap();
}

fn fit(dir: &Path, rows: &[(f64, f64, f64)]) -> (Option<i32>, Option<FitReport>, String) {
    let samples = dir.join("samples.csv");
    let params = dir.join("params.toml");
    write_samples(&samples, rows);
    let out = bin().arg("fit-energy").arg(&samples).arg("--out").arg(&params).output().unwrap();
    let report = fs::read_to_string(&params).ok().map(|t| toml::from_str(&t).unwrap());
    (out.status.code(), report, stderr(&out))
}

#[test]
fn fit_energy_exact_quadratic() {
    let dir = tempfile::tempdir().unwrap();
    let truth = EnergyParams::new([[30.0, 12.0], [12.0, 400.0]], [250.0, 1800.0], 900.0).unwrap();
    let rows: Vec<_> = (0..10)
        .flat_map(|i| (-4..=2).map(move |j| (i as f64, j as f64 * 0.5)))
        .map(|(v, a)| (v, a, energy_rate(&truth, v, a)))
        .collect();
    let (code, report, err) = fit(dir.path(), &rows);
    assert_eq!(code, Some(0), "{err}");
    assert!(report.unwrap().residuals.mean_abs_rel_error <= 1e-6);
}

#[test]
fn fit_energy_physics_oracle_writes_params() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<_> = oracle_grid_samples(&PowertrainModel::default()).iter().map(|s| (s.v, s.a, s.power)).collect();
    let (code, report, err) = fit(dir.path(), &rows);
    assert_eq!(code, Some(0), "{err}");
    let report = report.unwrap();
    assert!(report.params.is_positive_definite());
    assert!(report.residuals.mean_abs_rel_error.is_finite());
}

#[test]
fn fit_energy_three_rows_is_rank_deficient() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report, err) = fit(dir.path(), &[(1.0, 0.0, 100.0), (2.0, 0.5, 300.0), (3.0, -0.5, 50.0)]);
    assert_eq!(code, Some(2));
    assert!(report.is_none());
    assert!(!err.is_empty());
}
