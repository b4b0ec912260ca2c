use indoor_fusion::harness::{self, io, Method, RunReport, SweepSpec};
use indoor_fusion::simulator::synthesize;
use std::path::{Path, PathBuf};
use std::process::Command;

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

fn short() -> Vec<(String, String)> {
    vec![("duration".into(), "8.0".into())]
}

fn same_accuracy(a: &RunReport, b: &RunReport) {
    assert_eq!(a.rmse_3d, b.rmse_3d);
    assert_eq!(a.rmse_vertical, b.rmse_vertical);
    assert_eq!(a.orientation_error_rms, b.orientation_error_rms);
    assert_eq!(a.drift_rate, b.drift_rate);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.keyframes, b.keyframes);
    assert_eq!(a.config_hash, b.config_hash);
}

#[test]
fn bundled_scenarios_run_every_method() {
    for name in ["office", "warehouse", "staircase"] {
        let scn = harness::load_scenario(&scenario(name), &short(), None).unwrap();
        for method in Method::ALL {
            let out = harness::run(&scn, method).unwrap();
            let r = &out.report;
            assert!(r.rmse_3d.is_finite(), "{name} {method:?}");
            assert_eq!(r.keyframes, out.estimates.len());
            if method != Method::TdoaOnly {
                assert_eq!(r.epochs, r.keyframes, "{name} {method:?}");
            }
        }
    }
}

#[test]
fn persisted_series_reproduce_reported_metrics() {
    let scn = harness::load_scenario(&scenario("office"), &short(), Some(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for method in Method::ALL {
        let out = harness::run(&scn, method).unwrap();
        let sub = dir.path().join(method.name());
        harness::write_run(&sub, &out).unwrap();
        let est = io::read_states_file(&sub.join("estimates.csv")).unwrap();
        let truth = io::read_states_file(&sub.join("truth.csv")).unwrap();
        let m = harness::metrics_from_rows(&est, &truth);
        assert_eq!(m.rmse_3d, out.report.rmse_3d, "{method:?}");
        assert_eq!(m.rmse_vertical, out.report.rmse_vertical);
        assert_eq!(m.orientation_error_rms, out.report.orientation_error_rms);
        assert_eq!(m.drift_rate, out.report.drift_rate);
        let report: RunReport =
            serde_json::from_slice(&std::fs::read(sub.join("report.json")).unwrap()).unwrap();
        assert_eq!(report, out.report);
    }
}

#[test]
fn saved_streams_replay_identically() {
    let scn = harness::load_scenario(&scenario("office"), &short(), Some(6)).unwrap();
    let (truth, streams) = synthesize(&scn).unwrap();
    let dir = tempfile::tempdir().unwrap();
    harness::write_simulation(dir.path(), &truth, &streams).unwrap();
    let (truth2, streams2) = harness::load_simulation(dir.path()).unwrap();
    assert_eq!(streams2, streams);
    let direct = harness::run(&scn, Method::Fgo).unwrap();
    let replay = harness::run_on_streams(&scn, Method::Fgo, &truth2, &streams2).unwrap();
    same_accuracy(&direct.report, &replay.report);
    assert_eq!(direct.estimates, replay.estimates);
}

#[test]
fn sweep_cell_matches_single_run() {
    let base = harness::load_scenario_value(&scenario("office")).unwrap();
    let mut base = base;
    harness::apply_override(&mut base, "duration", "8.0").unwrap();
    let spec = SweepSpec {
        parameter: "packet_reception_rate".into(),
        values: vec!["0.7".into()],
        seeds: vec![9],
        methods: vec![Method::Fgo, Method::Ekf],
    };
    let result = harness::sweep(&base, &spec).unwrap();
    assert_eq!(result.cells.len(), 2);
    let overrides = vec![
        ("duration".to_string(), "8.0".to_string()),
        ("packet_reception_rate".to_string(), "0.7".to_string()),
    ];
    let scn = harness::load_scenario(&scenario("office"), &overrides, Some(9)).unwrap();
    for method in spec.methods {
        let single = harness::run(&scn, method).unwrap();
        same_accuracy(result.select(method, "0.7")[0], &single.report);
    }
    let fgo = result.rows.iter().find(|r| r.report.method == Method::Fgo).unwrap();
    let expect = 1.0 - fgo.report.rmse_3d / result.select(Method::Ekf, "0.7")[0].rmse_3d;
    assert_eq!(fgo.improvement_vs_ekf, Some(expect));
}

#[test]
fn overrides_reach_nested_keys_and_reject_bad_values() {
    let o = vec![
        ("engine.window_size".to_string(), "5".to_string()),
        ("nlos.enabled".to_string(), "false".to_string()),
    ];
    let scn = harness::load_scenario(&scenario("office"), &o, Some(42)).unwrap();
    assert_eq!(scn.engine.window_size, 5);
    assert!(!scn.nlos.enabled);
    assert_eq!(scn.seed, 42);
    let bad = vec![("packet_reception_rate".to_string(), "1.5".to_string())];
    assert!(harness::load_scenario(&scenario("office"), &bad, None).is_err());
    assert!(harness::parse_assignment("no_equals_sign").is_err());
}

#[test]
fn config_hash_tracks_configuration() {
    let a = harness::load_scenario(&scenario("office"), &[], None).unwrap();
    let b = harness::load_scenario(&scenario("office"), &[], Some(a.seed + 1)).unwrap();
    let c = a.clone();
    let h = |s| harness::config_hash(s, &[Method::Fgo]);
    assert_eq!(h(&a), h(&c));
    assert_ne!(h(&a), h(&b));
    assert_ne!(h(&a), harness::config_hash(&a, &[Method::Ekf]));
}

#[test]
fn cli_run_writes_outputs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_fusion"))
        .args(["run", "--method", "ekf", "--set", "duration=5.0", "--scenario"])
        .arg(scenario("office"))
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.contains("rmse_3d="));
    for f in ["estimates.csv", "truth.csv", "report.json", "summary.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn cli_check_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_fusion"))
        .args(["check", "--points", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().matches(" ok").count(), 5);
}

#[test]
fn cli_rejects_unknown_method() {
    let out = Command::new(env!("CARGO_BIN_EXE_fusion"))
        .args(["run", "--method", "particle", "--scenario"])
        .arg(scenario("office"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
