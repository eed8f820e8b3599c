use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vibro_cli::{CliError, RunConfig};

fn vibro(args: &[&str], config: &str, dir: &Path) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_vibro"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env("GRAZE_LOG", "error")
        .output()
        .unwrap()
}

const BALL: &str = r#"
[system]
name = "bouncing_ball"
params = { g = 1.0, r = 0.5 }

[simulate]
t_span = [0.0, 6.0]
initial_state = [1.0, 0.0]
"#;

const FAMILY: &str = r#"
[system]
name = "impact_oscillator"

[family]
mu_start = 1.0
mu_end = 0.0
initial_state = [0.5, 0.0]
"#;

#[test]
fn ball_impacts_follow_geometric_series() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibro(&["simulate"], BALL, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("out/impacts.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tau,Y,grazing_flag"));
    // drop from height 1 under g = 1, then flights of 2 r^k sqrt(2)
    let s2 = 2f64.sqrt();
    let mut want = s2;
    let mut n = 0;
    for (k, line) in lines.enumerate() {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        if f[2] != 0.0 {
            break;
        }
        assert!((f[0] - want).abs() <= 1e-8, "impact {k}: {} vs {want}", f[0]);
        assert!((f[1] - s2 * 0.5f64.powi(k as i32)).abs() <= 1e-8);
        want += 2.0 * s2 * 0.5f64.powi(k as i32 + 1);
        n += 1;
    }
    assert!(n >= 8);
    for name in ["trajectory.csv", "summary.json", "manifest.json"] {
        assert!(dir.path().join("out").join(name).exists());
    }
}

#[test]
fn misspelled_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{BALL}\n[tolerances]\nrelto = 1e-8\n");
    let out = vibro(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("relto"));
}

#[test]
fn unknown_system_parameter_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BALL.replace("r = 0.5", "restitution = 0.5");
    let out = vibro(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("restitution"));
}

#[test]
fn nonpositive_tolerance_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{BALL}\n[tolerances]\nrel_tol = 0.0\n");
    let out = vibro(&["simulate"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rel_tol"));
}

#[test]
fn zero_length_span_gives_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BALL.replace("[0.0, 6.0]", "[2.0, 2.0]");
    let out = vibro(&["simulate"], &cfg, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let traj = fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert_eq!(traj, "t,x1,y1,segment_id\n");
    let imp = fs::read_to_string(dir.path().join("out/impacts.csv")).unwrap();
    assert_eq!(imp, "tau,Y,grazing_flag\n");
}

#[test]
fn parameter_outside_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibro(&["family"], &FAMILY.replace("mu_end = 0.0", "mu_end = 50.0"), dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("family.mu_end"));
}

#[test]
fn family_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = vibro(&["family"], FAMILY, d.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["family.csv", "grazing.json", "manifest.json"] {
        let x = fs::read(a.path().join("out").join(name)).unwrap();
        let y = fs::read(b.path().join("out").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    // the Y0 column decreases along the family
    let csv = fs::read_to_string(a.path().join("out/family.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "Y_0").unwrap();
    let y0: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert!(y0.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn manifest_hashes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibro(&["simulate"], BALL, dir.path());
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 3);
    for f in files {
        let bytes = fs::read(dir.path().join("out").join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap() as usize, bytes.len());
        assert_eq!(f["sha256"].as_str().unwrap().len(), 64);
    }
    assert_eq!(m["config"]["system"]["name"], "bouncing_ball");
    assert_eq!(m["status"], "ok");
}

#[test]
fn family_without_grazing_has_no_grazing_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibro(&["grazing-report"], &FAMILY.replace("mu_end = 0.0", "mu_end = 0.5"), dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no grazing detected"));
}

#[test]
fn continuation_stall_flushes_partial_family() {
    let dir = tempfile::tempdir().unwrap();
    // a wall contact that is never flagged as grazing cannot be followed
    // through the tangency
    let cfg = FAMILY.replace("mu_end = 0.0", "mu_end = -0.5\ny0_stop = 1e-11") + "\n[tolerances]\ngraze_tol = 1e-12\n";
    let out = vibro(&["family"], &cfg, dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/family.csv")).unwrap();
    assert!(csv.lines().count() > 2);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert!(m["status"].as_str().unwrap().starts_with("error"));
}

#[test]
fn one_dof_report_has_no_reduced_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = vibro(&["grazing-report"], FAMILY, dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("out/grazing_report.json")).unwrap()).unwrap();
    assert!(r["matrices"]["A_bar"].is_null());
    assert_eq!(r["conditions"]["cond3"]["hyperbolicity"], "vacuous");
    let slope = r["spectral"]["loglog_slope"].as_f64().unwrap();
    assert!((slope + 1.0).abs() <= 0.1);
}

#[test]
fn exit_codes_follow_error_classes() {
    use vibro::Error;
    assert_eq!(CliError::Config("x".into()).exit_code(), 1);
    assert_eq!(CliError::Core(Error::NotApproaching { y1: 1.0 }).exit_code(), 2);
    assert_eq!(CliError::Core(Error::NonFinite { t: 0.0 }).exit_code(), 3);
    assert_eq!(CliError::Core(Error::NoGrazing("x".into())).exit_code(), 5);
}

#[test]
fn config_echo_round_trips() {
    let cfg = RunConfig::from_toml(FAMILY).unwrap();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}
