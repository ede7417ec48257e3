//! End-to-end tests of the `mzpilot` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mzpilot::cli::RunConfig;

fn mzpilot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mzpilot"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

const OPEN: &str = r#"
scenario = "wheeler_open"
[ensemble]
n = 40
seed = 11
[output]
emit = ["trajectories", "fields", "svg"]
field_resolution = 21
"#;

#[test]
fn run_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "open.toml", OPEN);
    for out in ["a", "b"] {
        let o = mzpilot(tmp.path(), &["run", "--config", "open.toml", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    let a = read_all(&tmp.path().join("a"));
    let b = read_all(&tmp.path().join("b"));
    let names: Vec<_> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["fields.csv", "report.json", "trajectories.csv", "trajectories.svg"]);
    assert_eq!(a, b);
    let svg = String::from_utf8(a[3].1.clone()).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("href"));
}

#[test]
fn seed_override_changes_output() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "open.toml", "scenario = \"wheeler_open\"\n[ensemble]\nn = 10\n");
    mzpilot(tmp.path(), &["run", "--config", "open.toml", "--out", "a", "--seed", "1"]);
    mzpilot(tmp.path(), &["run", "--config", "open.toml", "--out", "b", "--seed", "2", "--emit", "trajectories"]);
    let a = fs::read_to_string(tmp.path().join("a/report.json")).unwrap();
    let b = fs::read_to_string(tmp.path().join("b/report.json")).unwrap();
    assert_ne!(a, b);
    assert!(b.contains("\"seed\": 2"));
    assert!(tmp.path().join("b/trajectories.csv").exists());
    assert!(!tmp.path().join("a/trajectories.csv").exists());
}

#[test]
fn open_report_has_no_crossings() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "open.toml", OPEN);
    let o = mzpilot(tmp.path(), &["run", "--config", "open.toml", "--out", "o", "--n", "200"]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("o/report.json")).unwrap()).unwrap();
    let a = &report["aggregates"];
    assert_eq!(a["crossing_count"], 0);
    assert_eq!(a["n"], 200);
    let p = a["p_d1"].as_f64().unwrap();
    assert!((p - 0.5).abs() < 3.0 * (0.25f64 / 200.0).sqrt());
}

#[test]
fn essw_full_marker_sends_channel_two_to_d2_down() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "essw.toml", "scenario = \"essw_spin\"\n[marker]\nefficiency_sq = 1.0\n[ensemble]\nn = 100\n");
    let o = mzpilot(tmp.path(), &["run", "--config", "essw.toml", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0));
    let report: mzpilot::scenarios::RunReport =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("o/report.json")).unwrap()).unwrap();
    let a = &report.aggregates;
    let ch2 = a.channel_count(mzpilot::optics::Channel::Two);
    assert!(ch2 > 0);
    assert_eq!(
        a.joint_count(mzpilot::optics::DetectorId::D2, Some(mzpilot::scenarios::MarkerOutcome::Down)),
        ch2
    );
}

#[test]
fn config_round_trips_through_toml() {
    let text = r#"
scenario = "av_pointer"
[geometry]
arm_length = 40.0
[packet]
wavenumber = 40.0
sigma0 = 1.0
[optics]
bs1_reflectance = 0.7071067811865476
[marker]
ejection_speed = 45.0
pointer_sigma = 0.1
channel = 2
position = [25.0, 0.0]
[ensemble]
n = 10
seed = 99
mode = "random"
[integrator]
rtol = 1e-9
atol = 1e-11
sample_dt = 0.005
[output]
dir = "somewhere"
emit = ["fields"]
field_time = 2.25
"#;
    let cfg = RunConfig::parse(text).unwrap();
    let again = RunConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
    assert_eq!(cfg.to_toml(), again.to_toml());
    assert_eq!(again.build().unwrap(), cfg.build().unwrap());
}

#[test]
fn malformed_config_exits_one_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("syntax.toml", "scenario = \n"),
        ("unknown.toml", "scenario = \"wheeler_open\"\ncolour = 3\n"),
        ("name.toml", "scenario = \"wheeler_ajar\"\n"),
        ("irrelevant.toml", "scenario = \"wheeler_closed\"\n[schedule]\nt_c = 1.0\ndirection = \"insert\"\n"),
        ("transit.toml", "scenario = \"wheeler_delayed\"\n[schedule]\nt_c = 2.25\ndirection = \"insert\"\n"),
        ("negative.toml", "scenario = \"wheeler_open\"\n[packet]\nsigma0 = -1.0\n"),
    ];
    for (name, text) in cases {
        write(tmp.path(), name, text);
        let out = format!("out_{name}");
        let o = mzpilot(tmp.path(), &["run", "--config", name, "--out", &out, "--emit", "trajectories"]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!tmp.path().join(&out).exists(), "{name} left outputs");
    }
    let o = mzpilot(tmp.path(), &["run", "--config", "missing.toml", "--out", "m"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_over_efficiency_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "essw.toml", "scenario = \"essw_spin\"\n[ensemble]\nn = 60\n");
    let o = mzpilot(
        tmp.path(),
        &["sweep", "--config", "essw.toml", "--out", "s", "--param", "a2", "--values", "0,0.5,1"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    let rows: Vec<Vec<f64>> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(summary.lines().next().unwrap(), "value,p_d1,p_d2,straight_fraction_ch1,straight_fraction_ch2");
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][4], 0.0);
    assert!(rows[1][4] > 0.0 && rows[1][4] < 1.0);
    assert_eq!(rows[2][4], 1.0);
    for i in 0..3 {
        assert!(tmp.path().join(format!("s/run_{i:03}/report.json")).exists());
    }
}

#[test]
fn sweep_over_switch_time_steps_only_across_transit() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "delayed.toml",
        "scenario = \"wheeler_delayed\"\n[schedule]\nt_c = 1.0\ndirection = \"insert\"\n[ensemble]\nn = 60\n",
    );
    let o = mzpilot(
        tmp.path(),
        &["sweep", "--config", "delayed.toml", "--out", "s", "--param", "t_c", "--values", "0.5,1.0,1.5,3.0,3.5"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(tmp.path().join("s/summary.csv")).unwrap();
    let p_d1: Vec<f64> = summary
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(&p_d1[..3], &[1.0, 1.0, 1.0]);
    assert_eq!(p_d1[3], p_d1[4]);
    assert!(p_d1[3] < 0.8);
}

#[test]
fn sweep_rejects_empty_and_mismatched_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "essw.toml", "scenario = \"essw_spin\"\n");
    let o = mzpilot(tmp.path(), &["sweep", "--config", "essw.toml", "--out", "e", "--param", "a2", "--values"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mzpilot(tmp.path(), &["sweep", "--config", "essw.toml", "--out", "e", "--param", "t_c", "--values", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!tmp.path().join("e").exists());
}

fn validate(extra: &[&str]) -> Output {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["validate", "--n", "2000"];
    args.extend_from_slice(extra);
    if extra.contains(&"--config") {
        write(tmp.path(), "v.toml", "scenario = \"wheeler_open\"\n[integrator]\nrtol = 1e-6\natol = 1e-8\n");
    }
    mzpilot(tmp.path(), &args)
}

#[test]
fn validate_passes_on_fresh_build() {
    let o = validate(&[]);
    let table = String::from_utf8_lossy(&o.stdout);
    println!("{table}");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(table.lines().count(), 7);
    assert!(table.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn validate_catches_wrong_reflection_phase() {
    let o = validate(&["--fault-reflection-minus-i"]);
    let table = String::from_utf8_lossy(&o.stdout);
    println!("{table}");
    assert_eq!(o.status.code(), Some(2));
    assert!(table.lines().any(|l| l.starts_with("FAIL  amplitude_algebra")));
}

#[test]
fn validate_passes_with_looser_integrator() {
    let o = validate(&["--config", "v.toml"]);
    println!("{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(o.status.code(), Some(0));
}
