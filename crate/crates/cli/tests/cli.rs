use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hypode::output::DesignOutput;
use tempfile::TempDir;

const PAPER: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper_example.toml");

fn hypode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypode")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn paper_with(dir: &TempDir, name: &str, from: &str, to: &str) -> PathBuf {
    let text = fs::read_to_string(PAPER).unwrap();
    assert!(text.contains(from));
    write_config(dir, name, &text.replace(from, to))
}

/// Transport plant whose lumped part is invisible at the measured boundary.
const UNOBSERVABLE: &str = r#"
[dimensions]
n = 2
p = 1
n_xi = 2
[lambda]
values = [1, -1]
[A]
rows = [[0, 0], [0, 0]]
[boundary]
Q0 = [[0]]
Q1 = [[0]]
C2 = [[0, 0]]
[ode]
F = [[0, 1], [0, 0]]
B = [[0], [1]]
[design]
controller_poles = [-1, -2]
observer_poles = [-3, -4]
grid = 40
"#;

#[test]
fn validate_accepts_the_example() {
    let o = hypode(&["validate", PAPER]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("plant valid"));
}

#[test]
fn validate_rejects_swapped_speeds() {
    let dir = TempDir::new().unwrap();
    let cfg = paper_with(&dir, "swap.toml", "values = [3, 2, -1, -2]", "values = [2, 3, -1, -2]");
    let o = hypode(&["validate", s(&cfg)]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("speed ordering"), "{out}");
    assert_eq!(out.lines().count(), 1, "{out}");
}

#[test]
fn malformed_files_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.toml", "[dimensions\nn =");
    assert_eq!(code(&hypode(&["validate", s(&cfg)])), 2);
    assert_eq!(code(&hypode(&["validate", s(&dir.path().join("missing.toml"))])), 2);
    assert_eq!(code(&hypode(&["frobnicate"])), 2);
    assert_eq!(code(&hypode(&["design", PAPER])), 2);
}

#[test]
fn design_reports_the_requested_spectra() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d.json");
    let o = hypode(&["design", PAPER, "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("eig(F - BK): -4.000000+0.000000i, -3.000000+0.000000i, -2.000000+0.000000i"), "{text}");
    assert!(text.contains("-7.000000+0.000000i, -6.000000+0.000000i, -5.000000+0.000000i"), "{text}");
    assert!(!text.contains("FAIL"));
    for f in ["d.json", "d.gains.csv", "d.observer.csv", "d.kernel.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }

    let bytes = fs::read_to_string(&out).unwrap();
    let stored = DesignOutput::from_json(&bytes).unwrap();
    assert!(stored.passed());
    assert_eq!(stored.to_json(), bytes);

    let o = hypode(&["verify", PAPER, "-d", s(&out)]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS kernel self-convergence"));
}

#[test]
fn design_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        assert_eq!(code(&hypode(&["design", PAPER, "--grid", "40", "-o", s(out)])), 0);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    assert_eq!(code(&hypode(&["design", PAPER, "--grid", "40", "--seed", "3", "-o", s(&c)])), 0);
    let other = DesignOutput::from_json(&fs::read_to_string(&c).unwrap()).unwrap();
    assert_eq!(other.provenance.seed, 3);
}

#[test]
fn unobservable_plant_fails_at_observability() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "unobs.toml", UNOBSERVABLE);
    let o = hypode(&["design", s(&cfg), "-o", s(&dir.path().join("d.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("observability: failed"), "{}", stderr(&o));
    assert!(!dir.path().join("d.json").exists());
}

#[test]
fn uncontrollable_pole_request_fails_at_placement() {
    // F = diag(-1, 1), B = e2: the mode -1 is stable but cannot be moved
    let text = UNOBSERVABLE
        .replace("F = [[0, 1], [0, 0]]", "F = [[-1, 0], [0, 1]]")
        .replace("controller_poles = [-1, -2]", "controller_poles = [-2, -3]");
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "unctrl.toml", &text);
    assert_eq!(code(&hypode(&["validate", s(&cfg)])), 0);
    let o = hypode(&["design", s(&cfg), "-o", s(&dir.path().join("d.json"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("placement: failed"), "{}", stderr(&o));
}

#[test]
fn zero_initial_data_gives_a_zero_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = paper_with(&dir, "zero.toml", "x0 = [\"z\", 0, 0, 0]", "x0 = [0, 0, 0, 0]");
    let d = dir.path().join("d.json");
    assert_eq!(code(&hypode(&["design", s(&cfg), "--grid", "40", "-o", s(&d)])), 0);
    let run = dir.path().join("run");
    let o = hypode(&["simulate", s(&cfg), "--grid", "40", "-d", s(&d), "-o", s(&run), "--plots"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    for line in trace.lines().skip(1) {
        assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{line}");
    }
    assert!(run.join("snapshots.csv").is_file());
    let svg = fs::read_to_string(run.join("norms.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn short_simulation() {
    let dir = TempDir::new().unwrap();
    let cfg = paper_with(&dir, "short.toml", "t_final = 6.0", "t_final = 0.1");
    let d = dir.path().join("d.json");
    assert_eq!(code(&hypode(&["design", s(&cfg), "--grid", "40", "-o", s(&d)])), 0);
    let run = dir.path().join("run");
    let o = hypode(&["simulate", s(&cfg), "--grid", "40", "-d", s(&d), "-o", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    let last: f64 = trace.lines().last().unwrap().split(',').next().unwrap().parse().unwrap();
    assert!((last - 0.1).abs() < 1e-12);
    assert!(!run.join("norms.svg").exists());
}

#[test]
fn simulate_refuses_a_design_for_another_config() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d.json");
    assert_eq!(code(&hypode(&["design", PAPER, "--grid", "40", "-o", s(&d)])), 0);
    let o = hypode(&["simulate", PAPER, "--grid", "60", "-d", s(&d), "-o", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_detects_tampered_gains() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d.json");
    assert_eq!(code(&hypode(&["design", PAPER, "--grid", "40", "-o", s(&d)])), 0);
    let mut stored = DesignOutput::from_json(&fs::read_to_string(&d).unwrap()).unwrap();
    stored.controller.k_x[20][1][2] += 1e-3;
    let bad = dir.path().join("bad.json");
    fs::write(&bad, stored.to_json()).unwrap();
    let o = hypode(&["verify", PAPER, "--grid", "40", "-d", s(&bad)]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("FAIL K_x, K_xi reciprocity"), "{out}");
    assert!(stderr(&o).contains("failed checks: K_x, K_xi reciprocity"), "{}", stderr(&o));
}

#[test]
fn coarse_verify_skips_self_convergence() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("d.json");
    let csv = dir.path().join("checks.csv");
    assert_eq!(code(&hypode(&["design", PAPER, "--grid", "16", "-o", s(&d)])), 0);
    let o = hypode(&["verify", PAPER, "--grid", "16", "-d", s(&d), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("SKIP kernel self-convergence"));
    assert!(fs::read_to_string(&csv).unwrap().contains("skipped"));
}
