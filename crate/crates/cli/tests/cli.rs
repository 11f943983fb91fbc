use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

const GRID: &str = "[grid]\nlength = 1.0\nnodes = 32\nhorizon = 1.0\nsteps = 64\n";
const MASKS: &str = "[masks]\nomega = [0.2, 0.5]\nobservation = [0.35, 0.65]\n";
const PULSE: &str = "[[physics.u0]]\namplitude = 1.0\ncenter = 0.85\nwidth = 0.05\n";

struct Run {
    out: PathBuf,
    output: Output,
    _dir: TempDir,
}

impl Run {
    fn code(&self) -> i32 {
        self.output.status.code().unwrap()
    }
    fn stderr(&self) -> String {
        String::from_utf8_lossy(&self.output.stderr).into_owned()
    }
    fn table(&self, name: &str) -> Vec<BTreeMap<String, String>> {
        read_table(&self.out.join(name))
    }
}

fn run(cmd: &str, config: &str, extra: &[&str]) -> Run {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    let output = Command::new(env!("CARGO_BIN_EXE_insens"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(extra)
        .output()
        .unwrap();
    Run {
        out,
        output,
        _dir: dir,
    }
}

fn read_table(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_owned)
        .collect();
    lines
        .map(|l| {
            header
                .iter()
                .cloned()
                .zip(l.split(',').map(str::to_owned))
                .collect()
        })
        .collect()
}

fn f(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn summary_value(run: &Run, key: &str) -> String {
    run.table("summary.csv")
        .into_iter()
        .find(|r| r["quantity"] == key)
        .unwrap()["value"]
        .clone()
}

fn read_f64s(path: &Path) -> Vec<f64> {
    fs::read(path)
        .unwrap()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn zero_data_gives_zero_trajectory_and_energy() {
    let r = run("simulate", GRID, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let data = read_f64s(&r.out.join("u.bin"));
    assert_eq!(data.len(), 65 * 32 * 2);
    assert!(data.iter().all(|v| *v == 0.0));
    for row in r.table("series.csv") {
        assert_eq!(f(&row, "energy"), 0.0);
        assert_eq!(f(&row, "mass"), 0.0);
    }
}

#[test]
fn conservation_run_reports_small_drift() {
    let cfg = "[grid]\nlength = 1.0\nnodes = 128\nhorizon = 1.0\nsteps = 1024\n[[physics.u0]]\namplitude = 1.0\ncenter = 0.5\nwidth = 0.1\n";
    let r = run("simulate", cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let norm: f64 = summary_value(&r, "max_norm_drift").parse().unwrap();
    let mass: f64 = summary_value(&r, "max_mass_drift").parse().unwrap();
    assert!(norm <= 1e-11, "norm drift {norm}");
    assert!(mass <= 1e-11, "mass drift {mass}");
    let energy: f64 = summary_value(&r, "max_energy_drift").parse().unwrap();
    assert!(energy <= 1e-9, "energy drift {energy}");
}

#[test]
fn every_output_carries_the_config_header() {
    let r = run("simulate", &format!("seed = 11\n{GRID}{PULSE}"), &[]);
    assert_eq!(r.code(), 0);
    for name in ["series.csv", "summary.csv", "u.hdr"] {
        let text = fs::read_to_string(r.out.join(name)).unwrap();
        assert!(text.contains("# seed = 11"), "{name}");
        assert!(text.contains("# nodes = 32"), "{name}");
    }
    let hdr = fs::read_to_string(r.out.join("u.hdr")).unwrap();
    assert!(hdr.contains("rows = 65"));
    assert!(hdr.contains("cols = 32"));
}

#[test]
fn invalid_mask_is_a_validation_error() {
    let cfg = format!("{GRID}[masks]\nomega = [0.6, 0.2]\nobservation = [0.35, 0.65]\n[control]\nepsilon = [1e-2]\n");
    let r = run("control", &cfg, &[]);
    assert_eq!(r.code(), 2);
    assert!(r.stderr().contains("omega"), "{}", r.stderr());

    let disjoint = format!("{GRID}[masks]\nomega = [0.1, 0.2]\nobservation = [0.5, 0.7]\n[control]\nepsilon = [1e-2]\n");
    assert_eq!(run("control", &disjoint, &[]).code(), 2);
}

#[test]
fn unknown_keys_are_rejected() {
    let r = run("simulate", &format!("{GRID}colour = 3\n"), &[]);
    assert_eq!(r.code(), 2);
    let r = run(
        "simulate",
        "[grid]\nlength = 1.0\nnodes = 32\nhorizon = 1.0\nsteps = 64\ndt = 0.1\n",
        &[],
    );
    assert_eq!(r.code(), 2);
}

#[test]
fn trivial_control_is_zero() {
    let r = run(
        "control",
        &format!("{GRID}{MASKS}[control]\nepsilon = [1e-3]\n"),
        &[],
    );
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.table("controls.csv");
    assert_eq!(rows.len(), 1);
    assert_eq!(f(&rows[0], "h_norm"), 0.0);
    assert_eq!(f(&rows[0], "v0_norm"), 0.0);
    assert!(read_f64s(&r.out.join("h_0.bin")).iter().all(|v| *v == 0.0));
}

#[test]
fn epsilon_sweep_is_monotone() {
    let cfg = format!("{GRID}{MASKS}[control]\nepsilon = [1e-2, 1e-4, 1e-6]\n{PULSE}");
    let r = run("control", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.table("controls.csv");
    assert_eq!(rows.len(), 3);
    let v: Vec<f64> = rows.iter().map(|r| f(r, "v0_norm")).collect();
    assert!(v[0] >= v[1] && v[1] >= v[2], "{v:?}");
    assert!(v[2] < f(&rows[0], "free_v0_norm"));
    for row in &rows {
        assert!(row["cg_iterations"].parse::<usize>().unwrap() > 0);
        assert_eq!(row["status"], "converged");
    }
    let profile = r.table("profile_2.csv");
    assert_eq!(profile.len(), 65);
    assert!((f(&profile[0], "v_norm") - v[2]).abs() <= 1e-12 * v[2].max(1e-300));
}

#[test]
fn insensitize_check_bound_and_baseline() {
    let cfg =
        format!("seed = 3\n{GRID}{MASKS}{PULSE}[insensitize]\ndirections = 6\nepsilon = 1e-6\n");
    let r = run("insensitize-check", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert_eq!(summary_value(&r, "cauchy_schwarz_bound_holds"), "true");
    let ratio: f64 = summary_value(&r, "baseline_to_controlled_ratio")
        .parse()
        .unwrap();
    assert!(ratio > 1.0, "ratio {ratio}");
    let rows = r.table("insensitivity.csv");
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert!(f(row, "max_fd_gap") <= 1e-10 * f(row, "adjoint").abs().max(1e-12));
    }
}

#[test]
fn insensitize_check_richardson_slope_with_nonlinearity() {
    let cfg = format!(
        "seed = 5\n{GRID}{MASKS}[physics]\nzeta = [1.0, 0.0]\n[[physics.u0]]\namplitude = 0.5\ncenter = 0.5\nwidth = 0.1\n[insensitize]\ndirections = 3\ntaus = [1e-1, 5e-2, 2.5e-2]\nepsilon = 1e-4\n"
    );
    let r = run("insensitize-check", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    for row in r.table("insensitivity.csv") {
        let s = f(&row, "richardson_slope");
        assert!((s - 2.0).abs() < 0.2, "slope {s}");
    }
}

#[test]
fn insensitize_check_reads_a_control_file() {
    let cfg = format!("seed = 3\n{GRID}{MASKS}{PULSE}[control]\nepsilon = [1e-6]\n");
    let c = run("control", &cfg, &[]);
    assert_eq!(c.code(), 0);
    let h = c.out.join("h_0.bin");
    let check = format!(
        "{cfg}[insensitize]\ndirections = 4\ncontrol_file = {:?}\n",
        h.to_str().unwrap()
    );
    let r = run("insensitize-check", &check, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let inline = run(
        "insensitize-check",
        &format!("{cfg}[insensitize]\ndirections = 4\n"),
        &[],
    );
    assert_eq!(
        summary_value(&r, "v0_norm"),
        summary_value(&inline, "v0_norm")
    );
}

const SCAN: &str = "[audit]\nlambdas = [8.0]\nmus = [1.5]\nsamples = 4\nobservability = true\n";

#[test]
fn single_cell_scan() {
    let r = run("carleman-scan", &format!("{GRID}{MASKS}{SCAN}"), &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.table("scan.csv");
    assert_eq!(rows.len(), 1);
    assert!(f(&rows[0], "max_log_ratio").is_finite());
    assert_eq!(r.table("observability.csv").len(), 4);
}

#[test]
fn scan_is_seed_deterministic() {
    let cfg = format!("seed = 9\n{GRID}{MASKS}{SCAN}");
    let a = run("carleman-scan", &cfg, &[]);
    let b = run("carleman-scan", &cfg, &[]);
    for name in ["scan.csv", "observability.csv"] {
        assert_eq!(
            fs::read(a.out.join(name)).unwrap(),
            fs::read(b.out.join(name)).unwrap(),
            "{name}"
        );
    }
    let c = run("carleman-scan", &cfg, &["--seed", "10"]);
    assert_ne!(
        fs::read(a.out.join("observability.csv")).unwrap(),
        fs::read(c.out.join("observability.csv")).unwrap()
    );
}

#[test]
fn control_outputs_are_byte_identical() {
    let cfg = format!("seed = 2\n{GRID}{MASKS}{PULSE}[control]\nepsilon = [1e-2, 1e-4]\n");
    let a = run("control", &cfg, &[]);
    let b = run("control", &cfg, &[]);
    let mut names: Vec<_> = fs::read_dir(&a.out)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        assert_eq!(
            fs::read(a.out.join(&n)).unwrap(),
            fs::read(b.out.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn three_by_three_scan_finishes() {
    let cfg = "[grid]\nlength = 1.0\nnodes = 64\nhorizon = 1.0\nsteps = 128\n[masks]\nomega = [0.2, 0.5]\nobservation = [0.35, 0.65]\n[audit]\nlambdas = [8.0, 16.0, 32.0]\nmus = [1.25, 1.5, 2.0]\nsamples = 20\n";
    let start = Instant::now();
    let r = run("carleman-scan", cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    assert!(start.elapsed() < Duration::from_secs(300));
    assert_eq!(r.table("scan.csv").len(), 9);
}

#[test]
fn convergence_orders_near_two() {
    let cfg = format!("{GRID}[convergence]\nlevels = [[32, 64], [64, 256], [128, 1024]]\n");
    let r = run("convergence", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    let rows = r.table("convergence.csv");
    assert_eq!(rows.len(), 3);
    for row in &rows[1..] {
        let p = f(row, "observed_order");
        assert!((1.8..=2.2).contains(&p), "order {p}");
    }
}

#[test]
fn zero_solution_has_zero_residual() {
    let cfg = format!("{GRID}[convergence]\nlevels = [[16, 16], [32, 64]]\namplitude = 0.0\n");
    let r = run("convergence", &cfg, &[]);
    assert_eq!(r.code(), 0, "{}", r.stderr());
    for row in r.table("convergence.csv") {
        assert_eq!(f(&row, "max_l2_error"), 0.0);
    }
}

#[test]
fn mismatched_grid_triple_is_rejected() {
    let cfg = format!("{GRID}[convergence]\nlevels = [[64, 256], [32, 512], [128, 1024]]\n");
    let r = run("convergence", &cfg, &[]);
    assert_eq!(r.code(), 2, "{}", r.stderr());
}

#[test]
fn missing_output_directory_and_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_insens"))
        .args([
            "simulate",
            "--config",
            "/nonexistent/run.toml",
            "--out",
            "/tmp/x",
        ])
        .output()
        .unwrap();
    assert_ne!(out.status.code().unwrap(), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_insens"))
        .arg("bogus")
        .output()
        .unwrap();
    assert_eq!(out.status.code().unwrap(), 2);
}
