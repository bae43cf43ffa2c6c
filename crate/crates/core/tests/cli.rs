use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mlmc-sdde"));
    c.env_remove("MLMC_SDDE_SEED");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn summary(out: &Path) -> String {
    std::fs::read_to_string(mlmc_sdde::cli::summary_path(out)).unwrap()
}

#[test]
fn zero_dynamics_mlmc_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z.csv");
    let o = run(
        &["--experiment", "mlmc", "--problem", "zero_dynamics", "--coef", "x0=0.4", "--payoff", "sigmoid", "--samples", "50"],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    let expected = 1.0 / (1.0 + (-0.4f64).exp());
    assert!(s.contains(&format!("value: {expected}")), "{s}");
    assert!(s.contains("std_error: 0\n"), "{s}");
}

#[test]
fn identical_config_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--experiment", "coupled", "--eps", "0.1,0.01", "--samples", "300", "--level", "5", "--seed", "9"];
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    assert!(run(&args, &a).status.success());
    assert!(run(&args, &b).status.success());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn inadmissible_step_exits_2_without_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad.csv");
    let o = run(&["--experiment", "path", "--theta", "0.6", "--h", "0.25", "--coef", "a1=-3"], &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("theta*h < 1/max(alpha_bar, 6*beta)"), "{err}");
    assert!(!out.exists());
}

#[test]
fn unknown_problem_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--problem", "nope"], &dir.path().join("x.csv"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("linear_scalar"));
}

#[test]
fn unwritable_output_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing").join("x.csv");
    let o = run(&["--experiment", "path", "--level", "3"], &out);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn help_lists_flags_with_defaults() {
    let o = bin().arg("--help").output().unwrap();
    assert!(o.status.success());
    let help = String::from_utf8_lossy(&o.stdout);
    for flag in [
        "--experiment", "--problem", "--theta", "--delta", "--M", "--base-level", "--max-level", "--eps", "--samples",
        "--target-se", "--seed", "--out", "--jobs", "--config",
    ] {
        assert!(help.contains(flag), "missing {flag}");
    }
    assert!(help.contains("[default: 0.25]") && help.contains("[env: MLMC_SDDE_SEED=]"), "{help}");
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.csv");
    let o = bin()
        .args(["--experiment", "path", "--level", "3", "--out"])
        .arg(&out)
        .env("MLMC_SDDE_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",42")), "{csv}");
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "experiment=deviation\nlevel=4\nsamples=200\neps-sweep=0,0.01,0.1,1\n").unwrap();
    let out = dir.path().join("d.csv");
    let o = bin().arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("experiment,level,h,eps,theta,delta,statistic,value,samples,seed\n"));
    assert!(csv.contains("deviation,4,0.0625,0,0.25,,sup_sq_deviation,0,200,0"), "{csv}");
}
