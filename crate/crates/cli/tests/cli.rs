use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlqr_core::{ks_distance, EmpiricalDistribution};
use tempfile::TempDir;

const SCALAR: &str = r#"
[system]
A = [[1.0]]
B = [[1.0]]
Q = [[1.0]]
R = [[1.0]]
gamma = 0.6

[noise]
kind = "gaussian"
mean = [0.0]
covariance = [[1.0]]
"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.toml"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn exec(&self, cmd: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_dist-lqr"))
            .arg(cmd)
            .arg("--config")
            .arg(self.dir.path().join("config.toml"))
            .arg("--out")
            .arg(self.out())
            .args(extra)
            .output()
            .unwrap()
    }

    fn ok(&self, cmd: &str) -> Output {
        let o = self.exec(cmd, &[]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out().join(name)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Parse a CSV into its header and numeric rows (blank cells become NaN).
fn table(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.unwrap()
                .iter()
                .map(|c| if c.is_empty() { f64::NAN } else { c.parse().unwrap_or(f64::NAN) })
                .collect()
        })
        .collect();
    (header, rows)
}

fn samples(run: &Run, name: &str) -> EmpiricalDistribution {
    let (_, rows) = table(&run.read(name));
    EmpiricalDistribution::new(rows.into_iter().map(|r| r[0]).collect()).unwrap()
}

fn solve_rows(run: &Run) -> Vec<(String, f64)> {
    let text = run.read("solve.csv");
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn solve_reports_optimal_gain() {
    let run = Run::new(SCALAR);
    run.ok("solve");
    let rows = solve_rows(&run);
    let k = rows.iter().find(|(q, _)| q == "K").unwrap().1;
    assert!((k + 0.4684).abs() < 1e-3, "{k}");
    let p = rows.iter().find(|(q, _)| q == "P").unwrap().1;
    assert!((p - 1.46837).abs() < 1e-4);
    for flag in ["mean_square_stable", "norm_contractive", "discount_contractive"] {
        assert_eq!(rows.iter().find(|(q, _)| q == flag).unwrap().1, 1.0);
    }
    assert!(run.out().join("meta.json").exists());
}

#[test]
fn solve_without_actuation_gives_zero_gain() {
    let run = Run::new(&SCALAR.replace("A = [[1.0]]", "A = [[0.5]]").replace("B = [[1.0]]", "B = [[0.0]]"));
    run.ok("solve");
    let rows = solve_rows(&run);
    assert!(rows.iter().filter(|(q, _)| q == "K").all(|(_, v)| *v == 0.0));
}

#[test]
fn uncontrollable_unstable_system_is_a_solver_failure() {
    let run = Run::new(&SCALAR.replace("A = [[1.0]]", "A = [[2.0]]").replace("B = [[1.0]]", "B = [[0.0]]"));
    let o = run.exec("solve", &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run.exec("solve", &["--check"])), 3);
}

#[test]
fn invalid_configs_exit_with_config_code() {
    let unknown = Run::new(&format!("{SCALAR}\nextra = 1\n"));
    assert_eq!(code(&unknown.exec("solve", &[])), 2);

    let indefinite = Run::new(&SCALAR.replace("Q = [[1.0]]", "Q = [[-1.0]]"));
    assert_eq!(code(&indefinite.exec("solve", &[])), 2);

    let no_task = Run::new(SCALAR);
    assert_eq!(code(&no_task.exec("dist", &[])), 2);

    let ragged = Run::new(&SCALAR.replace("A = [[1.0]]", "A = [[1.0], [1.0, 2.0]]"));
    assert_eq!(code(&ragged.exec("solve", &[])), 2);

    let bad_gamma = Run::new(&SCALAR.replace("gamma = 0.6", "gamma = 1.0"));
    assert_eq!(code(&bad_gamma.exec("solve", &["--check"])), 2);

    let typo = Run::new(&format!("{SCALAR}\n[task.dist]\nx = 1.0\nN = [3]\nbin = 10\n"));
    assert_eq!(code(&typo.exec("dist", &[])), 2);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_dist-lqr"))
        .args(["solve", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 5);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let run = Run::new(SCALAR);
    std::fs::write(run.out(), "a file, not a directory").unwrap();
    assert_eq!(code(&run.exec("solve", &[])), 5);
}

#[test]
fn destabilizing_gain_is_a_stability_failure() {
    let run = Run::new(&format!("{SCALAR}\n[task.dist]\nK = 0.5\nx = 1.0\nN = [3]\n"));
    assert_eq!(code(&run.exec("dist", &["--check"])), 4);
    assert_eq!(code(&run.exec("dist", &[])), 4);
    assert!(!run.out().join("dist_N3.csv").exists());
}

#[test]
fn check_mode_writes_nothing() {
    let run = Run::new(&format!("{SCALAR}\n[task.dist]\nx = 1.0\nN = [3]\nM = 100\n"));
    let o = run.exec("dist", &["--check"]);
    assert_eq!(code(&o), 0);
    assert!(!run.out().exists());
}

#[test]
fn bound_hypothesis_failure_is_caught_in_check_mode() {
    // A_K = 1.2 is mean-square stable at γ = 0.6 but not a contraction
    let cfg = SCALAR.replace("A = [[1.0]]", "A = [[1.2]]");
    let run = Run::new(&format!("{cfg}\n[task.bound]\nK = 0.0\nx = 1.0\nN = [1, 2]\n"));
    assert_eq!(code(&run.exec("bound", &["--check"])), 4);
}

#[test]
fn degenerate_noise_occupies_one_bin() {
    let cfg = SCALAR.replace(
        "kind = \"gaussian\"\nmean = [0.0]\ncovariance = [[1.0]]",
        "kind = \"degenerate\"\npoint = [0.3]",
    );
    let run = Run::new(&format!("{cfg}\n[task.dist]\nx = 1.0\nN = [4]\nM = 500\n"));
    run.ok("dist");
    let (_, rows) = table(&run.read("dist_N4.csv"));
    assert_eq!(rows.len(), 60);
    assert_eq!(rows.iter().filter(|r| r[1] > 0.0).count(), 1);
    assert_eq!(rows.iter().map(|r| r[1]).sum::<f64>(), 1.0);
}

#[test]
fn depth_zero_is_a_point_mass_at_the_value() {
    let run = Run::new(&format!("{SCALAR}\n[task.dist]\nK = -0.4684\nx = 2.0\nN = [0]\nM = 50\nbins = 5\n"));
    run.ok("dist");
    let d = samples(&run, "dist_N0_samples.csv");
    let p = 1.21939856 / (1.0 - 0.6 * 0.5316 * 0.5316);
    assert!(d.samples().iter().all(|&v| v == d.min()));
    assert!((d.min() - 4.0 * p).abs() < 1e-9, "{}", d.min());
}

#[test]
fn dist_outputs_are_consistent_with_their_samples() {
    let run = Run::new(&format!(
        "{SCALAR}\n[task.dist]\nK = -0.4684\nx = 1.0\nN = [3, 15]\nM = 10000\nreference = \"mc\"\nhorizon = 60\n"
    ));
    run.ok("dist");
    let mc = samples(&run, "dist_MC_samples.csv");
    let (_, ks_rows) = table(&run.read("dist_ks.csv"));
    for (row, n) in ks_rows.iter().zip([3, 15]) {
        let d = samples(&run, &format!("dist_N{n}_samples.csv"));
        assert_eq!(d.count(), 10_000);
        assert_eq!(ks_distance(&d, &mc), row[1]);
        let (header, hist) = table(&run.read(&format!("dist_N{n}.csv")));
        assert_eq!(header, ["bin_center", "frequency"]);
        assert!((hist.iter().map(|r| r[1]).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // a deep truncation is indistinguishable from the rollout reference
    assert!(ks_rows[1][1] < 0.03, "{}", ks_rows[1][1]);
    // three steps leave out the γ⁴/(1−γ) share of the noise cost: visible at x₀ = 1
    assert!(ks_rows[0][1] > ks_rows[1][1]);
    let meta: serde_json::Value = serde_json::from_str(&run.read("meta.json")).unwrap();
    assert_eq!(meta["M"], 10_000);
    assert_eq!(meta["mc"]["horizon"], 60);
}

#[test]
fn large_initial_state_three_steps_match_monte_carlo() {
    let run = Run::new(&format!(
        "{SCALAR}\n[task.dist]\nK = -0.4684\nx = 8.0\nN = [3]\nM = 10000\nreference = \"mc\"\nhorizon = 60\n"
    ));
    run.ok("dist");
    let (_, ks_rows) = table(&run.read("dist_ks.csv"));
    assert!(ks_rows[0][1] < 0.05, "{}", ks_rows[0][1]);
}

#[test]
fn compare_sweep_decreases_and_respects_the_bound() {
    let run = Run::new(&format!(
        "{SCALAR}\n[task.compare]\nK = -0.4684\nx = 1.0\nN = [5, 10, 15]\nM = 100000\nL0 = \"estimate\"\n"
    ));
    run.ok("compare");
    let (header, rows) = table(&run.read("ks_vs_N.csv"));
    assert_eq!(header, ["N", "ks_to_reference", "bound_over_l0", "bound_at_N"]);
    assert!(rows[0][1] > rows[1][1] && rows[1][1] > rows[2][1], "{rows:?}");
    let slack = 3.0 * 0.2603 * (2.0f64 / 100_000.0).sqrt();
    for r in &rows {
        assert!(r[1] <= r[3] + slack, "{r:?}");
        assert!((r[2] / rows[0][2] - 0.6f64.powi((r[0] - 5.0) as i32)).abs() < 1e-12);
    }
}

#[test]
fn compare_against_an_independent_copy_sits_at_the_noise_floor() {
    let run = Run::new(&format!(
        "{SCALAR}\n[task.compare]\nK = -0.4684\nx = 1.0\nN = [10]\nM = 10000\nreference_n = 10\ncommon_seeds = false\n"
    ));
    run.ok("compare");
    let (_, rows) = table(&run.read("ks_vs_N.csv"));
    assert!(rows[0][1] > 0.0 && rows[0][1] < 0.03, "{rows:?}");
    // without L0 only the unnormalized column is filled
    assert!(rows[0][2] > 0.0 && rows[0][3].is_nan());
}

#[test]
fn compare_with_degenerate_noise_is_exact() {
    let cfg = SCALAR.replace(
        "kind = \"gaussian\"\nmean = [0.0]\ncovariance = [[1.0]]",
        "kind = \"degenerate\"\npoint = [0.0]",
    );
    let run = Run::new(&format!("{cfg}\n[task.compare]\nx = 1.0\nN = [1, 2, 3]\nM = 1000\n"));
    run.ok("compare");
    let (_, rows) = table(&run.read("ks_vs_N.csv"));
    assert!(rows.iter().all(|r| r[1] == 0.0));
}

#[test]
fn bound_files() {
    // unknown nested tables are rejected like unknown keys
    let run = Run::new(&format!("{SCALAR}\n[noise.extra]\n"));
    assert_eq!(code(&run.exec("bound", &[])), 2);

    let cfg = SCALAR.replace("covariance = [[1.0]]", "covariance = [[1.0]]\nmu0 = 0.7978845608028654");
    let run = Run::new(&format!("{cfg}\n[task.bound]\nK = -0.4684\nx = 1.0\nN = [1, 15]\nL0 = 1.0\n"));
    run.ok("bound");
    let text = run.read("bound_constant.csv");
    let c: f64 = text
        .lines()
        .find(|l| l.starts_with("C_over_L0,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((c - 7.45).abs() < 0.005, "{c}");
    let (_, rows) = table(&run.read("bound.csv"));
    assert!((rows[1][2] - 3.5e-3).abs() < 0.05e-3, "{rows:?}");
}

#[test]
fn optimize_with_zero_step_keeps_the_gain() {
    let run = Run::new(&format!(
        "{SCALAR}\n[task.optimize]\nK = -0.2\nx = 1.0\nM = 500\neta = 0.0\nepisodes = 25\nseeds = [3, 4]\n"
    ));
    run.ok("optimize");
    for s in [3, 4] {
        let (header, rows) = table(&run.read(&format!("trace_{s}.csv")));
        assert_eq!(&header[..3], ["t", "K_0_0", "Khat_0_0"]);
        assert_eq!(rows.len(), 25);
        assert!(rows.iter().all(|r| r[1] == -0.2));
        assert!(rows.iter().all(|r| ((r[2] + 0.2).abs() - 0.1).abs() < 1e-15));
    }
    let (_, summary) = table(&run.read("summary.csv"));
    assert_eq!(summary.len(), 25);
    assert!(summary.iter().all(|r| r[1] == -0.2));
    let (_, finals) = table(&run.read("final.csv"));
    assert_eq!(finals.iter().map(|r| r[0]).collect::<Vec<_>>(), [3.0, 4.0]);
}

#[test]
fn optimize_rejects_a_destabilizing_start() {
    let run = Run::new(&format!("{SCALAR}\n[task.optimize]\nK = 0.5\nx = 1.0\nseeds = [0]\n"));
    assert_eq!(code(&run.exec("optimize", &["--check"])), 4);
}

#[test]
fn optimize_flushes_partial_traces_at_the_stability_boundary() {
    // A = 1.6, B = 1: the mean-square region is K ∈ (−2.89, −0.31); δ = 3 cannot stay inside
    let cfg = SCALAR.replace("A = [[1.0]]", "A = [[1.6]]");
    let run = Run::new(&format!(
        "{cfg}\n[task.optimize]\nK = -1.6\nx = 1.0\nM = 100\ndelta = 3.0\nepisodes = 10\nseeds = [0]\n"
    ));
    let o = run.exec("optimize", &[]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.out().join("trace_0.csv").exists());
    let meta: serde_json::Value = serde_json::from_str(&run.read("meta.json")).unwrap();
    assert!(meta["error"].as_str().unwrap().contains("stabilizing perturbation"));
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let body = "\n[task.dist]\nx = 1.0\nN = [3]\nM = 200\n";
    let a = Run::new(&format!("seed = 5\n{SCALAR}{body}"));
    let b = Run::new(&format!("seed = 9\n{SCALAR}{body}"));
    a.ok("dist");
    assert!(b.exec("dist", &["--seed", "5"]).status.success());
    assert_eq!(a.read("dist_N3_samples.csv"), b.read("dist_N3_samples.csv"));
    let c = Run::new(&format!("seed = 9\n{SCALAR}{body}"));
    c.ok("dist");
    assert_ne!(a.read("dist_N3_samples.csv"), c.read("dist_N3_samples.csv"));
}

#[test]
fn output_prefix_and_directory_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let cfg = format!(
        "{SCALAR}\n[output]\ndirectory = \"{}\"\nprefix = \"exp1_\"\n",
        out.display()
    );
    let path = dir.path().join("c.toml");
    std::fs::write(&path, cfg).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dist-lqr"))
        .args(["solve", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(Path::new(&out).join("exp1_solve.csv").exists());
    assert!(Path::new(&out).join("exp1_meta.json").exists());
}
