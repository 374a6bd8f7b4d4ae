use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn evnetd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evnetd")).args(args).arg("--out").arg(out).arg("--quiet").output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    evnetd(&[cmd, "--config", config.to_str().unwrap()], out)
}

/// Parses a CSV written by the tool, checking the header and LF line endings.
fn read_csv(path: &Path, header: &[&str]) -> Vec<csv::StringRecord> {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'), "{} has CR line endings", path.display());
    let mut r = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(r.headers().unwrap(), header, "{}", path.display());
    r.records().map(|x| x.unwrap()).collect()
}

fn f(r: &csv::StringRecord, i: usize) -> f64 {
    r[i].parse().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const REPORT_HEADER: [&str; 16] = [
    "loop",
    "verdict",
    "reliability",
    "reliability_floor",
    "p_agg",
    "delivery",
    "mass_deficit",
    "tail_limsup",
    "tail_bound",
    "tail_margin",
    "tail_verdict",
    "constant_law_holds",
    "constant_law_lhs",
    "constant_law_rhs",
    "variance_bound",
    "kappa_alpha",
];

#[test]
fn analyze_small_network_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("analyze", &configs().join("two_loops.toml"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("report.csv"), &REPORT_HEADER);
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(&r[1], "GuaranteedStable");
        assert!(f(r, 7) < 0.5);
    }
    let chain = read_csv(&tmp.path().join("chain.csv"), &["loop", "d", "pi_idle", "pi_transmit", "p_loss"]);
    assert_eq!(chain.len(), 2 * 401);
    let total: f64 = chain.iter().filter(|r| &r[0] == "0").map(|r| f(r, 2)).sum();
    assert!((total - 1.0).abs() < 1e-9);
    read_csv(&tmp.path().join("busy.csv"), &["loop", "attempt", "p_busy"]);
}

#[test]
fn analyze_saturated_network_is_not_guaranteed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("analyze", &configs().join("ten_loops.toml"), tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("report.csv"), &REPORT_HEADER);
    assert!(rows.iter().all(|r| &r[1] == "NotGuaranteed"));
}

#[test]
fn constant_law_analysis_reports_both_tests() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("analyze", &configs().join("constant_law_region.toml"), tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let rows = read_csv(&tmp.path().join("report.csv"), &REPORT_HEADER);
    assert_eq!(rows.len(), 5);
    assert!((f(&rows[0], 2) - 0.7056).abs() < 5e-3);
    assert_eq!(&rows[0][11], "true");
}

#[test]
fn malformed_config_exits_2_with_a_line() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "bad.toml", "[network]\nloops = 2\n[crm]\np_alpha = = 0.4\n");
    let o = run("analyze", &p, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn unknown_keys_and_bad_probabilities_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(configs().join("constant_law_region.toml")).unwrap();
    for (from, to) in [("p_gamma = 0.8", "p_gamma = 0.8\np_gama = 0.7"), ("p_alpha = 0.4", "p_alpha = 1.4")] {
        let p = write_config(tmp.path(), "c.toml", &base.replace(from, to));
        let o = run("analyze", &p, tmp.path());
        assert_eq!(o.status.code(), Some(2), "{to}");
    }
    let o = evnetd(&["analyze", "--config", "/nonexistent.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

const REGION: &str = r#"
[network]
loops = 5
[plant]
a = 1.5
b = 1.0
sigma_w = 1.0
[crm]
p_alpha = 0.4
r_max = 10
[region]
gamma_points = 10
alpha_points = 10
rho = [0.9, 1.25, 1.5, 2.0]
"#;

#[test]
fn region_sweep_shrinks_with_instability() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "region.toml", REGION);
    let o = run("design-region", &p, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(
        &tmp.path().join("region.csv"),
        &["rho", "p_gamma", "p_alpha", "stable", "margin", "reliability", "p_loss", "p_agg", "converged", "residual", "iterations", "error"],
    );
    assert_eq!(rows.len(), 400);
    let count = |rho: f64| rows.iter().filter(|r| f(r, 0) == rho && &r[3] == "true").count();
    assert_eq!(count(0.9), 100);
    assert!(count(1.25) > count(1.5) && count(1.5) > count(2.0));
    let design = rows.iter().find(|r| f(r, 0) == 1.5 && f(r, 1) == 0.8 && f(r, 2) == 0.4).unwrap();
    assert_eq!(&design[3], "true");
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "region.toml", REGION);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run("design-region", &p, &a).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_evnetd"))
        .args(["design-region", "--quiet", "--config", p.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .env("EVNETD_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(a.join("region.csv")).unwrap(), std::fs::read(b.join("region.csv")).unwrap());
}

#[test]
fn design_thresholds_for_constant_law() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("constant_law_region.toml");
    let before = std::fs::read(&cfg).unwrap();
    let o = run("thresholds", &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(&cfg).unwrap(), before);
    let rows = read_csv(&tmp.path().join("thresholds.csv"), &["d", "threshold", "p_gamma", "variance_prev", "aux_variance_prev"]);
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!(f(r, 1) > 0.0);
        assert!((f(r, 2) - 0.8).abs() < 1e-6);
        assert!(f(r, 3) <= f(r, 4) * (1.0 + 1e-9));
    }
}

#[test]
fn majorization_densities_and_cdfs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run("thresholds", &configs().join("majorization.toml"), tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let th = read_csv(&tmp.path().join("thresholds.csv"), &["d", "threshold", "p_gamma", "variance_prev", "aux_variance_prev"]);
    assert_eq!(th.len(), 5);
    assert!(th.iter().all(|r| f(r, 1) == 1.0));
    let rows = read_csv(&tmp.path().join("densities.csv"), &["d", "kind", "x", "density", "cdf"]);
    for d in 0..=5 {
        for kind in ["idle", "auxiliary"] {
            let cdf: Vec<f64> = rows.iter().filter(|r| &r[0] == d.to_string().as_str() && &r[1] == kind).map(|r| f(r, 4)).collect();
            assert!(cdf.len() > 10, "d {d} {kind}");
            assert!(cdf.windows(2).all(|w| w[1] >= w[0]));
            assert!(cdf[0] < 1e-3 && cdf[cdf.len() - 1] > 1.0 - 1e-3);
        }
    }
}

#[test]
fn near_certain_events_give_near_zero_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(configs().join("constant_law_region.toml")).unwrap();
    let p = write_config(tmp.path(), "c.toml", &base.replace("depth = 12", "depth = 3\np_gamma = 0.999999\ndensities = false"));
    let o = run("thresholds", &p, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&tmp.path().join("thresholds.csv"), &["d", "threshold", "p_gamma", "variance_prev", "aux_variance_prev"]);
    assert!(rows.iter().all(|r| f(r, 1) < 1e-4));
    assert!(!tmp.path().join("densities.csv").exists());
}

#[test]
fn thresholds_need_a_scalar_plant() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(
        tmp.path(),
        "v.toml",
        r#"
        [network]
        loops = 2
        [plant]
        a = [[1.1, 0.0], [0.0, 0.5]]
        b = [[1.0], [1.0]]
        sigma_w = [[1.0, 0.0], [0.0, 1.0]]
        gain = [[1.1, 0.0]]
        [crm]
        p_alpha = 0.5
        r_max = 2
        [policy]
        family = "constant"
        p_gamma = 0.5
        "#,
    );
    let o = run("thresholds", &p, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scalar"));
    // the chain itself is fine with vector plants
    assert_eq!(run("analyze", &p, tmp.path()).status.code(), Some(0));
}

const SIM: &str = r#"
[network]
loops = 3
[plant]
a = 1.2
b = 1.0
sigma_w = 1.0
[crm]
p_alpha = 0.5
r_max = 4
[policy]
family = "constant"
p_gamma = 0.7
[simulate]
horizon = 20000
seed = 11
record_states = true
sweep = [1, 3]
d_bins = 6
"#;

#[test]
fn simulation_is_deterministic_in_the_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "sim.toml", SIM);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(run("simulate", &p, &a).status.success());
    assert!(run("simulate", &p, &b).status.success());
    let o = evnetd(&["simulate", "--config", p.to_str().unwrap(), "--seed", "12"], &c);
    assert!(o.status.success());
    for name in ["summary.csv", "p_gamma.csv", "running_mean.csv", "states.csv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_ne!(std::fs::read(a.join("states.csv")).unwrap(), std::fs::read(c.join("states.csv")).unwrap());
}

#[test]
fn simulation_outputs_parse_and_agree_with_the_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "sim.toml", SIM);
    assert!(run("simulate", &p, tmp.path()).status.success());
    let summary = read_csv(
        &tmp.path().join("summary.csv"),
        &[
            "m",
            "loop",
            "instants",
            "events",
            "delivered",
            "collided",
            "suppressed",
            "dropped",
            "reliability",
            "reliability_analytic",
            "reliability_sigma",
            "mean_sq_state",
            "diverged_at",
            "collisions",
        ],
    );
    assert_eq!(summary.len(), 4);
    // a lone loop only loses events to suppression, which the chain models exactly
    let lone = &summary[0];
    assert_eq!(&lone[0], "1");
    assert!((f(lone, 8) - f(lone, 9)).abs() < 4.0 * f(lone, 10));
    let events: u64 = lone[3].parse().unwrap();
    let parts: u64 = (4..8).map(|i| lone[i].parse::<u64>().unwrap()).sum();
    assert_eq!(events, parts);

    let bins = read_csv(&tmp.path().join("p_gamma.csv"), &["m", "loop", "d", "visits", "events", "p_gamma", "low_confidence"]);
    assert_eq!(bins.len(), 6 * 4);
    for b in bins.iter().filter(|b| &b[0] == "1" && b[3].parse::<u64>().unwrap() >= 1000) {
        assert!((f(b, 5) - 0.7).abs() < 0.05);
    }
    let states = read_csv(&tmp.path().join("states.csv"), &["m", "instant", "loop", "component", "x", "xhat", "gamma", "delta", "d"]);
    assert_eq!(states.len(), 20000 * 4);
    read_csv(&tmp.path().join("running_mean.csv"), &["m", "loop", "instant", "mean_sq_state"]);
}

#[test]
fn saturated_simulation_still_exits_0() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SIM.replace("a = 1.2", "a = 3.0").replace("p_gamma = 0.7", "p_gamma = 0.05").replace("record_states = true", "");
    let p = write_config(tmp.path(), "sim.toml", &text);
    let o = run("simulate", &p, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let diverged = r.records().map(|x| x.unwrap()).any(|row| !row[12].is_empty());
    assert!(diverged);
}
