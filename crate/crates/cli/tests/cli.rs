use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinojgm::bench::Scenario;
use kinojgm_cli::parse_seeds;
use kinojgm_cli::plot::{parse_trace, PLOT_FILES};

const SMALL: &str = r#"
seeds = [0, 1]

[forest]
extent = [12.0, 12.0, 3.0]
start = [1.0, 6.0, 1.5]
goal = [11.0, 6.0, 1.5]
n_obstacles = 8
obstacle_height_range = [3.0, 3.0]

[search_bench]
obstacle_counts = [8, 0]

[gp]
excitation_duration = 8.0

[tracking_bench]
disturbances = [[0.0, 2.0, 0.0]]
methods = [{ planner = "kino_jss", controller = "nominal_mpc" }]
"#;

fn small(drag: f64) -> String {
    format!("{SMALL}\n[sim]\ntimeout = 20.0\ndrag = {drag}\n")
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kinojgm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn scenario_file(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p
}

fn golden() -> BTreeMap<String, String> {
    include_str!("golden/headers.txt")
        .lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

fn first_line(p: &Path) -> String {
    fs::read_to_string(p).unwrap().lines().next().unwrap_or_default().to_owned()
}

#[test]
fn checked_in_default_scenario_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/default.toml");
    assert_eq!(Scenario::load(&path).unwrap(), Scenario::default());
}

#[test]
fn seed_lists() {
    assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
    assert_eq!(parse_seeds("4, 1..3,9").unwrap(), vec![4, 1, 2, 9]);
    assert!(parse_seeds("").is_err());
    assert!(parse_seeds("3..3").is_err());
    assert!(parse_seeds("x").is_err());
}

#[test]
fn search_bench_writes_golden_headers_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), &small(0.3));
    let g = golden();
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "2"].iter().enumerate() {
        let out = dir.path().join(format!("out{i}"));
        let o = run(&["search-bench", "--scenario", sc.to_str().unwrap(), "--workers", workers, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for name in ["search_runs.csv", "search_summary.csv", "search_timing.csv"] {
            assert_eq!(first_line(&out.join(name)), g[name], "{name}");
        }
        let summary = fs::read_to_string(out.join("search_summary.csv")).unwrap();
        // 2 obstacle counts x 2 planners
        assert_eq!(summary.lines().count(), 1 + 4);
        outputs.push((
            fs::read(out.join("search_runs.csv")).unwrap(),
            fs::read(out.join("search_summary.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seeds_flag_overrides_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), &small(0.3));
    let out = dir.path().join("out");
    let o = run(&["search-bench", "--scenario", sc.to_str().unwrap(), "--seeds", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let runs = fs::read_to_string(out.join("search_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 2);
    assert!(runs.lines().skip(1).all(|l| l.split(',').nth(2) == Some("5")));
}

#[test]
fn bad_scenario_fails_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario_file(dir.path(), "seeds = [0]\n\n[search]\nno_such_key = 1\n");
    let o = run(&["search-bench", "--scenario", sc.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
    assert!(!dir.path().join("o").join("search_runs.csv").exists());
}

#[test]
fn missing_scenario_file_fails() {
    let o = run(&["gp-train", "--scenario", "/nonexistent/scenario.toml", "--out", "/tmp/unused"]);
    assert!(!o.status.success());
}

#[test]
fn gp_train_is_deterministic_and_flags_weak_signal_without_drag() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden();
    let sc = scenario_file(dir.path(), &small(0.3));
    let mut datasets = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("gp{i}"));
        let o = run(&["gp-train", "--scenario", sc.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert_eq!(first_line(&out.join("gp_dataset.csv")), g["gp_dataset.csv"]);
        let report = fs::read_to_string(out.join("gp_report.txt")).unwrap();
        assert!(report.contains("weak_signal=false"), "{report}");
        datasets.push(fs::read(out.join("gp_dataset.csv")).unwrap());
    }
    assert_eq!(datasets[0], datasets[1]);

    let no_drag = scenario_file(dir.path(), &small(0.0));
    let out = dir.path().join("gp_flat");
    let o = run(&["gp-train", "--scenario", no_drag.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("gp_report.txt")).unwrap();
    assert!(report.contains("weak_signal=true"), "{report}");
}

#[test]
fn tracking_bench_traces_feed_the_plots() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden();
    let sc = scenario_file(dir.path(), &small(0.3));
    let out = dir.path().join("track");
    let o = run(&["tracking-bench", "--scenario", sc.to_str().unwrap(), "--seeds", "0", "--traces", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["tracking_runs.csv", "tracking_summary.csv", "tracking_timing.csv"] {
        assert_eq!(first_line(&out.join(name)), g[name], "{name}");
    }
    let traces: Vec<PathBuf> = fs::read_dir(out.join("traces")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(traces.len(), 1);
    assert_eq!(first_line(&traces[0]), g["trace"]);

    let plots = dir.path().join("plots");
    let o = run(&["plot", "--trace", traces[0].to_str().unwrap(), "--out", plots.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels = [
        ("position_error.svg", vec!["time (s)", "position error (m)"]),
        ("velocity.svg", vec!["time (s)", "velocity (m/s)"]),
        ("disturbance.svg", vec!["time (s)", "disturbance (m/s^2)"]),
        ("overlay.svg", vec!["x (m)", "y (m)", "committed route", "plant path"]),
    ];
    assert_eq!(labels.len(), PLOT_FILES.len());
    for (name, needles) in labels {
        let svg = fs::read_to_string(plots.join(name)).unwrap();
        assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"), "{name}");
        for n in needles {
            assert!(svg.contains(n), "{name} lacks {n}");
        }
    }
    let overlay = fs::read_to_string(plots.join("overlay.svg")).unwrap();
    assert!(overlay.matches("<polyline").count() >= 2);
}

#[test]
fn empty_trace_is_an_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.csv");
    fs::write(&trace, format!("{}\n", golden()["trace"])).unwrap();
    let out = dir.path().join("plots");
    let o = run(&["plot", "--trace", trace.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(!out.exists());
}

#[test]
fn malformed_trace_names_the_row() {
    let header = golden()["trace"].clone();
    let cols = header.split(',').count();
    let good = vec!["0.5"; cols].join(",");
    let mut bad = vec!["0.5"; cols];
    bad[3] = "oops";
    let text = format!("{header}\n{good}\n{good}\n{}\n", bad.join(","));
    let err = parse_trace(&text).unwrap_err().to_string();
    assert!(err.contains("row 3"), "{err}");
    let short = format!("{header}\n{good}\n0.1,0.2\n");
    let err = parse_trace(&short).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
    assert!(parse_trace("a,b\n1,2\n").is_err());
}
