//! Command implementations behind the `kinojgm` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kinojgm::bench::{
    run_search_bench, run_tracking_bench, scenario_gp, search_cells, search_runs_csv,
    search_summary_csv, search_timing_csv, tracking_cells, tracking_runs_csv,
    tracking_summary_csv, tracking_timing_csv, train_gp, Scenario,
};
use kinojgm::sim::{trace_csv, ControllerKind};

pub mod plot;

/// Parses `0..20`, `3` or comma lists mixing both.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().with_context(|| format!("bad seed range '{part}'"))?;
            let b: u64 = b.trim().parse().with_context(|| format!("bad seed range '{part}'"))?;
            if b <= a {
                bail!("empty seed range '{part}'");
            }
            out.extend(a..b);
        } else {
            out.push(part.parse().with_context(|| format!("bad seed '{part}'"))?);
        }
    }
    if out.is_empty() {
        bail!("no seeds given");
    }
    Ok(out)
}

pub fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        Some(p) => Ok(Scenario::load(p)?),
        None => Ok(Scenario::default()),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub struct Common<'a> {
    pub scenario: Option<&'a Path>,
    pub seeds: Option<Vec<u64>>,
    pub workers: usize,
    pub out: &'a Path,
}

impl Common<'_> {
    fn prepare(&self) -> Result<(Scenario, Vec<u64>)> {
        let scenario = load_scenario(self.scenario)?;
        let seeds = self.seeds.clone().unwrap_or_else(|| scenario.seeds.clone());
        fs::create_dir_all(self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok((scenario, seeds))
    }
}

/// Writes `search_runs.csv`, `search_summary.csv` and `search_timing.csv`.
pub fn cmd_search_bench(c: &Common) -> Result<Vec<PathBuf>> {
    let (scenario, seeds) = c.prepare()?;
    let runs = run_search_bench(&scenario, &seeds, c.workers)?;
    let cells = search_cells(&runs);
    Ok(vec![
        write(c.out, "search_runs.csv", &search_runs_csv(&runs))?,
        write(c.out, "search_summary.csv", &search_summary_csv(&cells))?,
        write(c.out, "search_timing.csv", &search_timing_csv(&cells))?,
    ])
}

/// Writes `tracking_runs.csv`, `tracking_summary.csv`, `tracking_timing.csv`
/// and, with `traces`, one trace CSV per episode under `traces/`.
pub fn cmd_tracking_bench(c: &Common, traces: bool) -> Result<Vec<PathBuf>> {
    let (mut scenario, seeds) = c.prepare()?;
    scenario.sim.record_trace = traces;
    let needs_gp = scenario
        .tracking_bench
        .methods
        .iter()
        .any(|m| m.controller == ControllerKind::GpMpc);
    let gp = if needs_gp { Some(scenario_gp(&scenario)?) } else { None };
    let runs = run_tracking_bench(&scenario, gp.as_ref(), &seeds, c.workers)?;
    let cells = tracking_cells(&runs);
    let mut written = vec![
        write(c.out, "tracking_runs.csv", &tracking_runs_csv(&runs))?,
        write(c.out, "tracking_summary.csv", &tracking_summary_csv(&cells))?,
        write(c.out, "tracking_timing.csv", &tracking_timing_csv(&runs))?,
    ];
    if traces {
        let dir = c.out.join("traces");
        fs::create_dir_all(&dir)?;
        for r in &runs {
            let d = r.disturbance;
            let name = format!(
                "trace_{}_{}_{}_{}_{}_{}.csv",
                d[0], d[1], d[2],
                r.method.planner.name(),
                r.method.controller.name(),
                r.seed
            );
            written.push(write(&dir, &name, &trace_csv(&r.trace))?);
        }
    }
    Ok(written)
}

/// Writes `gp_dataset.csv` and `gp_report.txt`.
pub fn cmd_gp_train(c: &Common) -> Result<Vec<PathBuf>> {
    let (scenario, _) = c.prepare()?;
    let report = train_gp(&scenario)?;
    Ok(vec![
        write(c.out, "gp_dataset.csv", &report.dataset.to_csv())?,
        write(c.out, "gp_report.txt", &report.to_text())?,
    ])
}

/// Renders the four trace plots; nothing is written when the trace is unusable.
pub fn cmd_plot(trace: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(trace).with_context(|| format!("reading {}", trace.display()))?;
    let rows = plot::parse_trace(&text)?;
    let svgs = plot::render_all(&rows)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    svgs.iter().map(|(name, svg)| write(out, name, svg)).collect()
}
