//! Scenario files and the benchmark suites: route search comparison,
//! closed-loop tracking comparison and GP training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    collect_training, grid_search, residual_targets, Downsample, GpDataset, GpModel, HyperGrid,
    KernelHyper,
};
use crate::mpc::OcpConfig;
use crate::planner::PlannerConfig;
use crate::quad::{Disturbance, QuadParams};
use crate::search::{validate_route, SearchConfig, SearchState};
use crate::sim::{
    run_episode, run_excitation, ControllerKind, DisturbanceSpec, EpisodeResult, EpisodeSetup,
    EstimatorConfig, PlannerKind, SimConfig, TraceRow,
};
use crate::world::{generate_forest, ForestSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Method {
    pub planner: PlannerKind,
    pub controller: ControllerKind,
}

impl Method {
    pub const KINOJGM: Method = Method {
        planner: PlannerKind::KinoJss,
        controller: ControllerKind::GpMpc,
    };

    pub fn label(&self) -> String {
        format!("{}+{}", self.planner.name(), self.controller.name())
    }
}

impl Default for Method {
    fn default() -> Self {
        Self::KINOJGM
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub max_points: usize,
    pub downsample: Downsample,
    pub grid: HyperGrid,
    /// Simulated excitation flight time, s.
    pub excitation_duration: f64,
    /// Velocity span of the excitation route, m/s.
    pub excitation_v_span: f64,
    /// Every `holdout_stride`-th logged step is held out for evaluation.
    pub holdout_stride: usize,
    pub seed: u64,
    /// Load this dataset instead of training when present.
    pub dataset: Option<PathBuf>,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            max_points: 50,
            downsample: Downsample::CellMean,
            grid: HyperGrid::default(),
            excitation_duration: 120.0,
            excitation_v_span: 3.0,
            holdout_stride: 5,
            seed: 0,
            dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchBenchConfig {
    pub obstacle_counts: Vec<usize>,
    pub planners: Vec<PlannerKind>,
}

impl Default for SearchBenchConfig {
    fn default() -> Self {
        Self {
            obstacle_counts: vec![499, 249, 149],
            planners: vec![PlannerKind::KinoJss, PlannerKind::BaselineAstar],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingBenchConfig {
    pub disturbances: Vec<[f64; 3]>,
    pub methods: Vec<Method>,
    /// Adds a zero-disturbance cell per method.
    pub sanity_row: bool,
}

impl Default for TrackingBenchConfig {
    fn default() -> Self {
        Self {
            disturbances: vec![[0.0, 2.0, 0.0], [-1.0, 2.0, 0.0]],
            methods: vec![
                Method::KINOJGM,
                Method {
                    planner: PlannerKind::KinoJss,
                    controller: ControllerKind::NominalMpc,
                },
                Method {
                    planner: PlannerKind::BaselineAstar,
                    controller: ControllerKind::GpMpc,
                },
            ],
            sanity_row: false,
        }
    }
}

/// Full experiment description, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub seeds: Vec<u64>,
    pub method: Method,
    pub forest: ForestSpec,
    pub quad: QuadParams,
    pub search: SearchConfig,
    pub planner: PlannerConfig,
    pub ocp: OcpConfig,
    pub gp: GpConfig,
    pub disturbance: DisturbanceSpec,
    pub estimator: EstimatorConfig,
    pub sim: SimConfig,
    pub search_bench: SearchBenchConfig,
    pub tracking_bench: TrackingBenchConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            method: Method::default(),
            forest: ForestSpec::default(),
            quad: QuadParams::default(),
            search: SearchConfig::default(),
            planner: PlannerConfig::default(),
            ocp: OcpConfig::default(),
            gp: GpConfig::default(),
            disturbance: DisturbanceSpec::default(),
            estimator: EstimatorConfig::default(),
            sim: SimConfig {
                record_trace: false,
                ..SimConfig::default()
            },
            search_bench: SearchBenchConfig::default(),
            tracking_bench: TrackingBenchConfig::default(),
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn setup(&self) -> EpisodeSetup {
        EpisodeSetup {
            quad: self.quad,
            search: self.search.clone(),
            planner: self.planner.clone(),
            ocp: self.ocp,
            disturbance: self.disturbance.clone(),
            estimator: self.estimator,
            sim: self.sim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.forest.validate()?;
        self.setup().validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        if self.gp.max_points == 0 || self.gp.holdout_stride < 2 || !(self.gp.excitation_duration > 0.0) {
            return Err(Error::invalid("bad GP training settings"));
        }
        Ok(())
    }
}

/// Maps `f` over `items` on `workers` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

fn mean_std_max(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), max)
}

// ---------------------------------------------------------------------------
// search bench

#[derive(Debug, Clone, PartialEq)]
pub struct SearchRun {
    pub n_obstacles: usize,
    pub seed: u64,
    pub planner: PlannerKind,
    pub success: bool,
    pub expansions: usize,
    pub insertions: usize,
    pub propagations: usize,
    pub control_cost: f64,
    pub route_time: f64,
    pub violations: usize,
    /// Wall clock, ms.
    pub time_ms: f64,
}

/// Runs every planner on every (obstacle count, seed) forest.
pub fn run_search_bench(scenario: &Scenario, seeds: &[u64], workers: usize) -> Result<Vec<SearchRun>> {
    scenario.validate()?;
    let cells: Vec<(usize, u64)> = scenario
        .search_bench
        .obstacle_counts
        .iter()
        .flat_map(|&n| seeds.iter().map(move |&s| (n, s)))
        .collect();
    let results = par_map(&cells, workers, |&(n, seed)| -> Result<Vec<SearchRun>> {
        let spec = ForestSpec {
            n_obstacles: n,
            seed,
            ..scenario.forest.clone()
        };
        let map = generate_forest(&spec)?;
        let start = SearchState::at_rest(Vector3::from(spec.start));
        let goal = Vector3::from(spec.goal);
        // build the clearance field before timing anything
        let _ = map.clearance(&start.position);
        let cfg = SearchConfig {
            seed,
            ..scenario.search.clone()
        };
        let mut runs = Vec::new();
        for &planner in &scenario.search_bench.planners {
            let clock = Instant::now();
            let (route, stats) = planner.search(&start, &goal, &map, &Disturbance::zero(), &scenario.quad, &cfg);
            let time_ms = clock.elapsed().as_secs_f64() * 1e3;
            let (success, cost, t, violations) = match &route {
                Ok(r) => (
                    true,
                    r.control_cost(),
                    r.total_time,
                    validate_route(r, &map, &scenario.quad, &cfg).len(),
                ),
                Err(_) => (false, f64::NAN, f64::NAN, 0),
            };
            runs.push(SearchRun {
                n_obstacles: n,
                seed,
                planner,
                success,
                expansions: stats.expansions,
                insertions: stats.insertions,
                propagations: stats.propagations,
                control_cost: cost,
                route_time: t,
                violations,
                time_ms,
            });
        }
        Ok(runs)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub const SEARCH_RUNS_HEADER: &str =
    "n_obstacles,planner,seed,success,expansions,insertions,propagations,control_cost,route_time,violations";

pub fn search_runs_csv(runs: &[SearchRun]) -> String {
    let mut out = format!("{SEARCH_RUNS_HEADER}\n");
    for r in runs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{:.4},{}",
            r.n_obstacles,
            r.planner.name(),
            r.seed,
            r.success as u8,
            r.expansions,
            r.insertions,
            r.propagations,
            r.control_cost,
            r.route_time,
            r.violations
        );
    }
    out
}

/// Per-cell aggregate of the search bench.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchCell {
    pub n_obstacles: usize,
    pub planner: PlannerKind,
    pub runs: usize,
    pub success_rate: f64,
    pub cost: (f64, f64, f64),
    pub insertions_mean: f64,
    pub expansions_mean: f64,
    pub time_ms: (f64, f64, f64),
}

fn cell_keys<K: Ord + Copy, T>(items: &[T], key: impl Fn(&T) -> K) -> Vec<K> {
    let mut keys: Vec<K> = Vec::new();
    for it in items {
        let k = key(it);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys
}

pub fn search_cells(runs: &[SearchRun]) -> Vec<SearchCell> {
    cell_keys(runs, |r| (r.n_obstacles, r.planner))
        .into_iter()
        .map(|(n, planner)| {
            let rs: Vec<&SearchRun> = runs.iter().filter(|r| r.n_obstacles == n && r.planner == planner).collect();
            let ok: Vec<&&SearchRun> = rs.iter().filter(|r| r.success).collect();
            let costs: Vec<f64> = ok.iter().map(|r| r.control_cost).collect();
            let times: Vec<f64> = rs.iter().map(|r| r.time_ms).collect();
            SearchCell {
                n_obstacles: n,
                planner,
                runs: rs.len(),
                success_rate: ok.len() as f64 / rs.len() as f64,
                cost: mean_std_max(&costs),
                insertions_mean: rs.iter().map(|r| r.insertions as f64).sum::<f64>() / rs.len() as f64,
                expansions_mean: rs.iter().map(|r| r.expansions as f64).sum::<f64>() / rs.len() as f64,
                time_ms: mean_std_max(&times),
            }
        })
        .collect()
}

pub const SEARCH_SUMMARY_HEADER: &str =
    "n_obstacles,planner,runs,success_rate,cost_mean,cost_std,cost_max,insertions_mean,expansions_mean";

pub fn search_summary_csv(cells: &[SearchCell]) -> String {
    let mut out = format!("{SEARCH_SUMMARY_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.6},{:.6},{:.6},{:.2},{:.2}",
            c.n_obstacles,
            c.planner.name(),
            c.runs,
            c.success_rate,
            c.cost.0,
            c.cost.1,
            c.cost.2,
            c.insertions_mean,
            c.expansions_mean
        );
    }
    out
}

pub const SEARCH_TIMING_HEADER: &str = "n_obstacles,planner,runs,time_ms_mean,time_ms_std,time_ms_max";

/// Wall-clock aggregates; kept apart from the deterministic tables.
pub fn search_timing_csv(cells: &[SearchCell]) -> String {
    let mut out = format!("{SEARCH_TIMING_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            c.n_obstacles,
            c.planner.name(),
            c.runs,
            c.time_ms.0,
            c.time_ms.1,
            c.time_ms.2
        );
    }
    out
}

// ---------------------------------------------------------------------------
// GP training

#[derive(Debug, Clone, PartialEq)]
pub struct GpTrainReport {
    pub dataset: GpDataset,
    pub hyper: KernelHyper,
    pub log_marginal_likelihood: f64,
    pub logged_steps: usize,
    pub held_out: usize,
    /// Std of the held-out residual targets, pooled over axes.
    pub residual_std: f64,
    /// Held-out RMSE of the GP mean against the injected drag law.
    pub rmse_vs_drag: f64,
    /// Held-out RMSE of the GP mean against the raw residual targets.
    pub rmse_vs_targets: f64,
    /// RMS of the GP mean over the held-out inputs.
    pub prediction_rms: f64,
    pub weak_signal: bool,
}

impl GpTrainReport {
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let mut out = String::new();
        let _ = writeln!(out, "points={}", self.dataset.len());
        let _ = writeln!(out, "logged_steps={}", self.logged_steps);
        let _ = writeln!(out, "held_out={}", self.held_out);
        let _ = writeln!(
            out,
            "hyper sigma_f={} sigma_n={} length_scale={} alpha={}",
            h.sigma_f, h.sigma_n, h.length_scales[0], h.alpha
        );
        let _ = writeln!(out, "log_marginal_likelihood={:.6}", self.log_marginal_likelihood);
        let _ = writeln!(out, "residual_std={:.6}", self.residual_std);
        let _ = writeln!(out, "rmse_vs_drag={:.6}", self.rmse_vs_drag);
        let _ = writeln!(out, "rmse_vs_targets={:.6}", self.rmse_vs_targets);
        let _ = writeln!(out, "prediction_rms={:.6}", self.prediction_rms);
        let _ = writeln!(out, "weak_signal={}", self.weak_signal);
        out
    }

    pub fn model(&self) -> Result<GpModel> {
        GpModel::fit(self.dataset.clone(), self.hyper)
    }
}

/// Flies the excitation route, fits the GP on the kept steps and evaluates
/// it on the held-out ones.
pub fn train_gp(scenario: &Scenario) -> Result<GpTrainReport> {
    scenario.validate()?;
    let setup = scenario.setup();
    let g = &scenario.gp;
    let log = run_excitation(&setup, g.excitation_duration, g.excitation_v_span, g.seed)?;
    let (train, held): (Vec<_>, Vec<_>) = log
        .iter()
        .enumerate()
        .partition(|(i, _)| i % g.holdout_stride != g.holdout_stride - 1);
    let train: Vec<_> = train.into_iter().map(|(_, t)| *t).collect();
    let held: Vec<_> = held.into_iter().map(|(_, t)| *t).collect();
    let dataset = collect_training(&train, &scenario.quad, scenario.ocp.dt, g.max_points, g.downsample)?;
    let (hyper, lml) = grid_search(&dataset, &g.grid)?;
    let model = GpModel::fit(dataset.clone(), hyper)?;

    let (z, y) = residual_targets(&held, &scenario.quad, scenario.ocp.dt)?;
    let n = z.len().max(1) as f64;
    let mean = y.iter().sum::<Vector3<f64>>() / n;
    let residual_std = (y.iter().map(|v| (v - mean).norm_squared()).sum::<f64>() / (3.0 * n)).sqrt();
    let mut sq_drag = 0.0;
    let mut sq_target = 0.0;
    let mut sq_pred = 0.0;
    for (zi, yi) in z.iter().zip(&y) {
        let p = model.predict_mean(zi);
        sq_drag += (p + scenario.sim.drag * zi).norm_squared();
        sq_target += (p - yi).norm_squared();
        sq_pred += p.norm_squared();
    }
    let prediction_rms = (sq_pred / (3.0 * n)).sqrt();
    Ok(GpTrainReport {
        dataset,
        hyper,
        log_marginal_likelihood: lml,
        logged_steps: log.len(),
        held_out: z.len(),
        residual_std,
        rmse_vs_drag: (sq_drag / (3.0 * n)).sqrt(),
        rmse_vs_targets: (sq_target / (3.0 * n)).sqrt(),
        prediction_rms,
        weak_signal: prediction_rms < 0.1,
    })
}

/// The scenario's GP: loaded from `gp.dataset` with a grid-searched fit, or
/// trained from scratch.
pub fn scenario_gp(scenario: &Scenario) -> Result<GpModel> {
    match &scenario.gp.dataset {
        Some(path) => {
            let ds = GpDataset::load(path, scenario.gp.max_points)?;
            let (hyper, _) = grid_search(&ds, &scenario.gp.grid)?;
            GpModel::fit(ds, hyper)
        }
        None => train_gp(scenario)?.model(),
    }
}

// ---------------------------------------------------------------------------
// tracking bench

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingRun {
    pub disturbance: [f64; 3],
    pub method: Method,
    pub seed: u64,
    pub result: EpisodeResult,
    /// Per-step trace, empty unless `sim.record_trace` is set.
    pub trace: Vec<TraceRow>,
}

/// Closed-loop episodes for every disturbance × method × seed. `gp` is
/// required when any method uses the GP controller.
pub fn run_tracking_bench(
    scenario: &Scenario,
    gp: Option<&GpModel>,
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<TrackingRun>> {
    scenario.validate()?;
    let tb = &scenario.tracking_bench;
    if gp.is_none() && tb.methods.iter().any(|m| m.controller == ControllerKind::GpMpc) {
        return Err(Error::invalid("GP controller requested without a GP model"));
    }
    let mut disturbances = Vec::new();
    if tb.sanity_row {
        disturbances.push([0.0; 3]);
    }
    disturbances.extend(tb.disturbances.iter().copied());
    let mut jobs = Vec::new();
    for &d in &disturbances {
        for &m in &tb.methods {
            for &s in seeds {
                jobs.push((d, m, s));
            }
        }
    }
    let results = par_map(&jobs, workers, |&(d, method, seed)| -> Result<TrackingRun> {
        let spec = ForestSpec {
            seed,
            ..scenario.forest.clone()
        };
        let map = generate_forest(&spec)?;
        let mut setup = scenario.setup();
        setup.disturbance.nominal = d;
        setup.search.seed = seed;
        let g = match method.controller {
            ControllerKind::GpMpc => gp,
            ControllerKind::NominalMpc => None,
        };
        let (result, trace) = run_episode(
            &setup,
            &map,
            Vector3::from(spec.start),
            Vector3::from(spec.goal),
            method.planner,
            g,
            seed,
        )?;
        Ok(TrackingRun {
            disturbance: d,
            method,
            seed,
            result,
            trace,
        })
    });
    results.into_iter().collect()
}

fn fmt_vec(d: &[f64; 3]) -> String {
    format!("({} {} {})", d[0], d[1], d[2])
}

pub const TRACKING_RUNS_HEADER: &str = "disturbance,planner,controller,seed,success,collision,completion_time,mean_error,max_error,control_cost,replans,search_failures,solver_faults,route_violations,merit_violations";

pub fn tracking_runs_csv(runs: &[TrackingRun]) -> String {
    let mut out = format!("{TRACKING_RUNS_HEADER}\n");
    for r in runs {
        let e = &r.result;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.2},{:.6},{:.6},{:.6},{},{},{},{},{}",
            fmt_vec(&r.disturbance),
            r.method.planner.name(),
            r.method.controller.name(),
            r.seed,
            e.success as u8,
            e.collision as u8,
            e.completion_time,
            e.mean_error,
            e.max_error,
            e.control_cost,
            e.replans,
            e.search_failures,
            e.solver_faults,
            e.route_violations,
            e.merit_violations
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingCell {
    pub disturbance: [f64; 3],
    pub method: Method,
    pub runs: usize,
    pub success_rate: f64,
    /// Completion time over successful episodes.
    pub time_mean: f64,
    /// Mean position error over all episodes: mean, std, max.
    pub error: (f64, f64, f64),
}

pub fn tracking_cells(runs: &[TrackingRun]) -> Vec<TrackingCell> {
    let keys: Vec<([u64; 3], Method)> =
        cell_keys(runs, |r| (r.disturbance.map(f64::to_bits), r.method));
    keys.into_iter()
        .map(|(dbits, method)| {
            let d = dbits.map(f64::from_bits);
            let rs: Vec<&TrackingRun> = runs.iter().filter(|r| r.disturbance == d && r.method == method).collect();
            let ok: Vec<f64> = rs.iter().filter(|r| r.result.success).map(|r| r.result.completion_time).collect();
            let errs: Vec<f64> = rs.iter().map(|r| r.result.mean_error).collect();
            TrackingCell {
                disturbance: d,
                method,
                runs: rs.len(),
                success_rate: ok.len() as f64 / rs.len() as f64,
                time_mean: mean_std_max(&ok).0,
                error: mean_std_max(&errs),
            }
        })
        .collect()
}

pub const TRACKING_SUMMARY_HEADER: &str =
    "disturbance,planner,controller,runs,success_rate,time_mean,error_mean,error_std,error_max";

pub fn tracking_summary_csv(cells: &[TrackingCell]) -> String {
    let mut out = format!("{TRACKING_SUMMARY_HEADER}\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.3},{:.6},{:.6},{:.6}",
            fmt_vec(&c.disturbance),
            c.method.planner.name(),
            c.method.controller.name(),
            c.runs,
            c.success_rate,
            c.time_mean,
            c.error.0,
            c.error.1,
            c.error.2
        );
    }
    out
}

pub const TRACKING_TIMING_HEADER: &str = "disturbance,planner,controller,seed,replans,search_ms_mean,search_ms_max";

pub fn tracking_timing_csv(runs: &[TrackingRun]) -> String {
    let mut out = format!("{TRACKING_TIMING_HEADER}\n");
    for r in runs {
        let (m, _, x) = mean_std_max(&r.result.search_time_ms);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.4}",
            fmt_vec(&r.disturbance),
            r.method.planner.name(),
            r.method.controller.name(),
            r.seed,
            r.result.replans,
            m,
            x
        );
    }
    out
}
