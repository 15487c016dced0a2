//! Closed-loop simulation: plant with true disturbance and drag, disturbance
//! estimate, receding-horizon replanning and tracking, metrics.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{deriv, rk4_with};
use crate::error::{Error, Result};
use crate::gp::{GpModel, TrainingTuple};
use crate::mpc::{Controller, OcpConfig};
use crate::planner::{build_corridor, split_route, Corridor, PlannerConfig, RouteSplit};
use crate::quad::{Disturbance, QuadParams, QuadState, RotorInput};
use crate::rng::{gaussian3, RngStream};
use crate::search::{
    baseline_kino_astar_with_stats, kino_jss_search_with_stats, propagate_kinematic, validate_route,
    Motion, Route, SearchConfig, SearchNode, SearchState,
};
use crate::world::{Occupancy, VoxelMap};

/// One step of a piecewise-constant nominal schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    /// Start time, s.
    pub t: f64,
    pub nominal: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Mass-normalized nominal force, m/s².
    pub nominal: [f64; 3],
    pub noise_sigma: f64,
    /// Component-wise bound on the deviation from nominal, m/s².
    pub noise_bound: f64,
    /// Optional piecewise-constant override of `nominal` (sorted by `t`).
    pub schedule: Vec<ScheduleStep>,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            nominal: [0.0; 3],
            noise_sigma: 0.2,
            noise_bound: 0.5,
            schedule: Vec::new(),
        }
    }
}

impl DisturbanceSpec {
    pub fn constant(nominal: [f64; 3]) -> Self {
        Self {
            nominal,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !(self.noise_bound >= 0.0) {
            return Err(Error::invalid("disturbance noise sigma and bound must be nonnegative"));
        }
        if self.schedule.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::invalid("disturbance schedule must be sorted by time"));
        }
        Ok(())
    }

    pub fn nominal_at(&self, t: f64) -> Vector3<f64> {
        let n = self
            .schedule
            .iter()
            .rev()
            .find(|s| s.t <= t)
            .map_or(self.nominal, |s| s.nominal);
        Vector3::from(n)
    }
}

/// Nominal plus Gaussian noise clipped component-wise to the bound.
pub fn sample_disturbance<R: Rng + ?Sized>(spec: &DisturbanceSpec, t: f64, rng: &mut R) -> Disturbance {
    let b = spec.noise_bound;
    let w = gaussian3(rng, spec.noise_sigma).map(|x| x.clamp(-b, b));
    Disturbance::from(spec.nominal_at(t) + w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Measurement noise of the estimator input, m/s².
    pub sigma_est: f64,
    /// First-order low-pass time constant, s.
    pub time_constant: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            sigma_est: 0.1,
            time_constant: 0.2,
        }
    }
}

/// First-order low-pass estimate of the external force, starting from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceEstimator {
    pub cfg: EstimatorConfig,
    estimate: Vector3<f64>,
}

impl DisturbanceEstimator {
    pub fn new(cfg: EstimatorConfig) -> Self {
        Self {
            cfg,
            estimate: Vector3::zeros(),
        }
    }

    pub fn estimate(&self) -> Disturbance {
        Disturbance::from(self.estimate)
    }

    /// Feeds one noisy observation of `true_e_f` taken `dt` after the last.
    pub fn update<R: Rng + ?Sized>(&mut self, true_e_f: &Disturbance, dt: f64, rng: &mut R) -> Disturbance {
        let z = true_e_f.accel + gaussian3(rng, self.cfg.sigma_est);
        let alpha = if self.cfg.time_constant > 0.0 {
            1.0 - (-dt / self.cfg.time_constant).exp()
        } else {
            1.0
        };
        self.estimate += alpha * (z - self.estimate);
        self.estimate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub timeout: f64,
    pub success_radius: f64,
    /// Replan once this fraction of the committed route time is consumed.
    pub replan_fraction: f64,
    /// Linear drag injected into the plant only, 1/s.
    pub drag: f64,
    /// Wait after a failed search before trying again, s.
    pub retry_interval: f64,
    /// Expansion budget for replans from a moving state; the first search uses the search config.
    pub replan_max_expansions: usize,
    /// Half extent of the sensing window around the vehicle, m.
    pub window_half_extent: [f64; 3],
    /// Keep per-step trace rows.
    pub record_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            timeout: 60.0,
            success_radius: 0.5,
            replan_fraction: 0.5,
            drag: 0.3,
            retry_interval: 0.5,
            replan_max_expansions: 20_000,
            window_half_extent: [10.0, 10.0, 10.0],
            record_trace: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    KinoJss,
    BaselineAstar,
}

impl PlannerKind {
    pub fn name(&self) -> &'static str {
        match self {
            PlannerKind::KinoJss => "kino_jss",
            PlannerKind::BaselineAstar => "baseline_astar",
        }
    }

    pub fn search(
        &self,
        start: &SearchState,
        goal: &Vector3<f64>,
        map: &VoxelMap,
        e_f: &Disturbance,
        params: &QuadParams,
        cfg: &SearchConfig,
    ) -> (Result<Route>, crate::search::SearchStats) {
        match self {
            PlannerKind::KinoJss => kino_jss_search_with_stats(start, goal, map, e_f, params, cfg),
            PlannerKind::BaselineAstar => baseline_kino_astar_with_stats(start, goal, map, e_f, params, cfg),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    GpMpc,
    NominalMpc,
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::GpMpc => "gp_mpc",
            ControllerKind::NominalMpc => "nominal_mpc",
        }
    }
}

/// Everything an episode needs besides the map, endpoints and seed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeSetup {
    pub quad: QuadParams,
    pub search: SearchConfig,
    pub planner: PlannerConfig,
    pub ocp: OcpConfig,
    pub disturbance: DisturbanceSpec,
    pub estimator: EstimatorConfig,
    pub sim: SimConfig,
}

impl EpisodeSetup {
    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        self.search.validate()?;
        self.planner.validate()?;
        self.ocp.validate()?;
        self.disturbance.validate()?;
        let s = &self.sim;
        if !(s.timeout > 0.0) || !(s.success_radius > 0.0) || !(s.replan_fraction > 0.0 && s.replan_fraction <= 1.0) {
            return Err(Error::invalid("bad simulation settings"));
        }
        if !(s.drag >= 0.0) || !(s.retry_interval >= 0.0) || s.window_half_extent.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::invalid("bad drag or sensing window"));
        }
        if !(self.estimator.sigma_est >= 0.0) || !(self.estimator.time_constant >= 0.0) {
            return Err(Error::invalid("bad estimator settings"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub collision: bool,
    /// Time at goal, or the elapsed time when the episode ended otherwise, s.
    pub completion_time: f64,
    pub mean_error: f64,
    pub max_error: f64,
    /// Wall-clock search time per replan, ms.
    pub search_time_ms: Vec<f64>,
    pub replans: usize,
    pub search_failures: usize,
    pub solver_faults: usize,
    /// Σ‖a‖²·dt of the plant acceleration.
    pub control_cost: f64,
    /// Invariant violations over all returned routes.
    pub route_violations: usize,
    /// SQP solves whose accepted merit sequence increased.
    pub merit_violations: usize,
    pub steps: usize,
}

/// One logged control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub state: QuadState,
    pub reference: Vector3<f64>,
    pub input: RotorInput,
    pub e_true: Vector3<f64>,
    pub e_est: Vector3<f64>,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
}

pub const TRACE_HEADER: &str = "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,rx,ry,rz,u0,u1,u2,u3,etx,ety,etz,eex,eey,eez,sqp_iter,kkt";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let s = r.state.to_vector();
        let _ = write!(out, "{:.4}", r.t);
        for v in s
            .iter()
            .chain(r.reference.iter())
            .chain(r.input.thrusts.iter())
            .chain(r.e_true.iter())
            .chain(r.e_est.iter())
        {
            let _ = write!(out, ",{v:.6}");
        }
        let _ = writeln!(out, ",{},{:.3e}", r.sqp_iterations, r.kkt_residual);
    }
    out
}

/// Plant step: RK4 under the true disturbance plus linear drag.
pub fn plant_step(x: &QuadState, u: &RotorInput, e_f: &Disturbance, drag: f64, dt: f64, params: &QuadParams) -> QuadState {
    rk4_with(x, dt, |s| {
        let mut d = deriv(s, u, &e_f.accel, params);
        d.d_velocity -= drag * s.velocity;
        d
    })
}

struct Plan {
    split: RouteSplit,
    corridor: Option<Corridor>,
    t_plan: f64,
}

fn route_invalidated(plan: &Plan, map: &VoxelMap, inflate: f64) -> bool {
    plan.split
        .committed
        .nodes
        .iter()
        .any(|n| map.is_free(&n.state.position, inflate) == Occupancy::Occupied)
}

/// Single-node route holding `p`.
fn hold_route(p: Vector3<f64>) -> Route {
    Route {
        nodes: vec![SearchNode {
            state: SearchState::at_rest(p),
            cost: 0.0,
            heuristic: 0.0,
            parent: None,
            motion_from_parent: None,
            neighbors: Vec::new(),
            time: 0.0,
        }],
        total_cost: 0.0,
        total_time: 0.0,
        compensation: Vector3::zeros(),
    }
}

/// Runs one closed-loop episode on the ground-truth `truth` map.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    setup: &EpisodeSetup,
    truth: &VoxelMap,
    start: Vector3<f64>,
    goal: Vector3<f64>,
    planner: PlannerKind,
    gp: Option<&GpModel>,
    seed: u64,
) -> Result<(EpisodeResult, Vec<TraceRow>)> {
    setup.validate()?;
    let dt = setup.ocp.dt;
    let stream = RngStream::new(seed, 0x51);
    let mut est = DisturbanceEstimator::new(setup.estimator);
    let mut ctl = Controller::new(setup.quad, setup.ocp)?;
    let window = Vector3::from(setup.sim.window_half_extent);
    let inflate = setup.search.inflate;

    let mut x = QuadState::at_rest(start);
    let mut plan: Option<Plan> = None;
    let mut last_input = RotorInput::hover(&setup.quad);
    let mut trace = Vec::new();
    let mut res = EpisodeResult {
        success: false,
        collision: false,
        completion_time: 0.0,
        mean_error: 0.0,
        max_error: 0.0,
        search_time_ms: Vec::new(),
        replans: 0,
        search_failures: 0,
        solver_faults: 0,
        control_cost: 0.0,
        route_violations: 0,
        merit_violations: 0,
        steps: 0,
    };
    let mut err_sum = 0.0;
    let mut retry_at = 0.0;
    let max_steps = (setup.sim.timeout / dt).ceil() as usize;

    for step in 0..max_steps {
        let t = step as f64 * dt;
        if (x.position - goal).norm() <= setup.sim.success_radius {
            res.success = true;
            res.completion_time = t;
            break;
        }
        let mut rng = stream.child(step as u64).rng();
        let e_true = sample_disturbance(&setup.disturbance, t, &mut rng);
        let e_est = est.estimate();
        let view = truth.clone().with_window(x.position, window);

        let due = match &plan {
            None => true,
            Some(p) => {
                let span = p.split.committed.total_time;
                t - p.t_plan >= setup.sim.replan_fraction * span || route_invalidated(p, &view, inflate)
            }
        };
        if due && t >= retry_at {
            let s0 = SearchState::new(x.position, x.velocity);
            let mut scfg = setup.search.clone();
            if plan.is_some() {
                scfg.max_expansions = scfg.max_expansions.min(setup.sim.replan_max_expansions);
            }
            let clock = Instant::now();
            let (route, _) = planner.search(&s0, &goal, &view, &e_est, &setup.quad, &scfg);
            res.search_time_ms.push(clock.elapsed().as_secs_f64() * 1e3);
            match route.and_then(|r| {
                res.route_violations += validate_route(&r, &view, &setup.quad, &scfg).len();
                let split = split_route(&r, &view, &setup.planner)?;
                let corridor = build_corridor(&split, &view, &setup.planner)?;
                Ok((split, corridor))
            }) {
                Ok((split, corridor)) => {
                    res.replans += 1;
                    plan = Some(Plan {
                        split,
                        corridor: Some(corridor),
                        t_plan: t,
                    });
                }
                Err(_) => {
                    res.search_failures += 1;
                    retry_at = t + setup.sim.retry_interval - 1e-9;
                    if plan.is_none() {
                        let r = hold_route(x.position);
                        plan = Some(Plan {
                            split: RouteSplit {
                                whole: r.clone(),
                                safe: r.clone(),
                                committed: r,
                            },
                            corridor: None,
                            t_plan: t,
                        });
                    }
                }
            }
        }
        let p = plan.as_ref().expect("plan set above");
        let t_route = t - p.t_plan;
        let committed = &p.split.committed;
        let reference = if t_route >= committed.total_time {
            committed.terminal().position
        } else {
            committed.sample(t_route).0
        };
        let err = (x.position - reference).norm();
        err_sum += err;
        res.max_error = res.max_error.max(err);

        let input = match ctl.control_step(&x, committed, p.corridor.as_ref(), t_route, &e_est, gp) {
            Ok(u) => u,
            Err(_) => {
                res.solver_faults += 1;
                last_input
            }
        };
        let (iters, kkt) = match ctl.last_solution() {
            Some(s) => {
                if !s.merit_monotone() {
                    res.merit_violations += 1;
                }
                (s.iterations, s.kkt_residual)
            }
            None => (0, f64::NAN),
        };
        if setup.sim.record_trace {
            trace.push(TraceRow {
                t,
                state: x,
                reference,
                input,
                e_true: e_true.accel,
                e_est: e_est.accel,
                sqp_iterations: iters,
                kkt_residual: kkt,
            });
        }
        last_input = input;

        let next = plant_step(&x, &input, &e_true, setup.sim.drag, dt, &setup.quad);
        let acc = (next.velocity - x.velocity) / dt;
        res.control_cost += acc.norm_squared() * dt;
        est.update(&e_true, dt, &mut rng);
        x = next;
        res.steps = step + 1;
        res.completion_time = (step + 1) as f64 * dt;

        if !x.is_finite() || truth.blocked_truth(&x.position, inflate).unwrap_or(true) {
            res.collision = true;
            break;
        }
    }
    if !res.success && !res.collision && (x.position - goal).norm() <= setup.sim.success_radius {
        res.success = true;
    }
    res.mean_error = if res.steps > 0 { err_sum / res.steps as f64 } else { 0.0 };
    Ok((res, trace))
}

/// Random acceleration segments whose velocity stays inside `±v_span`.
pub fn excitation_route(start: Vector3<f64>, duration: f64, v_span: f64, a_max: f64, seed: u64) -> Route {
    let mut rng = RngStream::new(seed, 0xe1).rng();
    let mut nodes = hold_route(start).nodes;
    let mut t = 0.0;
    while t < duration {
        let s = nodes.last().expect("nonempty").state;
        let tau = 0.5 + rng.random::<f64>();
        // aim for a random velocity inside the span and accelerate toward it
        let v_goal = Vector3::from_fn(|_, _| (rng.random::<f64>() * 2.0 - 1.0) * v_span);
        let a = ((v_goal - s.velocity) / tau).map(|c| c.clamp(-a_max, a_max));
        let next = propagate_kinematic(&s, &a, tau);
        t += tau;
        let parent = nodes.len() - 1;
        nodes.push(SearchNode {
            state: next,
            cost: 0.0,
            heuristic: 0.0,
            parent: Some(parent),
            motion_from_parent: Some(Motion { accel: a, duration: tau }),
            neighbors: Vec::new(),
            time: t,
        });
    }
    Route {
        nodes,
        total_cost: 0.0,
        total_time: t,
        compensation: Vector3::zeros(),
    }
}

/// Flies the nominal controller along an excitation route in free space and
/// logs one training tuple per step.
pub fn run_excitation(setup: &EpisodeSetup, duration: f64, v_span: f64, seed: u64) -> Result<Vec<TrainingTuple>> {
    setup.validate()?;
    let dt = setup.ocp.dt;
    let route = excitation_route(Vector3::zeros(), duration, v_span, setup.quad.a_max, seed);
    let stream = RngStream::new(seed, 0x52);
    let mut est = DisturbanceEstimator::new(setup.estimator);
    let mut ctl = Controller::new(setup.quad, setup.ocp)?;
    let mut x = QuadState::at_rest(Vector3::zeros());
    let mut out = Vec::new();
    let mut last = RotorInput::hover(&setup.quad);
    let steps = (duration / dt).floor() as usize;
    for step in 0..steps {
        let t = step as f64 * dt;
        let mut rng = stream.child(step as u64).rng();
        let e_true = sample_disturbance(&setup.disturbance, t, &mut rng);
        let e_est = est.estimate();
        let u = ctl.control_step(&x, &route, None, t, &e_est, None).unwrap_or(last);
        last = u;
        let next = plant_step(&x, &u, &e_true, setup.sim.drag, dt, &setup.quad);
        out.push(TrainingTuple {
            state: x,
            input: u,
            disturbance_estimate: e_est,
            next,
        });
        est.update(&e_true, dt, &mut rng);
        x = next;
        if !x.is_finite() {
            return Err(Error::Internal("excitation flight diverged".into()));
        }
    }
    Ok(out)
}
