//! Kinodynamic route search over double-integrator motion primitives.
//!
//! Two planners share every ingredient (primitive set, feasibility test, edge
//! cost, heuristic, closed-set grid, goal shot):
//!
//! * [`kino_jss_search`] jumps: a primitive is re-applied from each propagated
//!   state without touching the open set until something forces a stop
//!   (obstacles in the voxel neighbourhood, a blocked continuation, velocity
//!   saturation, closest approach to the goal, or the depth cap).
//! * [`baseline_kino_astar`] inserts every propagated state, as a hybrid-state
//!   A* does.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::Vector3;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::{Disturbance, QuadParams};
use crate::rng::{gaussian3, RngStream};
use crate::world::{Occupancy, VoxelMap};

/// Double-integrator search state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl SearchState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>) -> Self {
        Self { position, velocity }
    }

    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self::new(position, Vector3::zeros())
    }
}

/// Constant commanded acceleration held for `duration` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub accel: Vector3<f64>,
    pub duration: f64,
}

/// How a jump continues after its first primitive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Continuation {
    /// Hold the reached velocity (straight-line continuation).
    Coast,
    /// Keep applying the same primitive.
    Repeat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Duration of every primitive, s.
    pub primitive_duration: f64,
    /// Forward acceleration of the primitive set as a fraction of `a_max`.
    pub forward_fraction: f64,
    /// Multipliers of the forward acceleration (accelerate, coast, brake).
    pub forward_levels: Vec<f64>,
    /// Lateral/vertical half-width of the primitive grid as a fraction of `a_max`.
    pub spread: f64,
    /// Lateral/vertical samples per axis.
    pub lateral_samples: usize,
    pub goal_radius: f64,
    /// Obstacle inflation (robot radius), m.
    pub inflate: f64,
    /// Extra inflation used when sensing obstacles around jump states, m.
    pub sense_margin: f64,
    /// Weight of the time term in the edge cost.
    pub rho: f64,
    /// Inflation of the heuristic in the open-set ordering (1 = plain A*).
    pub heuristic_weight: f64,
    /// Std of the Gaussian perturbation of the disturbance correction, m/s².
    pub efcor_sigma: f64,
    pub max_jump_depth: usize,
    /// Motion re-applied after the first step of a jump.
    pub continuation: Continuation,
    /// Closed-set position quantum, m. Zero means the map resolution.
    pub closed_position_quantum: f64,
    /// Closed-set velocity quantum is `v_max / velocity_divisions`.
    pub velocity_divisions: f64,
    /// Nodes within this distance of the goal try a direct primitive to it.
    pub goal_shot_radius: f64,
    pub max_expansions: usize,
    pub max_propagations: usize,
    /// Treat unknown voxels inside the map as traversable.
    pub optimistic_unknown: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            primitive_duration: 0.5,
            forward_fraction: 1.0,
            forward_levels: vec![1.0, 0.0, -1.0],
            spread: 1.0,
            lateral_samples: 3,
            goal_radius: 0.5,
            inflate: 0.3,
            sense_margin: 0.3,
            rho: 1.0,
            heuristic_weight: 5.0,
            efcor_sigma: 0.1,
            max_jump_depth: 64,
            continuation: Continuation::Coast,
            closed_position_quantum: 0.0,
            velocity_divisions: 5.0,
            goal_shot_radius: 6.0,
            max_expansions: 100_000,
            max_propagations: 20_000_000,
            optimistic_unknown: true,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn sensing_inflate(&self) -> f64 {
        self.inflate + self.sense_margin
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.primitive_duration > 0.0) {
            return Err(Error::invalid("primitive_duration must be positive"));
        }
        if self.lateral_samples == 0 || self.forward_levels.is_empty() {
            return Err(Error::invalid("empty primitive set"));
        }
        if !(self.goal_radius > 0.0) || self.inflate < 0.0 || self.rho < 0.0 {
            return Err(Error::invalid("bad goal radius, inflation or rho"));
        }
        if !(self.heuristic_weight >= 1.0) {
            return Err(Error::invalid("heuristic_weight must be at least 1"));
        }
        if self.efcor_sigma < 0.0 || !(self.velocity_divisions > 0.0) {
            return Err(Error::invalid("bad sigma or velocity quantum"));
        }
        if self.max_jump_depth == 0 {
            return Err(Error::invalid("max_jump_depth must be at least 1"));
        }
        Ok(())
    }
}

/// Node of a returned route.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchNode {
    pub state: SearchState,
    /// Accumulated edge cost from the start.
    pub cost: f64,
    pub heuristic: f64,
    /// Index of the predecessor in the route.
    pub parent: Option<usize>,
    pub motion_from_parent: Option<Motion>,
    /// Forced-neighbour positions recorded when the node was inserted.
    pub neighbors: Vec<Vector3<f64>>,
    /// Route time at this node, s.
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<SearchNode>,
    pub total_cost: f64,
    pub total_time: f64,
    /// Disturbance compensation the commanded accelerations include; the
    /// kinematic acceleration of a motion is `accel − compensation`.
    pub compensation: Vector3<f64>,
}

impl Route {
    pub fn start(&self) -> &SearchState {
        &self.nodes[0].state
    }

    pub fn terminal(&self) -> &SearchState {
        &self.nodes.last().expect("route is never empty").state
    }

    /// Σ‖commanded accel‖²·duration.
    pub fn control_cost(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| n.motion_from_parent)
            .map(|m| self.kinematic_accel(&m).norm_squared() * m.duration)
            .sum()
    }

    pub fn kinematic_accel(&self, m: &Motion) -> Vector3<f64> {
        m.accel - self.compensation
    }

    /// Position, velocity and kinematic acceleration at route time `t`
    /// (clamped to the route span).
    pub fn sample(&self, t: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let t = t.clamp(0.0, self.total_time);
        for w in self.nodes.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if t <= b.time {
                let m = b.motion_from_parent.expect("non-root node has a motion");
                let acc = self.kinematic_accel(&m);
                let s = (t - a.time).max(0.0);
                let st = propagate_kinematic(&a.state, &acc, s);
                return (st.position, st.velocity, acc);
            }
        }
        let last = self.terminal();
        (last.position, last.velocity, Vector3::zeros())
    }

    /// Prefix ending at node `last` (inclusive).
    pub fn prefix(&self, last: usize) -> Route {
        let nodes: Vec<SearchNode> = self.nodes[..=last.min(self.nodes.len() - 1)].to_vec();
        let end = nodes.last().expect("nonempty");
        Route {
            total_cost: end.cost,
            total_time: end.time,
            nodes,
            compensation: self.compensation,
        }
    }

    /// CSV with one row per node: `t,px,py,pz,vx,vy,vz,ax,ay,az`, where `a`
    /// is the kinematic acceleration of the segment leaving the node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,px,py,pz,vx,vy,vz,ax,ay,az\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let a = self
                .nodes
                .get(i + 1)
                .and_then(|nx| nx.motion_from_parent)
                .map(|m| self.kinematic_accel(&m))
                .unwrap_or_else(Vector3::zeros);
            let p = n.state.position;
            let v = n.state.velocity;
            let _ = writeln!(
                out,
                "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                n.time, p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z
            );
        }
        out
    }
}

/// Counters describing one search run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SearchStats {
    pub expansions: usize,
    /// Open-set insertions and updates.
    pub insertions: usize,
    pub propagations: usize,
    pub collision_samples: usize,
    pub elapsed_ms: f64,
}

/// Exact constant-acceleration step.
#[inline]
pub fn propagate_kinematic(s: &SearchState, accel: &Vector3<f64>, t: f64) -> SearchState {
    SearchState {
        position: s.position + s.velocity * t + 0.5 * accel * t * t,
        velocity: s.velocity + accel * t,
    }
}

/// Propagates a motion whose commanded acceleration includes `e_f` compensation.
#[inline]
pub fn state_propagation(s: &SearchState, m: &Motion, e_f: &Disturbance) -> SearchState {
    propagate_kinematic(s, &(m.accel - e_f.accel), m.duration)
}

/// Acceleration and velocity limits along the primitive (zero disturbance).
pub fn check_fea(state: &SearchState, m: &Motion, params: &QuadParams) -> bool {
    check_fea_with(state, m, &Disturbance::zero(), params)
}

pub fn check_fea_with(
    state: &SearchState,
    m: &Motion,
    e_f: &Disturbance,
    params: &QuadParams,
) -> bool {
    const EPS: f64 = 1e-9;
    // the compensation share of the command is the tracker's business
    let kin = m.accel - e_f.accel;
    if !(m.duration > 0.0) || kin.amax() > params.a_max + EPS {
        return false;
    }
    // velocity is affine in t, so the endpoints bound it
    let end = state.velocity + kin * m.duration;
    state.velocity.amax() <= params.v_max + EPS && end.amax() <= params.v_max + EPS
}

/// Fixed-duration primitive that reaches `neighbor_pos` exactly.
pub fn pos_to_motion(cur: &SearchState, neighbor_pos: &Vector3<f64>, duration: f64) -> Motion {
    let accel = 2.0 * (neighbor_pos - cur.position - cur.velocity * duration) / (duration * duration);
    Motion { accel, duration }
}

pub fn edge_cost(m: &Motion, cfg: &SearchConfig) -> f64 {
    m.accel.norm_squared() * m.duration + cfg.rho * m.duration
}

/// Time lower bound: no axis can move faster than `v_max`.
pub fn heuristic(state: &SearchState, goal: &Vector3<f64>, v_max: f64, cfg: &SearchConfig) -> f64 {
    cfg.rho * (goal - state.position).amax() / v_max
}

/// The nominal (uncorrected) primitive set oriented along the travel direction.
pub fn motion_set(
    state: &SearchState,
    goal: &Vector3<f64>,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Vec<Motion> {
    let forward = if state.velocity.norm() > 1e-6 {
        state.velocity.normalize()
    } else {
        let d = goal - state.position;
        if d.norm() > 1e-9 {
            d.normalize()
        } else {
            Vector3::x()
        }
    };
    let helper = if forward.z.abs() < 0.9 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let lateral = helper.cross(&forward).normalize();
    let up = forward.cross(&lateral);
    let k = cfg.lateral_samples;
    let grid: Vec<f64> = if k == 1 {
        vec![0.0]
    } else {
        (0..k)
            .map(|i| -cfg.spread + 2.0 * cfg.spread * i as f64 / (k - 1) as f64)
            .collect()
    };
    let mut out = Vec::with_capacity(cfg.forward_levels.len() * k * k);
    for &level in &cfg.forward_levels {
        for &sa in &grid {
            for &sb in &grid {
                let mut a =
                    params.a_max * (level * cfg.forward_fraction * forward + sa * lateral + sb * up);
                let peak = a.amax();
                if peak > params.a_max {
                    a *= params.a_max / peak;
                }
                out.push(Motion {
                    accel: a,
                    duration: cfg.primitive_duration,
                });
            }
        }
    }
    out
}

/// Pyramid primitives shifted by `efcor`. The exploration noise in `efcor`
/// is clipped so the kinematic share stays inside the acceleration box.
fn corrected_motion_set(
    state: &SearchState,
    goal: &Vector3<f64>,
    e_f: &Disturbance,
    efcor: &Vector3<f64>,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Vec<Motion> {
    let noise = efcor - e_f.accel;
    motion_set(state, goal, params, cfg)
        .into_iter()
        .map(|m| {
            let kin = (m.accel + noise).map(|a| a.clamp(-params.a_max, params.a_max));
            Motion {
                accel: kin + e_f.accel,
                duration: m.duration,
            }
        })
        .collect()
}

/// Disturbance-corrected primitives followed by feasible forced-neighbour motions.
pub fn jss_motion(
    cur: &SearchNode,
    goal: &Vector3<f64>,
    e_f: &Disturbance,
    rng: &RngStream,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Vec<Motion> {
    let mut r = rng.rng();
    let efcor = e_f.accel + gaussian3(&mut r, cfg.efcor_sigma);
    let mut motions = corrected_motion_set(&cur.state, goal, e_f, &efcor, params, cfg);
    for n in &cur.neighbors {
        let kin = pos_to_motion(&cur.state, n, cfg.primitive_duration);
        let m = Motion {
            accel: kin.accel + e_f.accel,
            duration: kin.duration,
        };
        if check_fea_with(&cur.state, &m, e_f, params) {
            motions.push(m);
        }
    }
    motions
}

const NEIGHBOR_OFFSETS: [[i32; 3]; 26] = {
    let mut out = [[0; 3]; 26];
    let mut n = 0;
    let mut i = 0;
    while i < 27 {
        let d = [i % 3 - 1, (i / 3) % 3 - 1, i / 9 - 1];
        if !(d[0] == 0 && d[1] == 0 && d[2] == 0) {
            out[n] = d;
            n += 1;
        }
        i += 1;
    }
    out
};

fn offset_voxel(map: &VoxelMap, base: [usize; 3], d: [i32; 3]) -> Option<[usize; 3]> {
    let dims = map.dims();
    let mut v = [0usize; 3];
    for a in 0..3 {
        let x = base[a] as i64 + d[a] as i64;
        if x < 0 || x >= dims[a] as i64 {
            return None;
        }
        v[a] = x as usize;
    }
    Some(v)
}

/// True when any voxel of the 26-neighbourhood is occupied at the inflation radius
/// (voxels outside the map count as occupied).
pub fn check_occupied_around(map: &VoxelMap, p: &Vector3<f64>, inflate: f64) -> bool {
    let Some(base) = map.voxel_of(p) else {
        return true;
    };
    NEIGHBOR_OFFSETS.iter().any(|&d| match offset_voxel(map, base, d) {
        Some(v) => map.voxel_blocked(v, inflate),
        None => true,
    })
}

/// Forced neighbours: free voxels diagonally ahead of an occupied neighbour
/// that the straight continuation would not visit.
pub fn jss_neighbor(map: &VoxelMap, state: &SearchState, inflate: f64) -> Vec<Vector3<f64>> {
    let Some(base) = map.voxel_of(&state.position) else {
        return Vec::new();
    };
    let dir: [i32; 3] = if state.velocity.norm() > 1e-9 {
        let v = state.velocity / state.velocity.amax();
        [0, 1, 2].map(|a| v[a].round() as i32)
    } else {
        [0, 0, 0]
    };
    let blocked = |d: [i32; 3]| match offset_voxel(map, base, d) {
        Some(v) => map.voxel_blocked(v, inflate),
        None => true,
    };
    let mut out: Vec<Vector3<f64>> = Vec::new();
    for &o in NEIGHBOR_OFFSETS.iter() {
        if !blocked(o) {
            continue;
        }
        // only obstacles beside the travel direction force neighbours
        let along: i32 = (0..3).map(|a| o[a] * dir[a]).sum();
        if dir != [0, 0, 0] && along != 0 {
            continue;
        }
        let candidates: Vec<[i32; 3]> = if dir == [0, 0, 0] {
            // at rest every free face-neighbour of the obstacle cell is forced
            (0..3)
                .flat_map(|a| [-1, 1].map(move |s| (a, s)))
                .map(|(a, s)| {
                    let mut c = o;
                    c[a] += s;
                    c
                })
                .collect()
        } else {
            vec![[o[0] + dir[0], o[1] + dir[1], o[2] + dir[2]]]
        };
        for c in candidates {
            if c.iter().any(|x| x.abs() > 1) || c == [0, 0, 0] || c == dir || blocked(c) {
                continue;
            }
            if let Some(v) = offset_voxel(map, base, c) {
                let p = map.voxel_center(v);
                if !out.iter().any(|q| (q - p).norm() < 1e-12) {
                    out.push(p);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Jump,
    Expand,
}

type GridKey = (i32, i32, i32, i32, i32, i32);

struct ArenaNode {
    state: SearchState,
    g: f64,
    h: f64,
    parent: Option<usize>,
    /// Motions leading from the parent to this node (several after a jump).
    chain: Vec<Motion>,
    neighbors: Vec<Vector3<f64>>,
}

#[derive(PartialEq)]
struct OpenEntry {
    f: f64,
    seq: u64,
    node: usize,
}

impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Search<'a> {
    map: &'a VoxelMap,
    goal: Vector3<f64>,
    e_f: Disturbance,
    params: &'a QuadParams,
    cfg: &'a SearchConfig,
    mode: Mode,
    rng: RngStream,
    pos_quantum: f64,
    vel_quantum: f64,
    sample_step: f64,
    arena: Vec<ArenaNode>,
    open: BinaryHeap<OpenEntry>,
    open_index: FxHashMap<GridKey, usize>,
    closed: FxHashMap<GridKey, ()>,
    seq: u64,
    stats: SearchStats,
}

enum Step {
    Ok(SearchState),
    Blocked,
    Infeasible,
    Closed,
}

impl<'a> Search<'a> {
    fn key(&self, s: &SearchState) -> GridKey {
        let q = |x: f64, h: f64| (x / h).round() as i32;
        (
            q(s.position.x, self.pos_quantum),
            q(s.position.y, self.pos_quantum),
            q(s.position.z, self.pos_quantum),
            q(s.velocity.x, self.vel_quantum),
            q(s.velocity.y, self.vel_quantum),
            q(s.velocity.z, self.vel_quantum),
        )
    }

    fn traversable(&mut self, p: &Vector3<f64>) -> bool {
        self.stats.collision_samples += 1;
        match self.map.is_free(p, self.cfg.inflate) {
            Occupancy::Free => true,
            Occupancy::Occupied => false,
            Occupancy::Unknown => self.cfg.optimistic_unknown && self.map.contains(p),
        }
    }

    fn segment_free(&mut self, from: &SearchState, m: &Motion) -> bool {
        let acc = m.accel - self.e_f.accel;
        let len = from.velocity.norm() * m.duration + 0.5 * acc.norm() * m.duration * m.duration;
        let n = ((len / self.sample_step).ceil() as usize).max(1);
        (1..=n).all(|i| {
            let t = m.duration * i as f64 / n as f64;
            let p = propagate_kinematic(from, &acc, t).position;
            self.traversable(&p)
        })
    }

    fn step(&mut self, from: &SearchState, m: &Motion) -> Step {
        self.stats.propagations += 1;
        if !check_fea_with(from, m, &self.e_f, self.params) {
            return Step::Infeasible;
        }
        let next = state_propagation(from, m, &self.e_f);
        if self.closed.contains_key(&self.key(&next)) {
            return Step::Closed;
        }
        if !self.segment_free(from, m) {
            return Step::Blocked;
        }
        Step::Ok(next)
    }

    /// Edge cost of the kinematic share; the compensation is the same on every edge.
    fn cost(&self, m: &Motion) -> f64 {
        let kin = Motion {
            accel: m.accel - self.e_f.accel,
            duration: m.duration,
        };
        edge_cost(&kin, self.cfg)
    }

    fn near_goal(&self, s: &SearchState) -> bool {
        (s.position - self.goal).norm() <= self.cfg.goal_radius
    }

    fn push(&mut self, parent: usize, state: SearchState, chain: Vec<Motion>) {
        let key = self.key(&state);
        if self.closed.contains_key(&key) {
            return;
        }
        let g = self.arena[parent].g + chain.iter().map(|m| self.cost(m)).sum::<f64>();
        let h = heuristic(&state, &self.goal, self.params.v_max, self.cfg);
        let neighbors = if self.mode == Mode::Jump {
            if check_occupied_around(self.map, &state.position, self.cfg.sensing_inflate()) {
                jss_neighbor(self.map, &state, self.cfg.sensing_inflate())
            } else {
                Vec::new()
            }
        } else {
            Vec::new()
        };
        let node = ArenaNode {
            state,
            g,
            h,
            parent: Some(parent),
            chain,
            neighbors,
        };
        let idx = match self.open_index.get(&key) {
            Some(&existing) => {
                if self.arena[existing].g <= g {
                    return;
                }
                self.arena[existing] = node;
                existing
            }
            None => {
                self.arena.push(node);
                let idx = self.arena.len() - 1;
                self.open_index.insert(key, idx);
                idx
            }
        };
        self.stats.insertions += 1;
        self.seq += 1;
        self.open.push(OpenEntry {
            f: g + self.cfg.heuristic_weight * h,
            seq: self.seq,
            node: idx,
        });
    }

    /// Cheapest feasible single primitive that lands exactly on the goal.
    fn goal_shot(&mut self, from: &SearchState) -> Option<Motion> {
        let d = self.goal - from.position;
        if d.norm() > self.cfg.goal_shot_radius {
            return None;
        }
        let mut best: Option<(f64, Motion)> = None;
        for k in 1..=40 {
            let tau = 0.1 * k as f64;
            let kin = pos_to_motion(from, &self.goal, tau);
            let m = Motion {
                accel: kin.accel + self.e_f.accel,
                duration: tau,
            };
            if !check_fea_with(from, &m, &self.e_f, self.params) {
                continue;
            }
            let c = edge_cost(&kin, self.cfg);
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, m));
            }
        }
        let (_, m) = best?;
        self.stats.propagations += 1;
        if self.segment_free(from, &m) {
            Some(m)
        } else {
            None
        }
    }

    fn expand(&mut self, cur_idx: usize) {
        self.stats.expansions += 1;
        let cur_state = self.arena[cur_idx].state;
        let view = SearchNode {
            state: cur_state,
            cost: self.arena[cur_idx].g,
            heuristic: self.arena[cur_idx].h,
            parent: None,
            motion_from_parent: None,
            neighbors: self.arena[cur_idx].neighbors.clone(),
            time: 0.0,
        };
        let rng = self.rng.child(self.stats.expansions as u64);
        let motions = match self.mode {
            Mode::Jump => jss_motion(&view, &self.goal, &self.e_f, &rng, self.params, self.cfg),
            Mode::Expand => {
                let mut r = rng.rng();
                let efcor = self.e_f.accel + gaussian3(&mut r, self.cfg.efcor_sigma);
                corrected_motion_set(&cur_state, &self.goal, &self.e_f, &efcor, self.params, self.cfg)
            }
        };
        if let Some(shot) = self.goal_shot(&cur_state) {
            let next = state_propagation(&cur_state, &shot, &self.e_f);
            self.push(cur_idx, next, vec![shot]);
        }
        for m in motions {
            match self.mode {
                Mode::Expand => {
                    if let Step::Ok(next) = self.step(&cur_state, &m) {
                        self.push(cur_idx, next, vec![m]);
                    }
                }
                Mode::Jump => self.jump(cur_idx, cur_state, m),
            }
        }
    }

    /// Re-applies `m` until a forced stop, then inserts the stop state.
    fn jump(&mut self, cur_idx: usize, start: SearchState, first: Motion) {
        let mut state = start;
        let mut chain: Vec<Motion> = Vec::new();
        let mut prev_goal_dist = (start.position - self.goal).norm();
        let coast = Motion {
            accel: self.e_f.accel,
            duration: first.duration,
        };
        loop {
            let m = match (chain.is_empty(), self.cfg.continuation) {
                (true, _) | (false, Continuation::Repeat) => first,
                (false, Continuation::Coast) => coast,
            };
            match self.step(&state, &m) {
                Step::Ok(next) => {
                    let dist = (next.position - self.goal).norm();
                    if !chain.is_empty()
                        && dist > prev_goal_dist
                        && prev_goal_dist <= self.cfg.goal_shot_radius
                    {
                        // passed the closest approach to the goal
                        self.push(cur_idx, state, chain);
                        return;
                    }
                    let entered_shot_zone = prev_goal_dist > self.cfg.goal_shot_radius
                        && dist <= self.cfg.goal_shot_radius;
                    chain.push(m);
                    state = next;
                    prev_goal_dist = dist;
                    if self.near_goal(&state)
                        || entered_shot_zone
                        || chain.len() >= self.cfg.max_jump_depth
                        || check_occupied_around(self.map, &state.position, self.cfg.sensing_inflate())
                    {
                        self.push(cur_idx, state, chain);
                        return;
                    }
                }
                // obstacle ahead, or the primitive saturates the velocity limit
                Step::Blocked | Step::Infeasible => {
                    if !chain.is_empty() {
                        self.push(cur_idx, state, chain);
                    }
                    return;
                }
                Step::Closed => return,
            }
        }
    }

    fn budget_exceeded(&self) -> bool {
        self.stats.expansions >= self.cfg.max_expansions
            || self.stats.propagations >= self.cfg.max_propagations
    }

    fn run(&mut self, start: SearchState) -> Result<Route> {
        let h = heuristic(&start, &self.goal, self.params.v_max, self.cfg);
        self.arena.push(ArenaNode {
            state: start,
            g: 0.0,
            h,
            parent: None,
            chain: Vec::new(),
            neighbors: if self.mode == Mode::Jump
                && check_occupied_around(self.map, &start.position, self.cfg.sensing_inflate())
            {
                jss_neighbor(self.map, &start, self.cfg.sensing_inflate())
            } else {
                Vec::new()
            },
        });
        let key = self.key(&start);
        self.open_index.insert(key, 0);
        self.stats.insertions += 1;
        self.open.push(OpenEntry {
            f: self.cfg.heuristic_weight * h,
            seq: 0,
            node: 0,
        });
        while let Some(entry) = self.open.pop() {
            let node = &self.arena[entry.node];
            if (node.g + self.cfg.heuristic_weight * node.h - entry.f).abs() > 1e-12 {
                continue; // stale entry superseded by an update
            }
            let key = self.key(&node.state);
            if self.closed.contains_key(&key) && entry.node != 0 {
                continue;
            }
            self.open_index.remove(&key);
            self.closed.insert(key, ());
            if self.near_goal(&self.arena[entry.node].state) {
                return Ok(self.reconstruct(entry.node));
            }
            if self.budget_exceeded() {
                return Err(Error::Timeout {
                    expansions: self.stats.expansions,
                });
            }
            self.expand(entry.node);
        }
        Err(Error::NoRoute {
            expansions: self.stats.expansions,
        })
    }

    fn reconstruct(&self, terminal: usize) -> Route {
        let mut ids = vec![terminal];
        while let Some(p) = self.arena[*ids.last().expect("nonempty")].parent {
            ids.push(p);
        }
        ids.reverse();
        let root = &self.arena[ids[0]];
        let mut nodes = vec![SearchNode {
            state: root.state,
            cost: 0.0,
            heuristic: root.h,
            parent: None,
            motion_from_parent: None,
            neighbors: root.neighbors.clone(),
            time: 0.0,
        }];
        for &id in &ids[1..] {
            let an = &self.arena[id];
            let k = an.chain.len();
            for (j, m) in an.chain.iter().enumerate() {
                let prev = nodes.last().expect("nonempty");
                let state = state_propagation(&prev.state, m, &self.e_f);
                let is_stop = j + 1 == k;
                nodes.push(SearchNode {
                    state,
                    cost: prev.cost + self.cost(m),
                    heuristic: heuristic(&state, &self.goal, self.params.v_max, self.cfg),
                    parent: Some(nodes.len() - 1),
                    motion_from_parent: Some(*m),
                    neighbors: if is_stop { an.neighbors.clone() } else { Vec::new() },
                    time: prev.time + m.duration,
                });
            }
        }
        let last = nodes.last().expect("nonempty");
        Route {
            total_cost: last.cost,
            total_time: last.time,
            nodes,
            compensation: self.e_f.accel,
        }
    }
}

fn run_search(
    mode: Mode,
    start: &SearchState,
    goal: &Vector3<f64>,
    map: &VoxelMap,
    e_f: &Disturbance,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> (Result<Route>, SearchStats) {
    let t0 = Instant::now();
    if let Err(e) = cfg.validate() {
        return (Err(e), SearchStats::default());
    }
    if !map.contains(goal) {
        return (Err(Error::invalid("goal outside the map")), SearchStats::default());
    }
    let start_ok = matches!(map.is_free(&start.position, cfg.inflate), Occupancy::Free)
        || (cfg.optimistic_unknown
            && map.is_free(&start.position, cfg.inflate) == Occupancy::Unknown
            && map.contains(&start.position));
    if !start_ok {
        return (Err(Error::invalid("start is not in free space")), SearchStats::default());
    }
    // start velocity may sit marginally above the limit after tracking
    let start = SearchState {
        position: start.position,
        velocity: start.velocity.map(|v| v.clamp(-params.v_max, params.v_max)),
    };
    let pos_quantum = if cfg.closed_position_quantum > 0.0 {
        cfg.closed_position_quantum
    } else {
        map.resolution()
    };
    let mut s = Search {
        map,
        goal: *goal,
        e_f: *e_f,
        params,
        cfg,
        mode,
        rng: RngStream::new(cfg.seed, 0x5ea7c4),
        pos_quantum,
        vel_quantum: params.v_max / cfg.velocity_divisions,
        sample_step: 0.5 * map.resolution(),
        arena: Vec::new(),
        open: BinaryHeap::new(),
        open_index: FxHashMap::default(),
        closed: FxHashMap::default(),
        seq: 0,
        stats: SearchStats::default(),
    };
    let result = s.run(start);
    let mut stats = s.stats;
    stats.elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;
    (result, stats)
}

/// Kino-JSS search; returns the route together with run counters.
pub fn kino_jss_search_with_stats(
    start: &SearchState,
    goal: &Vector3<f64>,
    map: &VoxelMap,
    e_f: &Disturbance,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> (Result<Route>, SearchStats) {
    run_search(Mode::Jump, start, goal, map, e_f, params, cfg)
}

pub fn kino_jss_search(
    start: &SearchState,
    goal: &Vector3<f64>,
    map: &VoxelMap,
    e_f: &Disturbance,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Result<Route> {
    kino_jss_search_with_stats(start, goal, map, e_f, params, cfg).0
}

/// Hybrid-state kinodynamic A* sharing every ingredient with Kino-JSS.
pub fn baseline_kino_astar_with_stats(
    start: &SearchState,
    goal: &Vector3<f64>,
    map: &VoxelMap,
    e_f: &Disturbance,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> (Result<Route>, SearchStats) {
    run_search(Mode::Expand, start, goal, map, e_f, params, cfg)
}

pub fn baseline_kino_astar(
    start: &SearchState,
    goal: &Vector3<f64>,
    map: &VoxelMap,
    e_f: &Disturbance,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Result<Route> {
    baseline_kino_astar_with_stats(start, goal, map, e_f, params, cfg).0
}

/// Violations of the route invariants (empty when valid).
pub fn validate_route(
    route: &Route,
    map: &VoxelMap,
    params: &QuadParams,
    cfg: &SearchConfig,
) -> Vec<String> {
    let mut problems = Vec::new();
    let e_f = Disturbance::from(route.compensation);
    let step = 0.5 * map.resolution();
    for (i, w) in route.nodes.windows(2).enumerate() {
        let (a, b) = (&w[0], &w[1]);
        let Some(m) = b.motion_from_parent else {
            problems.push(format!("node {} has no motion", i + 1));
            continue;
        };
        let p = state_propagation(&a.state, &m, &e_f);
        let err = (p.position - b.state.position)
            .amax()
            .max((p.velocity - b.state.velocity).amax());
        if err > 1e-9 {
            problems.push(format!("segment {i}: propagation mismatch {err:e}"));
        }
        if !check_fea_with(&a.state, &m, &e_f, params) {
            problems.push(format!("segment {i}: infeasible motion"));
        }
        let acc = m.accel - e_f.accel;
        let len = a.state.velocity.norm() * m.duration + 0.5 * acc.norm() * m.duration.powi(2);
        let n = ((len / step).ceil() as usize).max(1);
        for k in 0..=n {
            let t = m.duration * k as f64 / n as f64;
            let q = propagate_kinematic(&a.state, &acc, t).position;
            let ok = match map.is_free(&q, cfg.inflate) {
                Occupancy::Free => true,
                Occupancy::Occupied => false,
                Occupancy::Unknown => cfg.optimistic_unknown && map.contains(&q),
            };
            if !ok {
                problems.push(format!("segment {i}: collision at t={t:.3}"));
                break;
            }
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_forest, ForestSpec};
    use approx::assert_relative_eq;

    fn params() -> QuadParams {
        QuadParams::default()
    }

    fn empty_map(x: f64, y: f64, z: f64) -> VoxelMap {
        let res = 0.1;
        VoxelMap::empty(
            Vector3::zeros(),
            res,
            [(x / res) as usize, (y / res) as usize, (z / res) as usize],
        )
        .unwrap()
    }

    fn node(state: SearchState) -> SearchNode {
        SearchNode {
            state,
            cost: 0.0,
            heuristic: 0.0,
            parent: None,
            motion_from_parent: None,
            neighbors: Vec::new(),
            time: 0.0,
        }
    }

    /// Minimum time for one axis from (p0, v0) to rest-free arrival at p1
    /// under |a| ≤ a_max, |v| ≤ v_max (terminal velocity free).
    fn axis_min_time(d: f64, v0: f64, a_max: f64, v_max: f64) -> f64 {
        let (d, v0) = if d < 0.0 { (-d, -v0) } else { (d, v0) };
        if d == 0.0 {
            return 0.0;
        }
        // accelerate toward the target, cruise at v_max if reached
        let t_acc = ((v_max - v0) / a_max).max(0.0);
        let d_acc = v0 * t_acc + 0.5 * a_max * t_acc * t_acc;
        if d_acc >= d {
            // solve v0 t + ½ a t² = d
            return (-v0 + (v0 * v0 + 2.0 * a_max * d).sqrt()) / a_max;
        }
        t_acc + (d - d_acc) / v_max
    }

    #[test]
    fn check_fea_examples() {
        let p = params();
        let rest = SearchState::at_rest(Vector3::zeros());
        let zero = Motion {
            accel: Vector3::zeros(),
            duration: 0.5,
        };
        assert!(check_fea(&rest, &zero, &p));
        let hard = Motion {
            accel: Vector3::new(3.0, 0.0, 0.0),
            duration: 0.5,
        };
        assert!(!check_fea(&rest, &hard, &p));
        let fast = SearchState::new(Vector3::zeros(), Vector3::new(2.8, 0.0, 0.0));
        let push = Motion {
            accel: Vector3::new(1.0, 0.0, 0.0),
            duration: 0.5,
        };
        // v(τ) = 2.8 + 0.5 = 3.3 > 3
        assert!(!check_fea(&fast, &push, &p));
        let short = Motion {
            accel: Vector3::new(1.0, 0.0, 0.0),
            duration: 0.1,
        };
        assert!(check_fea(&fast, &short, &p));
    }

    #[test]
    fn pos_to_motion_examples() {
        let s = SearchState::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.4, -0.2, 0.0));
        let coast = pos_to_motion(&s, &(s.position + s.velocity * 0.5), 0.5);
        assert_relative_eq!(coast.accel.norm(), 0.0, epsilon = 1e-12);
        let rest = SearchState::at_rest(Vector3::zeros());
        let m = pos_to_motion(&rest, &Vector3::new(1.0, 0.0, 0.0), 1.0);
        assert_relative_eq!(m.accel, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        for k in 0..20 {
            let target = Vector3::new(0.3 * k as f64, -0.1 * k as f64, 0.05 * k as f64);
            let m = pos_to_motion(&s, &target, 0.5);
            let e = state_propagation(&s, &m, &Disturbance::zero());
            assert!((e.position - target).norm() <= 1e-9);
        }
    }

    #[test]
    fn edge_cost_examples() {
        let cfg = SearchConfig::default();
        let m0 = Motion {
            accel: Vector3::zeros(),
            duration: 1.0,
        };
        assert_relative_eq!(edge_cost(&m0, &cfg), 1.0);
        let m1 = Motion {
            accel: Vector3::new(2.0, 0.0, 0.0),
            duration: 0.5,
        };
        assert_relative_eq!(edge_cost(&m1, &cfg), 2.5);
        let joined = Motion {
            accel: Vector3::new(2.0, 0.0, 0.0),
            duration: 1.0,
        };
        assert_relative_eq!(edge_cost(&m1, &cfg) * 2.0, edge_cost(&joined, &cfg));
    }

    #[test]
    fn heuristic_examples() {
        let cfg = SearchConfig::default();
        let g = Vector3::new(3.0, 0.0, 0.0);
        assert_eq!(heuristic(&SearchState::at_rest(g), &g, 3.0, &cfg), 0.0);
        assert_relative_eq!(
            heuristic(&SearchState::at_rest(Vector3::zeros()), &g, 3.0, &cfg),
            1.0
        );
    }

    #[test]
    fn heuristic_admissible_against_bang_bang_oracle() {
        use rand::Rng;
        let cfg = SearchConfig::default();
        let p = params();
        let mut rng = RngStream::new(4, 4).rng();
        for _ in 0..200 {
            let mut u = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
            let s = SearchState::new(
                Vector3::new(u(10.0), u(10.0), u(3.0)),
                Vector3::new(u(3.0), u(3.0), u(3.0)),
            );
            let g = Vector3::new(u(10.0), u(10.0), u(3.0));
            // any route costs at least ρ·(time) ≥ ρ·max-axis minimum time
            let t_min = (0..3)
                .map(|a| axis_min_time(g[a] - s.position[a], s.velocity[a], p.a_max, p.v_max))
                .fold(0.0, f64::max);
            assert!(heuristic(&s, &g, p.v_max, &cfg) <= cfg.rho * t_min + 1e-9);
        }
    }

    #[test]
    fn jss_motion_without_disturbance_is_nominal() {
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let n = node(SearchState::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)));
        let goal = Vector3::new(10.0, 0.0, 0.0);
        let ms = jss_motion(&n, &goal, &Disturbance::zero(), &RngStream::new(0, 0), &p, &cfg);
        assert_eq!(ms, motion_set(&n.state, &goal, &p, &cfg));
        assert_eq!(ms.len(), 27);
    }

    #[test]
    fn jss_motion_shifts_by_disturbance() {
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let n = node(SearchState::new(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0)));
        let goal = Vector3::new(10.0, 0.0, 0.0);
        let e = Disturbance::new(0.0, 2.0, 0.0);
        let ms = jss_motion(&n, &goal, &e, &RngStream::new(0, 0), &p, &cfg);
        let nominal = motion_set(&n.state, &goal, &p, &cfg);
        for (a, b) in ms.iter().zip(nominal.iter()) {
            assert_eq!(a.accel - b.accel, Vector3::new(0.0, 2.0, 0.0));
        }
    }

    #[test]
    fn jss_motion_drops_infeasible_neighbors() {
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let mut n = node(SearchState::at_rest(Vector3::zeros()));
        // 0.1 m away is reachable; 5 m away needs 40 m/s² in 0.5 s
        n.neighbors = vec![Vector3::new(0.1, 0.0, 0.0), Vector3::new(5.0, 0.0, 0.0)];
        let goal = Vector3::new(10.0, 0.0, 0.0);
        let ms = jss_motion(&n, &goal, &Disturbance::zero(), &RngStream::new(0, 0), &p, &cfg);
        assert_eq!(ms.len(), 28);
        assert_relative_eq!(ms[27].accel, Vector3::new(0.8, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn correction_cancels_disturbance_in_propagation() {
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let s = SearchState::new(Vector3::new(1.0, 1.0, 1.0), Vector3::new(1.0, 0.5, 0.0));
        let goal = Vector3::new(10.0, 0.0, 1.0);
        let e = Disturbance::new(-0.7, 1.3, 0.2);
        let corrected = jss_motion(&node(s), &goal, &e, &RngStream::new(0, 0), &p, &cfg);
        let nominal = motion_set(&s, &goal, &p, &cfg);
        for (c, n) in corrected.iter().zip(nominal.iter()) {
            let a = state_propagation(&s, c, &e);
            let b = state_propagation(&s, n, &Disturbance::zero());
            assert!((a.position - b.position).norm() <= 1e-12);
            assert!((a.velocity - b.velocity).norm() <= 1e-12);
        }
    }

    #[test]
    fn start_near_goal_gives_single_node() {
        let map = empty_map(10.0, 10.0, 3.0);
        let start = SearchState::at_rest(Vector3::new(5.0, 5.0, 1.5));
        let goal = Vector3::new(5.2, 5.1, 1.5);
        let r = kino_jss_search(&start, &goal, &map, &Disturbance::zero(), &params(), &SearchConfig::default())
            .unwrap();
        assert_eq!(r.nodes.len(), 1);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn empty_map_time_close_to_bang_bang() {
        let map = empty_map(30.0, 6.0, 3.0);
        let start = SearchState::at_rest(Vector3::new(1.0, 3.0, 1.5));
        let goal = Vector3::new(25.0, 3.0, 1.5);
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            heuristic_weight: 1.0,
            sense_margin: 0.0,
            // time dominates the effort term
            rho: 100.0,
            ..Default::default()
        };
        let r = kino_jss_search(&start, &goal, &map, &Disturbance::zero(), &p, &cfg).unwrap();
        let t_opt = axis_min_time(24.0, 0.0, p.a_max, p.v_max);
        assert!(
            // 0.5 s primitives and the goal-shot grid quantize the route time
            r.total_time <= 1.15 * t_opt,
            "route time {} vs optimum {}",
            r.total_time,
            t_opt
        );
        assert!(validate_route(&r, &map, &p, &cfg).is_empty());
    }

    #[test]
    fn free_corridor_jumps_without_insertions() {
        // long free tube: the forward jump only stops near the goal
        let map = empty_map(40.0, 4.0, 3.0);
        let start = SearchState::at_rest(Vector3::new(1.0, 2.0, 1.5));
        let goal = Vector3::new(38.0, 2.0, 1.5);
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let (r, stats) =
            kino_jss_search_with_stats(&start, &goal, &map, &Disturbance::zero(), &params(), &cfg);
        let r = r.unwrap();
        let (_, astar) =
            baseline_kino_astar_with_stats(&start, &goal, &map, &Disturbance::zero(), &params(), &cfg);
        assert!(stats.insertions < astar.insertions);
        // the route crosses the tube with few jump points
        let jump_points = r.nodes.iter().filter(|n| !n.neighbors.is_empty()).count();
        assert!(r.nodes.len() > 10 && stats.expansions < 10, "{stats:?} {jump_points}");
    }

    #[test]
    fn forced_neighbors_near_wall() {
        // wall at x ∈ [2.0, 2.1) ending at y = 1.5, moving along y beside its end
        let occ = (0..15).flat_map(|y| (0..10).map(move |z| [20usize, y, z]));
        let map = VoxelMap::from_occupied(Vector3::zeros(), 0.1, [40, 30, 10], occ).unwrap();
        let s = SearchState::new(Vector3::new(1.65, 1.45, 0.55), Vector3::new(0.0, 1.0, 0.0));
        assert!(check_occupied_around(&map, &s.position, 0.3));
        let n = jss_neighbor(&map, &s, 0.3);
        assert!(!n.is_empty());
        for p in &n {
            assert_eq!(map.is_free(p, 0.3), Occupancy::Free);
            assert!(p.y > s.position.y, "forced neighbours lie ahead: {p:?}");
        }
        let beside = SearchState::new(Vector3::new(1.65, 0.75, 0.55), Vector3::new(0.0, 1.0, 0.0));
        assert!(check_occupied_around(&map, &beside.position, 0.3));
        assert!(jss_neighbor(&map, &beside, 0.3).is_empty(), "a straight wall forces nothing");
        let far = SearchState::new(Vector3::new(0.5, 1.05, 0.55), Vector3::new(0.0, 1.0, 0.0));
        assert!(!check_occupied_around(&map, &far.position, 0.3));
    }

    #[test]
    fn cheaper_existing_open_node_is_kept() {
        let map = empty_map(10.0, 10.0, 3.0);
        let p = params();
        let cfg = SearchConfig::default();
        let mut s = Search {
            map: &map,
            goal: Vector3::new(9.0, 5.0, 1.5),
            e_f: Disturbance::zero(),
            params: &p,
            cfg: &cfg,
            mode: Mode::Expand,
            rng: RngStream::new(0, 0),
            pos_quantum: 0.1,
            vel_quantum: 0.6,
            sample_step: 0.05,
            arena: vec![ArenaNode {
                state: SearchState::at_rest(Vector3::new(1.0, 5.0, 1.5)),
                g: 0.0,
                h: 0.0,
                parent: None,
                chain: vec![],
                neighbors: vec![],
            }],
            open: BinaryHeap::new(),
            open_index: FxHashMap::default(),
            closed: FxHashMap::default(),
            seq: 0,
            stats: SearchStats::default(),
        };
        let target = SearchState::at_rest(Vector3::new(2.0, 5.0, 1.5));
        let cheap = Motion { accel: Vector3::zeros(), duration: 0.5 };
        let dear = Motion { accel: Vector3::new(2.0, 0.0, 0.0), duration: 0.5 };
        s.push(0, target, vec![cheap]);
        s.push(0, target, vec![dear]);
        assert_eq!(s.stats.insertions, 1);
        assert_eq!(s.arena[1].chain, vec![cheap]);
        s.push(0, target, vec![cheap, cheap]);
        assert_eq!(s.stats.insertions, 1);
    }

    #[test]
    fn no_route_when_goal_enclosed() {
        // goal boxed in by a closed shell
        let mut occ = Vec::new();
        for x in 60..=80 {
            for y in 20..=40 {
                for z in 0..20 {
                    let shell = x == 60 || x == 80 || y == 20 || y == 40;
                    if shell {
                        occ.push([x, y, z]);
                    }
                }
            }
        }
        let map = VoxelMap::from_occupied(Vector3::zeros(), 0.1, [100, 60, 20], occ).unwrap();
        let start = SearchState::at_rest(Vector3::new(1.0, 3.0, 1.0));
        let goal = Vector3::new(7.0, 3.0, 1.0);
        let cfg = SearchConfig::default();
        let r = kino_jss_search(&start, &goal, &map, &Disturbance::zero(), &params(), &cfg);
        assert!(matches!(r, Err(Error::NoRoute { .. }) | Err(Error::Timeout { .. })));
        let tiny = SearchConfig {
            max_expansions: 3,
            ..cfg
        };
        let r = baseline_kino_astar(&start, &goal, &map, &Disturbance::zero(), &params(), &tiny);
        assert!(matches!(r, Err(Error::Timeout { .. })));
    }

    #[test]
    fn forest_routes_are_valid_and_deterministic() {
        let spec = ForestSpec {
            extent: [16.0, 10.0, 3.0],
            n_obstacles: 30,
            obstacle_height_range: [3.0, 3.0],
            start: [1.0, 5.0, 1.5],
            goal: [15.0, 5.0, 1.5],
            seed: 3,
            ..Default::default()
        };
        let map = generate_forest(&spec).unwrap();
        let p = params();
        let cfg = SearchConfig::default();
        let start = SearchState::at_rest(Vector3::from(spec.start));
        let goal = Vector3::from(spec.goal);
        let e = Disturbance::new(0.0, 0.5, 0.0);
        let (a, sa) = kino_jss_search_with_stats(&start, &goal, &map, &e, &p, &cfg);
        let (b, sb) = kino_jss_search_with_stats(&start, &goal, &map, &e, &p, &cfg);
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(a, b);
        assert_eq!(sa.insertions, sb.insertions);
        assert!(validate_route(&a, &map, &p, &cfg).is_empty());
        assert!((a.terminal().position - goal).norm() <= cfg.goal_radius);
        let (c, sc) = baseline_kino_astar_with_stats(&start, &goal, &map, &e, &p, &cfg);
        let c = c.unwrap();
        assert!(validate_route(&c, &map, &p, &cfg).is_empty());
        assert!(sa.insertions <= sc.insertions);
    }

    #[test]
    fn compensated_search_matches_undisturbed_search() {
        let spec = ForestSpec {
            extent: [16.0, 10.0, 3.0],
            n_obstacles: 30,
            obstacle_height_range: [3.0, 3.0],
            start: [1.0, 5.0, 1.5],
            goal: [15.0, 5.0, 1.5],
            seed: 5,
            ..Default::default()
        };
        let map = generate_forest(&spec).unwrap();
        let p = params();
        let cfg = SearchConfig {
            efcor_sigma: 0.0,
            ..Default::default()
        };
        let start = SearchState::new(Vector3::from(spec.start), Vector3::new(0.8, -0.3, 0.0));
        let goal = Vector3::from(spec.goal);
        for search in [kino_jss_search_with_stats, baseline_kino_astar_with_stats] {
            let (a, sa) = search(&start, &goal, &map, &Disturbance::zero(), &p, &cfg);
            let (b, sb) = search(&start, &goal, &map, &Disturbance::new(-1.0, 2.0, 0.0), &p, &cfg);
            let (a, b) = (a.unwrap(), b.unwrap());
            assert_eq!(sa.expansions, sb.expansions);
            assert_eq!(a.nodes.len(), b.nodes.len());
            for (x, y) in a.nodes.iter().zip(&b.nodes) {
                assert!((x.state.position - y.state.position).norm() <= 1e-9);
            }
            assert!((a.control_cost() - b.control_cost()).abs() <= 1e-9);
        }
    }
}
