//! Route splitting (whole / safe / committed) and box corridors for the MPC.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad::Disturbance;
use crate::search::{propagate_kinematic, state_propagation, Motion, Route, SearchNode};
use crate::world::{Occupancy, VoxelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Route time kept in the committed prefix, s.
    pub commit_horizon: f64,
    /// Largest box half-width around a segment, m.
    pub max_corridor_halfwidth: f64,
    /// Robot radius used for corridor clearance, m.
    pub inflate: f64,
    /// Halvings tried when a segment's bounding box is not clear.
    pub max_subdivisions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            commit_horizon: 2.0,
            max_corridor_halfwidth: 3.0,
            inflate: 0.3,
            max_subdivisions: 6,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.commit_horizon > 0.0) || !(self.max_corridor_halfwidth > 0.0) || self.inflate < 0.0
        {
            return Err(Error::invalid("bad planner configuration"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouteSplit {
    pub whole: Route,
    pub safe: Route,
    pub committed: Route,
}

/// Convex set `{p : n·p ≤ d}` over its halfspaces. Corridor boxes also keep
/// their corners.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyhedron {
    pub halfspaces: Vec<(Vector3<f64>, f64)>,
    pub lower: Vector3<f64>,
    pub upper: Vector3<f64>,
    /// Route time span the polyhedron was built for, s.
    pub t_start: f64,
    pub t_end: f64,
}

impl Polyhedron {
    pub fn from_box(lower: Vector3<f64>, upper: Vector3<f64>, t_start: f64, t_end: f64) -> Self {
        let mut halfspaces = Vec::with_capacity(6);
        for a in 0..3 {
            let mut n = Vector3::zeros();
            n[a] = 1.0;
            halfspaces.push((n, upper[a]));
            halfspaces.push((-n, -lower[a]));
        }
        Self {
            halfspaces,
            lower,
            upper,
            t_start,
            t_end,
        }
    }

    /// Smallest slack `d − n·p` over the halfspaces (positive inside).
    pub fn margin(&self, p: &Vector3<f64>) -> f64 {
        self.halfspaces
            .iter()
            .map(|(n, d)| d - n.dot(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        self.margin(p) >= margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corridor {
    pub polyhedra: Vec<Polyhedron>,
    /// First polyhedron built for each committed segment.
    pub segment_index: Vec<usize>,
}

impl Corridor {
    /// Polyhedron covering route time `t` (clamped to the corridor span).
    pub fn polyhedron_at(&self, t: f64) -> &Polyhedron {
        self.polyhedra
            .iter()
            .find(|p| t <= p.t_end)
            .unwrap_or_else(|| self.polyhedra.last().expect("corridor is never empty"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, p) in self.polyhedra.iter().enumerate() {
            let _ = writeln!(out, "polyhedron {i} t {:.6} {:.6}", p.t_start, p.t_end);
            for (n, d) in &p.halfspaces {
                let _ = writeln!(out, "{:.6} {:.6} {:.6} {:.6}", n.x, n.y, n.z, d);
            }
        }
        out
    }
}

fn segment_samples(from: &SearchNode, m: &Motion, comp: &Vector3<f64>, step: f64) -> Vec<Vector3<f64>> {
    let acc = m.accel - comp;
    let len = from.state.velocity.norm() * m.duration + 0.5 * acc.norm() * m.duration.powi(2);
    let n = ((len / step).ceil() as usize).max(1);
    (0..=n)
        .map(|k| propagate_kinematic(&from.state, &acc, m.duration * k as f64 / n as f64).position)
        .collect()
}

/// Cuts `route` at time `t`, splitting the segment that straddles it.
pub fn truncate_route(route: &Route, t: f64) -> Route {
    if t >= route.total_time {
        return route.clone();
    }
    let e_f = Disturbance::from(route.compensation);
    let mut nodes: Vec<SearchNode> = vec![route.nodes[0].clone()];
    for w in route.nodes.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.time <= t + 1e-12 {
            nodes.push(b.clone());
            continue;
        }
        let dt = t - a.time;
        if dt > 1e-9 {
            let m = b.motion_from_parent.expect("non-root node has a motion");
            let cut = Motion {
                accel: m.accel,
                duration: dt,
            };
            let state = state_propagation(&a.state, &cut, &e_f);
            nodes.push(SearchNode {
                state,
                cost: a.cost + (b.cost - a.cost) * dt / m.duration,
                heuristic: b.heuristic,
                parent: Some(nodes.len() - 1),
                motion_from_parent: Some(cut),
                neighbors: Vec::new(),
                time: t,
            });
        }
        break;
    }
    let last = nodes.last().expect("nonempty");
    Route {
        total_cost: last.cost,
        total_time: last.time,
        nodes,
        compensation: route.compensation,
    }
}

/// Whole / safe / committed split. Safe ends at the last node before the
/// first sample that is not known free.
pub fn split_route(route: &Route, map: &VoxelMap, cfg: &PlannerConfig) -> Result<RouteSplit> {
    cfg.validate()?;
    if map.is_free(&route.start().position, cfg.inflate) != Occupancy::Free {
        return Err(Error::PlannerFault(
            "route start is not known free".into(),
        ));
    }
    let step = 0.5 * map.resolution();
    let mut last_safe = 0;
    'segments: for (i, w) in route.nodes.windows(2).enumerate() {
        let m = w[1].motion_from_parent.expect("non-root node has a motion");
        for p in segment_samples(&w[0], &m, &route.compensation, step) {
            if map.is_free(&p, cfg.inflate) != Occupancy::Free {
                break 'segments;
            }
        }
        last_safe = i + 1;
    }
    let safe = route.prefix(last_safe);
    let committed = truncate_route(&safe, cfg.commit_horizon);
    Ok(RouteSplit {
        whole: route.clone(),
        safe,
        committed,
    })
}

type Idx = [i64; 3];

struct BoxGrower<'a> {
    map: &'a VoxelMap,
    inflate: f64,
}

impl BoxGrower<'_> {
    fn blocked(&self, v: Idx) -> bool {
        let d = self.map.dims();
        if (0..3).any(|a| v[a] < 0 || v[a] >= d[a] as i64) {
            return true;
        }
        self.map
            .voxel_blocked([v[0] as usize, v[1] as usize, v[2] as usize], self.inflate)
    }

    fn region_clear(&self, lo: Idx, hi: Idx) -> bool {
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if self.blocked([x, y, z]) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn index_of(&self, p: &Vector3<f64>) -> Idx {
        let q = (p - self.map.origin()) / self.map.resolution();
        [q.x.floor() as i64, q.y.floor() as i64, q.z.floor() as i64]
    }

    /// Grows the voxel box around `points` face by face. `None` when the
    /// points' own voxel box is not clear.
    fn grow(&self, points: &[Vector3<f64>], halfwidth: f64) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for p in points {
            let v = self.index_of(p);
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        if !self.region_clear(lo, hi) {
            return None;
        }
        let res = self.map.resolution();
        let steps = (halfwidth / res).floor() as i64;
        let mid: [i64; 3] = [0, 1, 2].map(|a| (lo[a] + hi[a]) / 2);
        let lo_cap: [i64; 3] = [0, 1, 2].map(|a| lo[a].min(mid[a] - steps));
        let hi_cap: [i64; 3] = [0, 1, 2].map(|a| hi[a].max(mid[a] + steps));
        let mut open = [true; 6];
        while open.iter().any(|&o| o) {
            for face in 0..6 {
                if !open[face] {
                    continue;
                }
                let a = face / 2;
                let (mut slab_lo, mut slab_hi) = (lo, hi);
                if face % 2 == 0 {
                    if lo[a] <= lo_cap[a] {
                        open[face] = false;
                        continue;
                    }
                    slab_lo[a] = lo[a] - 1;
                    slab_hi[a] = lo[a] - 1;
                } else {
                    if hi[a] >= hi_cap[a] {
                        open[face] = false;
                        continue;
                    }
                    slab_lo[a] = hi[a] + 1;
                    slab_hi[a] = hi[a] + 1;
                }
                if self.region_clear(slab_lo, slab_hi) {
                    if face % 2 == 0 {
                        lo[a] -= 1;
                    } else {
                        hi[a] += 1;
                    }
                } else {
                    open[face] = false;
                }
            }
        }
        let o = self.map.origin();
        let lower = Vector3::new(lo[0] as f64, lo[1] as f64, lo[2] as f64) * res + o;
        let upper = Vector3::new((hi[0] + 1) as f64, (hi[1] + 1) as f64, (hi[2] + 1) as f64) * res + o;
        Some((lower, upper))
    }
}

/// One box per committed segment (more when a segment must be subdivided).
pub fn build_corridor(split: &RouteSplit, map: &VoxelMap, cfg: &PlannerConfig) -> Result<Corridor> {
    cfg.validate()?;
    let route = &split.committed;
    let grower = BoxGrower {
        map,
        inflate: cfg.inflate,
    };
    let step = 0.25 * map.resolution();
    let comp = route.compensation;
    let mut polyhedra = Vec::new();
    let mut segment_index = Vec::new();
    if route.nodes.len() == 1 {
        // hovering in place: a box around the single state
        let p = route.start().position;
        let (lo, hi) = grower
            .grow(&[p], cfg.max_corridor_halfwidth)
            .ok_or_else(|| Error::Internal("committed start is not clear".into()))?;
        polyhedra.push(Polyhedron::from_box(lo, hi, 0.0, 0.0));
        return Ok(Corridor {
            polyhedra,
            segment_index,
        });
    }
    for w in route.nodes.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let m = b.motion_from_parent.expect("non-root node has a motion");
        segment_index.push(polyhedra.len());
        let pieces = 1usize << cfg.max_subdivisions;
        let mut n_pieces = 1usize;
        loop {
            let mut built = Vec::with_capacity(n_pieces);
            let dt = m.duration / n_pieces as f64;
            for k in 0..n_pieces {
                let t0 = dt * k as f64;
                let start = propagate_kinematic(&a.state, &(m.accel - comp), t0);
                let piece = Motion {
                    accel: m.accel,
                    duration: dt,
                };
                let from = SearchNode {
                    state: start,
                    ..a.clone()
                };
                let pts = segment_samples(&from, &piece, &comp, step);
                match grower.grow(&pts, cfg.max_corridor_halfwidth) {
                    Some((lo, hi)) => {
                        let poly = Polyhedron::from_box(lo, hi, a.time + t0, a.time + t0 + dt);
                        if pts.iter().any(|p| !poly.contains(p, 1e-6)) {
                            built.clear();
                            break;
                        }
                        built.push(poly);
                    }
                    None => {
                        built.clear();
                        break;
                    }
                }
            }
            if built.len() == n_pieces {
                polyhedra.extend(built);
                break;
            }
            if n_pieces >= pieces {
                return Err(Error::Internal(format!(
                    "segment at t={:.3} has no clear box",
                    a.time
                )));
            }
            n_pieces *= 2;
        }
    }
    Ok(Corridor {
        polyhedra,
        segment_index,
    })
}
