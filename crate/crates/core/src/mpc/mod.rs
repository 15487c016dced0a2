//! Receding-horizon tracking control: multiple-shooting OCP over the RK4
//! model with an optional GP residual, solved by Gauss-Newton SQP.

pub mod qp;

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3x4, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{apply_residual, rk4_unchecked, ResidualSelector};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::planner::{Corridor, Polyhedron};
use crate::quad::{
    attitude_from_thrust_direction, rotate_inverse_unchecked, rotate_unchecked, Disturbance,
    QuadParams, QuadState, RotorInput, INPUT_DIM, STATE_DIM,
};
use crate::search::Route;

pub use qp::{qp_solve, QpProblem, QpSettings, QpSolution, QpStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcpConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of Q by block.
    pub q_position: f64,
    pub q_velocity: f64,
    pub q_attitude: f64,
    pub q_body_rate: f64,
    /// Q_N = terminal_factor·Q.
    pub terminal_factor: f64,
    /// R = r_input·I on the deviation from the reference thrust.
    pub r_input: f64,
    /// Per-rotor thrust bounds, N.
    pub u_min: f64,
    pub u_max: f64,
    pub sqp_max_iters: usize,
    pub kkt_tol: f64,
    pub soft_constraint_weight: f64,
    /// Weight of the ℓ1 defect term in the line-search merit.
    pub merit_penalty: f64,
    pub qp_max_iter: usize,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            q_position: 10.0,
            q_velocity: 1.0,
            q_attitude: 5.0,
            q_body_rate: 0.1,
            terminal_factor: 10.0,
            r_input: 0.1,
            u_min: 0.0,
            u_max: 5.0,
            sqp_max_iters: 3,
            kkt_tol: 1e-4,
            soft_constraint_weight: 1000.0,
            merit_penalty: 100.0,
            qp_max_iter: 2000,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.q_position,
            self.q_velocity,
            self.q_attitude,
            self.q_body_rate,
            self.terminal_factor,
            self.soft_constraint_weight,
            self.merit_penalty,
        ];
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::invalid("horizon must be ≥ 1 and dt positive"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("state weights must be nonnegative"));
        }
        if !(self.r_input > 0.0) {
            return Err(Error::invalid("input weight must be positive definite"));
        }
        if !(self.u_min <= self.u_max) || !self.u_min.is_finite() || !self.u_max.is_finite() {
            return Err(Error::invalid("bad input bounds"));
        }
        if self.sqp_max_iters == 0 || !(self.kkt_tol > 0.0) {
            return Err(Error::invalid("bad SQP settings"));
        }
        Ok(())
    }
}

/// Transition model of the OCP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OcpModel {
    Quadrotor(QuadParams),
    /// Linear reduction `p⁺ = p + v·dt + ½(u + e)dt²`, `v⁺ = v + (u + e)dt`
    /// with 6 states and 3 acceleration inputs.
    DoubleIntegrator,
}

impl OcpModel {
    pub fn nx(&self) -> usize {
        match self {
            OcpModel::Quadrotor(_) => STATE_DIM,
            OcpModel::DoubleIntegrator => 6,
        }
    }

    pub fn nu(&self) -> usize {
        match self {
            OcpModel::Quadrotor(_) => INPUT_DIM,
            OcpModel::DoubleIntegrator => 3,
        }
    }

    fn nr(&self) -> usize {
        match self {
            OcpModel::Quadrotor(_) => 12,
            OcpModel::DoubleIntegrator => 6,
        }
    }

    /// One step with a frozen world-frame residual acceleration.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        e_f: &Vector3<f64>,
        residual: &Vector3<f64>,
        dt: f64,
    ) -> DVector<f64> {
        match self {
            OcpModel::Quadrotor(params) => {
                let s = QuadState::from_slice(x.as_slice());
                let r = RotorInput::new([u[0], u[1], u[2], u[3]]);
                let mut next = rk4_unchecked(&s, &r, e_f, dt, params);
                apply_residual(&mut next, residual, &ResidualSelector::default(), dt);
                DVector::from_row_slice(&next.to_vector())
            }
            OcpModel::DoubleIntegrator => {
                let a = Vector3::new(u[0], u[1], u[2]) + e_f + residual;
                let mut n = x.clone();
                for i in 0..3 {
                    n[i] = x[i] + x[3 + i] * dt + 0.5 * a[i] * dt * dt;
                    n[3 + i] = x[3 + i] + a[i] * dt;
                }
                n
            }
        }
    }

    fn project(&self, x: &mut DVector<f64>) {
        if let OcpModel::Quadrotor(_) = self {
            let n = x.rows(6, 4).norm();
            if n > 0.0 {
                x.rows_mut(6, 4).unscale_mut(n);
            }
        }
    }
}

/// Forward-difference Jacobians `(∂f/∂x, ∂f/∂u)` of one model step.
pub fn discrete_jacobians(
    model: &OcpModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    e_f: &Vector3<f64>,
    residual: &Vector3<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nx, nu) = (model.nx(), model.nu());
    let f0 = model.step(x, u, e_f, residual, dt);
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    let mut xp = x.clone();
    for j in 0..nx {
        let h = 1e-7 * (1.0 + x[j].abs());
        xp[j] += h;
        let fj = model.step(&xp, u, e_f, residual, dt);
        a.set_column(j, &((fj - &f0) / h));
        xp[j] = x[j];
    }
    let mut up = u.clone();
    for j in 0..nu {
        let h = 1e-7 * (1.0 + u[j].abs());
        up[j] += h;
        let fj = model.step(x, &up, e_f, residual, dt);
        b.set_column(j, &((fj - &f0) / h));
        up[j] = u[j];
    }
    (a, b)
}

/// Per-step tracking targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub position: Vec<Vector3<f64>>,
    pub velocity: Vec<Vector3<f64>>,
    pub attitude: Vec<Quaternion<f64>>,
    /// Input the reference needs at each of the first N steps.
    pub input: Vec<DVector<f64>>,
    /// Corridor polyhedron per step; `None` leaves the step unconstrained.
    pub polyhedra: Vec<Option<Polyhedron>>,
}

impl Reference {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Stationary target at `p` with hover inputs.
    pub fn hover(p: Vector3<f64>, model: &OcpModel, cfg: &OcpConfig) -> Self {
        let n = cfg.horizon;
        let u = match model {
            OcpModel::Quadrotor(params) => DVector::from_element(4, params.hover_thrust()),
            OcpModel::DoubleIntegrator => DVector::zeros(3),
        };
        Self {
            position: vec![p; n + 1],
            velocity: vec![Vector3::zeros(); n + 1],
            attitude: vec![Quaternion::identity(); n + 1],
            input: vec![u; n],
            polyhedra: vec![None; n + 1],
        }
    }

    /// Samples `route` at `t0 + k·dt`. Attitude and thrust follow from the
    /// differential flatness of the quadrotor with zero yaw; samples past
    /// the route end hold its terminal position at rest.
    pub fn from_route(
        route: &Route,
        corridor: Option<&Corridor>,
        t0: f64,
        e_f_est: &Disturbance,
        gp: Option<&GpModel>,
        params: &QuadParams,
        cfg: &OcpConfig,
    ) -> Result<Self> {
        let n = cfg.horizon;
        let mut r = Self {
            position: Vec::with_capacity(n + 1),
            velocity: Vec::with_capacity(n + 1),
            attitude: Vec::with_capacity(n + 1),
            input: Vec::with_capacity(n),
            polyhedra: Vec::with_capacity(n + 1),
        };
        for k in 0..=n {
            let t = t0 + k as f64 * cfg.dt;
            let (p, v, a) = if t >= route.total_time {
                (route.terminal().position, Vector3::zeros(), Vector3::zeros())
            } else {
                route.sample(t)
            };
            let base = a - params.gravity_vector() - e_f_est.accel;
            let mut q = attitude_from_thrust_direction(&base, 0.0);
            let mut f = base;
            if let Some(gp) = gp {
                let res = rotate_unchecked(&q, &gp.predict_mean(&rotate_inverse_unchecked(&q, &v)));
                f = base - res;
                q = attitude_from_thrust_direction(&f, 0.0);
            }
            if k < n {
                let t_rotor = (params.mass * f.norm() / 4.0).clamp(cfg.u_min, cfg.u_max);
                r.input.push(DVector::from_element(4, t_rotor));
            }
            let poly = corridor.map(|c| c.polyhedron_at(t).clone());
            r.position.push(p);
            r.velocity.push(v);
            r.attitude.push(q);
            r.polyhedra.push(poly);
        }
        Ok(r)
    }
}

/// One OCP instance: initial state, reference, model and residual source.
#[derive(Debug, Clone)]
pub struct Ocp<'a> {
    pub model: OcpModel,
    pub cfg: OcpConfig,
    pub x0: DVector<f64>,
    pub reference: Reference,
    pub e_f: Vector3<f64>,
    pub gp: Option<&'a GpModel>,
}

/// Builds the OCP after checking the reference against the horizon and the
/// corridor assignment.
pub fn build_ocp<'a>(
    x0: DVector<f64>,
    reference: Reference,
    e_f_est: &Disturbance,
    gp: Option<&'a GpModel>,
    model: OcpModel,
    cfg: &OcpConfig,
) -> Result<Ocp<'a>> {
    cfg.validate()?;
    let n = cfg.horizon;
    if reference.position.len() != n + 1
        || reference.velocity.len() != n + 1
        || reference.attitude.len() != n + 1
        || reference.polyhedra.len() != n + 1
        || reference.input.len() != n
    {
        return Err(Error::invalid("reference length does not match the horizon"));
    }
    if x0.len() != model.nx() || reference.input.iter().any(|u| u.len() != model.nu()) {
        return Err(Error::invalid("state or input dimension mismatch"));
    }
    for (p, poly) in reference.position.iter().zip(&reference.polyhedra) {
        if let Some(poly) = poly {
            if !poly.contains(p, -1e-6) {
                return Err(Error::invalid("reference point outside its corridor polyhedron"));
            }
        }
    }
    if !x0.iter().all(|v| v.is_finite()) || !e_f_est.is_finite() {
        return Err(Error::invalid("non-finite initial state or disturbance"));
    }
    Ok(Ocp {
        model,
        cfg: *cfg,
        x0,
        reference,
        e_f: e_f_est.accel,
        gp,
    })
}

impl Ocp<'_> {
    pub fn n_state_vectors(&self) -> usize {
        self.cfg.horizon + 1
    }

    pub fn n_input_vectors(&self) -> usize {
        self.cfg.horizon
    }

    pub fn n_defects(&self) -> usize {
        self.cfg.horizon
    }

    /// Soft corridor rows: one per halfspace on states 1..=N.
    pub fn n_soft_rows(&self) -> usize {
        self.reference.polyhedra[1..]
            .iter()
            .map(|p| p.as_ref().map_or(0, |p| p.halfspaces.len()))
            .sum()
    }

    fn weights(&self, terminal: bool) -> DVector<f64> {
        let c = &self.cfg;
        let f = if terminal { c.terminal_factor } else { 1.0 };
        let blocks: &[(f64, usize)] = match self.model {
            OcpModel::Quadrotor(_) => &[
                (c.q_position, 3),
                (c.q_velocity, 3),
                (c.q_attitude, 3),
                (c.q_body_rate, 3),
            ],
            OcpModel::DoubleIntegrator => &[(c.q_position, 3), (c.q_velocity, 3)],
        };
        DVector::from_iterator(
            self.model.nr(),
            blocks.iter().flat_map(|&(w, n)| std::iter::repeat_n(w * f, n)),
        )
    }

    /// Linear residual map `r = C·x − e` at step `k`. The attitude block is
    /// the vector part of `q_ref* ⊗ q`, linear in `q`; the reference sign is
    /// chosen to agree with `x_hint`.
    fn residual_map(&self, k: usize, x_hint: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
        let nr = self.model.nr();
        let nx = self.model.nx();
        let mut c = DMatrix::zeros(nr, nx);
        let mut e = DVector::zeros(nr);
        for i in 0..6 {
            c[(i, i)] = 1.0;
        }
        e.rows_mut(0, 3).copy_from(&self.reference.position[k]);
        e.rows_mut(3, 3).copy_from(&self.reference.velocity[k]);
        if let OcpModel::Quadrotor(_) = self.model {
            let mut qr = self.reference.attitude[k];
            let qx = Quaternion::new(x_hint[6], x_hint[7], x_hint[8], x_hint[9]);
            if qr.coords.dot(&qx.coords) < 0.0 {
                qr = -qr;
            }
            let v0 = Vector3::new(qr.i, qr.j, qr.k);
            let w0 = qr.w;
            #[rustfmt::skip]
            let m = Matrix3x4::new(
                -v0.x, w0, v0.z, -v0.y,
                -v0.y, -v0.z, w0, v0.x,
                -v0.z, v0.y, -v0.x, w0,
            );
            c.view_mut((6, 6), (3, 4)).copy_from(&m);
            for i in 0..3 {
                c[(9 + i, 10 + i)] = 1.0;
            }
        }
        (c, e)
    }

    fn residuals(&self, xs: &[DVector<f64>]) -> Vec<Vector3<f64>> {
        xs.iter()
            .take(self.cfg.horizon)
            .map(|x| match (self.gp, self.model) {
                (Some(gp), OcpModel::Quadrotor(_)) => {
                    let q = Quaternion::new(x[6], x[7], x[8], x[9]);
                    let v = Vector3::new(x[3], x[4], x[5]);
                    rotate_unchecked(&q, &gp.predict_mean(&rotate_inverse_unchecked(&q, &v)))
                }
                (Some(gp), OcpModel::DoubleIntegrator) => {
                    gp.predict_mean(&Vector3::new(x[3], x[4], x[5]))
                }
                _ => Vector3::zeros(),
            })
            .collect()
    }

    /// Tracking cost plus the soft corridor penalty.
    pub fn cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        let n = self.cfg.horizon;
        let mut j = 0.0;
        for k in 1..=n {
            let (c, e) = self.residual_map(k, &xs[k]);
            let r = &c * &xs[k] - e;
            j += r.dot(&r.component_mul(&self.weights(k == n)));
            if let Some(poly) = &self.reference.polyhedra[k] {
                let p = Vector3::new(xs[k][0], xs[k][1], xs[k][2]);
                for (nv, d) in &poly.halfspaces {
                    j += self.cfg.soft_constraint_weight * (nv.dot(&p) - d).max(0.0).powi(2);
                }
            }
        }
        for (u, ur) in us.iter().zip(&self.reference.input) {
            j += self.cfg.r_input * (u - ur).norm_squared();
        }
        j
    }

    fn defects(&self, xs: &[DVector<f64>], us: &[DVector<f64>], res: &[Vector3<f64>]) -> Vec<DVector<f64>> {
        (0..self.cfg.horizon)
            .map(|k| self.model.step(&xs[k], &us[k], &self.e_f, &res[k], self.cfg.dt) - &xs[k + 1])
            .collect()
    }

    fn merit(&self, xs: &[DVector<f64>], us: &[DVector<f64>], res: &[Vector3<f64>]) -> f64 {
        let viol: f64 = self.defects(xs, us, res).iter().map(|d| d.lp_norm(1)).sum();
        self.cost(xs, us) + self.cfg.merit_penalty * viol
    }

    /// Cold-start guess: reference states with zero body rate and
    /// reference inputs.
    pub fn initial_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let nx = self.model.nx();
        let mut xs: Vec<DVector<f64>> = (0..=self.cfg.horizon)
            .map(|k| {
                let mut x = DVector::zeros(nx);
                x.rows_mut(0, 3).copy_from(&self.reference.position[k]);
                x.rows_mut(3, 3).copy_from(&self.reference.velocity[k]);
                if nx == STATE_DIM {
                    let q = self.reference.attitude[k];
                    x[6] = q.w;
                    x[7] = q.i;
                    x[8] = q.j;
                    x[9] = q.k;
                }
                x
            })
            .collect();
        xs[0] = self.x0.clone();
        (xs, self.reference.input.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    /// Model rollout of `inputs` from the initial state.
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub solve_time_ms: f64,
    /// Merit after each accepted iteration, starting with the initial guess.
    pub merit_history: Vec<f64>,
    pub cost: f64,
    /// Shooting states of the final iterate, used for warm starting.
    pub shooting_states: Vec<DVector<f64>>,
    /// Largest dynamics defect of the final iterate.
    pub max_defect: f64,
    /// ADMM iterations summed over the QP subproblems.
    pub qp_iterations: usize,
}

impl OcpSolution {
    pub fn quad_states(&self) -> Vec<QuadState> {
        self.states.iter().map(|x| QuadState::from_slice(x.as_slice())).collect()
    }

    pub fn rotor_inputs(&self) -> Vec<RotorInput> {
        self.inputs
            .iter()
            .map(|u| RotorInput::new([u[0], u[1], u[2], u[3]]))
            .collect()
    }

    /// Whether each accepted iteration kept the merit non-increasing.
    pub fn merit_monotone(&self) -> bool {
        self.merit_history
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()))
    }
}

/// Condensed QP in the input increments for the linearization around
/// `(xs, us)`, with the state increments `Δx_k = G_k·Δu + h_k`.
struct Condensed {
    qp: QpProblem,
    g_blocks: Vec<DMatrix<f64>>,
    h_blocks: Vec<DVector<f64>>,
}

fn condense(ocp: &Ocp, xs: &[DVector<f64>], us: &[DVector<f64>], res: &[Vector3<f64>]) -> Condensed {
    let n = ocp.cfg.horizon;
    let (nx, nu) = (ocp.model.nx(), ocp.model.nu());
    let nv = n * nu;
    let mut g_blocks = Vec::with_capacity(n + 1);
    let mut h_blocks = Vec::with_capacity(n + 1);
    g_blocks.push(DMatrix::zeros(nx, nv));
    h_blocks.push(&ocp.x0 - &xs[0]);
    for k in 0..n {
        let (a, b) = discrete_jacobians(&ocp.model, &xs[k], &us[k], &ocp.e_f, &res[k], ocp.cfg.dt);
        let d = ocp.model.step(&xs[k], &us[k], &ocp.e_f, &res[k], ocp.cfg.dt) - &xs[k + 1];
        let mut g = &a * &g_blocks[k];
        g.view_mut((0, k * nu), (nx, nu)).copy_from(&b);
        let h = &a * &h_blocks[k] + d;
        g_blocks.push(g);
        h_blocks.push(h);
    }

    let mut hess = DMatrix::zeros(nv, nv);
    let mut grad = DVector::zeros(nv);
    for k in 1..=n {
        let (c, e) = ocp.residual_map(k, &xs[k]);
        let w = ocp.weights(k == n);
        let jk = &c * &g_blocks[k];
        let ck = &c * (&xs[k] + &h_blocks[k]) - e;
        let wj = DMatrix::from_fn(jk.nrows(), nv, |i, j| w[i] * jk[(i, j)]);
        hess += jk.transpose() * &wj * 2.0;
        grad += wj.transpose() * &ck * 2.0;
    }
    for k in 0..n {
        for i in 0..nu {
            let j = k * nu + i;
            hess[(j, j)] += 2.0 * ocp.cfg.r_input;
            grad[j] += 2.0 * ocp.cfg.r_input * (us[k][i] - ocp.reference.input[k][i]);
        }
    }

    let (lo, hi) = match ocp.model {
        OcpModel::Quadrotor(_) => (ocp.cfg.u_min, ocp.cfg.u_max),
        OcpModel::DoubleIntegrator => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let flat_u = DVector::from_iterator(nv, us.iter().flat_map(|u| u.iter().copied()));
    let l = flat_u.map(|u| lo - u);
    let u = flat_u.map(|u| hi - u);

    let ns = ocp.n_soft_rows();
    let mut a_soft = DMatrix::zeros(ns, nv);
    let mut d_soft = DVector::zeros(ns);
    let mut row = 0;
    for k in 1..=n {
        if let Some(poly) = &ocp.reference.polyhedra[k] {
            let p = Vector3::new(
                xs[k][0] + h_blocks[k][0],
                xs[k][1] + h_blocks[k][1],
                xs[k][2] + h_blocks[k][2],
            );
            let gp = g_blocks[k].rows(0, 3);
            for (nvec, d) in &poly.halfspaces {
                a_soft.row_mut(row).copy_from(&(nvec.transpose() * gp));
                d_soft[row] = d - nvec.dot(&p);
                row += 1;
            }
        }
    }

    let qp = QpProblem::unconstrained(hess, grad)
        .with_ineq(DMatrix::identity(nv, nv), l, u)
        .with_soft(a_soft, d_soft, ocp.cfg.soft_constraint_weight);
    Condensed {
        qp,
        g_blocks,
        h_blocks,
    }
}

fn rollout(ocp: &Ocp, us: &[DVector<f64>], res: &[Vector3<f64>]) -> Vec<DVector<f64>> {
    let mut xs = Vec::with_capacity(us.len() + 1);
    xs.push(ocp.x0.clone());
    for (k, u) in us.iter().enumerate() {
        let next = ocp.model.step(&xs[k], u, &ocp.e_f, &res[k], ocp.cfg.dt);
        xs.push(next);
    }
    xs
}

/// Gauss-Newton SQP from the given (or cold) initial guess.
pub fn solve_sqp(
    ocp: &Ocp,
    guess: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
) -> Result<OcpSolution> {
    let start = Instant::now();
    let n = ocp.cfg.horizon;
    let nu = ocp.model.nu();
    let (mut xs, mut us) = match guess {
        Some((x, u)) if x.len() == n + 1 && u.len() == n => (x, u),
        _ => ocp.initial_guess(),
    };
    xs[0] = ocp.x0.clone();
    let settings = QpSettings {
        max_iter: ocp.cfg.qp_max_iter,
        eps_abs: 1e-6,
        eps_rel: 1e-6,
        ..Default::default()
    };

    let mut merit_history = Vec::new();
    let mut kkt = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut qp_iterations = 0;
    while iterations < ocp.cfg.sqp_max_iters {
        iterations += 1;
        let res = ocp.residuals(&xs);
        let merit0 = ocp.merit(&xs, &us, &res);
        if merit_history.is_empty() {
            merit_history.push(merit0);
        }
        let cond = condense(ocp, &xs, &us, &res);
        let sol = qp_solve(&cond.qp, &settings)?;
        qp_iterations += sol.iterations;
        if sol.status == QpStatus::PrimalInfeasible {
            return Err(Error::SolverFault("QP subproblem infeasible".into()));
        }
        let du = sol.x;
        let dxs: Vec<DVector<f64>> = (0..=n)
            .map(|k| &cond.g_blocks[k] * &du + &cond.h_blocks[k])
            .collect();
        let step_norm = du.amax().max(dxs.iter().map(|d| d.amax()).fold(0.0, f64::max));

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..8 {
            let trial_u: Vec<DVector<f64>> = (0..n)
                .map(|k| &us[k] + du.rows(k * nu, nu) * alpha)
                .collect();
            let trial_x: Vec<DVector<f64>> = (0..=n)
                .map(|k| {
                    let mut x = &xs[k] + &dxs[k] * alpha;
                    ocp.model.project(&mut x);
                    x
                })
                .collect();
            let m = ocp.merit(&trial_x, &trial_u, &ocp.residuals(&trial_x));
            if m <= merit0 {
                accepted = Some((trial_x, trial_u, m));
                break;
            }
            alpha *= 0.5;
        }
        let Some((tx, tu, m)) = accepted else {
            kkt = step_norm;
            converged = step_norm < ocp.cfg.kkt_tol;
            break;
        };
        debug_assert!(m <= merit0);
        xs = tx;
        us = tu;
        merit_history.push(m);
        let max_def = ocp
            .defects(&xs, &us, &ocp.residuals(&xs))
            .iter()
            .map(|d| d.amax())
            .fold(0.0, f64::max);
        kkt = step_norm.max(max_def);
        if kkt < ocp.cfg.kkt_tol {
            converged = true;
            break;
        }
    }

    let res = ocp.residuals(&xs);
    let max_defect = ocp
        .defects(&xs, &us, &res)
        .iter()
        .map(|d| d.amax())
        .fold(0.0, f64::max);
    let states = rollout(ocp, &us, &res);
    let cost = ocp.cost(&states, &us);
    Ok(OcpSolution {
        states,
        inputs: us,
        kkt_residual: kkt,
        iterations,
        converged,
        solve_time_ms: start.elapsed().as_secs_f64() * 1e3,
        merit_history,
        cost,
        shooting_states: xs,
        max_defect,
        qp_iterations,
    })
}

/// Receding-horizon controller holding the warm-start cache.
#[derive(Debug, Clone)]
pub struct Controller {
    pub cfg: OcpConfig,
    pub params: QuadParams,
    warm: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
    last: Option<OcpSolution>,
}

impl Controller {
    pub fn new(params: QuadParams, cfg: OcpConfig) -> Result<Self> {
        params.validate()?;
        cfg.validate()?;
        Ok(Self {
            cfg,
            params,
            warm: None,
            last: None,
        })
    }

    pub fn last_solution(&self) -> Option<&OcpSolution> {
        self.last.as_ref()
    }

    pub fn reset(&mut self) {
        self.warm = None;
        self.last = None;
    }

    /// Tracks `committed` from route time `t_route`; returns the first input.
    pub fn control_step(
        &mut self,
        x: &QuadState,
        committed: &Route,
        corridor: Option<&Corridor>,
        t_route: f64,
        e_f_est: &Disturbance,
        gp: Option<&GpModel>,
    ) -> Result<RotorInput> {
        if committed.nodes.is_empty() {
            return Err(Error::invalid("committed route is empty"));
        }
        let reference =
            Reference::from_route(committed, corridor, t_route, e_f_est, gp, &self.params, &self.cfg)?;
        let x0 = DVector::from_row_slice(&x.to_vector());
        let ocp = build_ocp(x0, reference, e_f_est, gp, OcpModel::Quadrotor(self.params), &self.cfg)?;
        let guess = self.warm.take().map(|(xs, us)| shift(xs, us));
        let sol = solve_sqp(&ocp, guess)?;
        let u = &sol.inputs[0];
        let out = RotorInput::new([u[0], u[1], u[2], u[3]]);
        self.warm = Some((sol.shooting_states.clone(), sol.inputs.clone()));
        self.last = Some(sol);
        Ok(out)
    }
}

fn shift(
    mut xs: Vec<DVector<f64>>,
    mut us: Vec<DVector<f64>>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    if xs.len() > 1 {
        xs.remove(0);
        xs.push(xs.last().expect("nonempty").clone());
    }
    if us.len() > 1 {
        us.remove(0);
        us.push(us.last().expect("nonempty").clone());
    }
    (xs, us)
}
