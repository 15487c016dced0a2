//! Dense convex QP solver: ADMM operator splitting with adaptive step size,
//! infeasibility detection and active-set polishing.
//!
//! Solves
//!
//! ```text
//! min ½xᵀHx + gᵀx + w·Σ max(0, a_sᵀx − d_s)²
//! s.t. A_eq x = b_eq,  l ≤ A_in x ≤ u
//! ```
//!
//! The soft rows carry a one-sided quadratic penalty, handled through their
//! proximal operator so no slack variables are needed.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    pub a_soft: DMatrix<f64>,
    pub d_soft: DVector<f64>,
    pub w_soft: f64,
}

impl QpProblem {
    /// Problem with no constraints.
    pub fn unconstrained(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
            a_soft: DMatrix::zeros(0, n),
            d_soft: DVector::zeros(0),
            w_soft: 0.0,
        }
    }

    pub fn with_eq(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_ineq(mut self, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Self {
        self.a_in = a;
        self.l = l;
        self.u = u;
        self
    }

    pub fn with_soft(mut self, a: DMatrix<f64>, d: DVector<f64>, w: f64) -> Self {
        self.a_soft = a;
        self.d_soft = d;
        self.w_soft = w;
        self
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        let ok = self.h.nrows() == n
            && self.h.ncols() == n
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.l.len()
            && self.l.len() == self.u.len()
            && self.a_soft.ncols() == n
            && self.a_soft.nrows() == self.d_soft.len()
            && self.w_soft >= 0.0;
        if !ok {
            return Err(Error::invalid("QP dimensions do not match"));
        }
        if self.l.iter().zip(self.u.iter()).any(|(l, u)| l > u) {
            return Err(Error::invalid("QP bounds cross"));
        }
        Ok(())
    }

    /// Objective including the soft penalty.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let pen: f64 = (&self.a_soft * x - &self.d_soft)
            .iter()
            .map(|v| v.max(0.0).powi(2))
            .sum();
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x) + self.w_soft * pen
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_inf: f64,
    pub sigma: f64,
    pub rho: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            eps_abs: 1e-7,
            eps_rel: 1e-7,
            eps_inf: 1e-6,
            sigma: 1e-6,
            rho: 0.1,
            alpha: 1.6,
            adapt_interval: 25,
            polish: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    /// Polishing recovered the exact active-set solution.
    Polished,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y_eq: DVector<f64>,
    pub y_in: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum Row {
    Box(f64, f64),
    Soft(f64),
}

struct Stacked {
    a: DMatrix<f64>,
    rows: Vec<Row>,
    n_eq: usize,
    n_in: usize,
}

fn stack(p: &QpProblem) -> Stacked {
    let n = p.n();
    let (ne, ni, ns) = (p.a_eq.nrows(), p.a_in.nrows(), p.a_soft.nrows());
    let mut a = DMatrix::zeros(ne + ni + ns, n);
    let mut rows = Vec::with_capacity(ne + ni + ns);
    for i in 0..ne {
        a.row_mut(i).copy_from(&p.a_eq.row(i));
        rows.push(Row::Box(p.b_eq[i], p.b_eq[i]));
    }
    for i in 0..ni {
        a.row_mut(ne + i).copy_from(&p.a_in.row(i));
        rows.push(Row::Box(p.l[i], p.u[i]));
    }
    for i in 0..ns {
        a.row_mut(ne + ni + i).copy_from(&p.a_soft.row(i));
        rows.push(Row::Soft(p.d_soft[i]));
    }
    Stacked {
        a,
        rows,
        n_eq: ne,
        n_in: ni,
    }
}

fn row_rho(row: &Row, rho: f64) -> f64 {
    match row {
        Row::Box(l, u) if l == u => 1e3 * rho,
        Row::Box(l, u) if l.is_infinite() && u.is_infinite() => 1e-6,
        _ => rho,
    }
}

fn factor(
    p: &QpProblem,
    a: &DMatrix<f64>,
    rho_vec: &DVector<f64>,
    sigma: f64,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = p.n();
    let mut k = p.h.clone() + DMatrix::identity(n, n) * sigma;
    let scaled = DMatrix::from_fn(a.nrows(), n, |i, j| a[(i, j)] * rho_vec[i]);
    k += a.transpose() * scaled;
    nalgebra::Cholesky::new(k)
        .ok_or_else(|| Error::SolverFault("QP matrix is not positive definite".into()))
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn qp_solve(p: &QpProblem, s: &QpSettings) -> Result<QpSolution> {
    p.validate()?;
    let n = p.n();
    let st = stack(p);
    let m = st.rows.len();
    let a = &st.a;
    let at = a.transpose();
    let mut rho = s.rho;
    let mut rho_vec = DVector::from_iterator(m, st.rows.iter().map(|r| row_rho(r, rho)));
    let mut kkt = factor(p, a, &rho_vec, s.sigma)?;
    let mut x: DVector<f64> = DVector::zeros(n);
    let mut z: DVector<f64> = DVector::zeros(m);
    let mut y: DVector<f64> = DVector::zeros(m);
    let w = p.w_soft;
    let mut status = QpStatus::MaxIterations;
    let mut iterations = s.max_iter;
    for it in 1..=s.max_iter {
        let y_prev = y.clone();
        let mut rhs = &x * s.sigma - &p.g;
        let t = DVector::from_fn(m, |i, _| rho_vec[i] * z[i] - y[i]);
        rhs += &at * t;
        let x_t = kkt.solve(&rhs);
        let z_t = a * &x_t;
        x = &x_t * s.alpha + &x * (1.0 - s.alpha);
        for i in 0..m {
            let zr = s.alpha * z_t[i] + (1.0 - s.alpha) * z[i];
            let v = zr + y[i] / rho_vec[i];
            let zn = match st.rows[i] {
                Row::Box(l, u) => v.clamp(l, u),
                Row::Soft(d) => {
                    if v <= d {
                        v
                    } else {
                        (rho_vec[i] * v + 2.0 * w * d) / (rho_vec[i] + 2.0 * w)
                    }
                }
            };
            y[i] += rho_vec[i] * (zr - zn);
            z[i] = zn;
        }

        let ax = a * &x;
        let px = &p.h * &x;
        let aty = &at * &y;
        let r_prim = inf_norm(&(&ax - &z));
        let r_dual = inf_norm(&(&px + &p.g + &aty));
        let eps_prim = s.eps_abs + s.eps_rel * inf_norm(&ax).max(inf_norm(&z));
        let eps_dual =
            s.eps_abs + s.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&p.g));
        if r_prim <= eps_prim && r_dual <= eps_dual {
            status = QpStatus::Solved;
            iterations = it;
            break;
        }

        // primal infeasibility certificate from the dual increment
        let dy = &y - &y_prev;
        let ndy = inf_norm(&dy);
        if ndy > s.eps_inf {
            let at_dy = inf_norm(&(&at * &dy));
            let mut support = 0.0;
            let mut certificate = at_dy <= s.eps_inf * ndy;
            for i in 0..m {
                match st.rows[i] {
                    Row::Box(l, u) => {
                        let d = dy[i];
                        if d > 0.0 {
                            if u.is_infinite() {
                                certificate &= d <= s.eps_inf * ndy;
                            } else {
                                support += u * d;
                            }
                        } else if d < 0.0 {
                            if l.is_infinite() {
                                certificate &= -d <= s.eps_inf * ndy;
                            } else {
                                support += l * d;
                            }
                        }
                    }
                    Row::Soft(_) => certificate &= dy[i].abs() <= s.eps_inf * ndy,
                }
            }
            if certificate && support < -s.eps_inf * ndy {
                return Ok(QpSolution {
                    x,
                    y_eq: DVector::zeros(st.n_eq),
                    y_in: DVector::zeros(st.n_in),
                    status: QpStatus::PrimalInfeasible,
                    iterations: it,
                    objective: f64::NAN,
                });
            }
        }

        if s.adapt_interval > 0 && it % s.adapt_interval == 0 {
            let pn = r_prim / (inf_norm(&ax).max(inf_norm(&z)) + 1e-30);
            let dn = r_dual / (inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&p.g)) + 1e-30);
            let new_rho = (rho * (pn / (dn + 1e-30)).sqrt()).clamp(1e-6, 1e6);
            if new_rho > 5.0 * rho || new_rho < 0.2 * rho {
                rho = new_rho;
                rho_vec = DVector::from_iterator(m, st.rows.iter().map(|r| row_rho(r, rho)));
                kkt = factor(p, a, &rho_vec, s.sigma)?;
            }
        }
    }

    let mut sol = QpSolution {
        objective: p.objective(&x),
        y_eq: y.rows(0, st.n_eq).into_owned(),
        y_in: y.rows(st.n_eq, st.n_in).into_owned(),
        x,
        status,
        iterations,
    };
    if s.polish {
        if let Some(polished) = polish(p, &st, &sol, &z, &y) {
            sol = polished;
        }
    }
    Ok(sol)
}

/// Solves the equality-constrained problem on the guessed active set and
/// keeps it when it is consistent.
fn polish(
    p: &QpProblem,
    st: &Stacked,
    sol: &QpSolution,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<QpSolution> {
    let n = p.n();
    let ax = &st.a * &sol.x;
    let mut active: Vec<(usize, f64)> = Vec::new();
    let mut soft_on: Vec<usize> = Vec::new();
    for (i, row) in st.rows.iter().enumerate() {
        match *row {
            Row::Box(l, u) => {
                if l == u || z[i] - l < -y[i] {
                    active.push((i, l));
                } else if u - z[i] < y[i] {
                    active.push((i, u));
                }
            }
            Row::Soft(d) => {
                if ax[i] > d {
                    soft_on.push(i);
                }
            }
        }
    }
    let k = active.len();
    let mut h = p.h.clone();
    let mut g = p.g.clone();
    for &i in &soft_on {
        let Row::Soft(d) = st.rows[i] else { unreachable!() };
        let r = st.a.row(i);
        h += r.transpose() * r * (2.0 * p.w_soft);
        g -= r.transpose() * (2.0 * p.w_soft * d);
    }
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&g));
    for (j, &(i, b)) in active.iter().enumerate() {
        for c in 0..n {
            kkt[(n + j, c)] = st.a[(i, c)];
            kkt[(c, n + j)] = st.a[(i, c)];
        }
        rhs[n + j] = b;
    }
    let sol_kkt = kkt.lu().solve(&rhs)?;
    let x = sol_kkt.rows(0, n).into_owned();
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let tol = 1e-9 * (1.0 + inf_norm(&x));
    let ax = &st.a * &x;
    let mut yfull = DVector::zeros(st.rows.len());
    for (j, &(i, _)) in active.iter().enumerate() {
        yfull[i] = sol_kkt[n + j];
    }
    for (i, row) in st.rows.iter().enumerate() {
        match *row {
            Row::Box(l, u) => {
                if ax[i] < l - tol * 10.0 || ax[i] > u + tol * 10.0 {
                    return None;
                }
                if l != u {
                    let yi = yfull[i];
                    let at_lower = active.iter().any(|&(r, b)| r == i && b == l);
                    if (at_lower && yi > tol) || (!at_lower && yi < -tol) {
                        return None;
                    }
                }
            }
            Row::Soft(d) => {
                let on = soft_on.contains(&i);
                if (on && ax[i] < d - tol) || (!on && ax[i] > d + tol) {
                    return None;
                }
            }
        }
    }
    let objective = p.objective(&x);
    if objective > sol.objective + 1e-6 * (1.0 + sol.objective.abs()) {
        return None;
    }
    Some(QpSolution {
        y_eq: yfull.rows(0, st.n_eq).into_owned(),
        y_in: yfull.rows(st.n_eq, st.n_in).into_owned(),
        x,
        status: QpStatus::Polished,
        iterations: sol.iterations,
        objective,
    })
}

/// Exact solution by enumerating every active set of the hard rows; only
/// usable for a handful of inequality rows. `None` when the problem has soft
/// rows or no active set gives a feasible point.
pub fn qp_solve_enumerate(p: &QpProblem) -> Option<DVector<f64>> {
    if p.a_soft.nrows() > 0 {
        return None;
    }
    let n = p.n();
    let ne = p.a_eq.nrows();
    let ni = p.a_in.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    // each inequality: inactive, at lower or at upper
    let combos = 3usize.pow(ni as u32);
    for mut code in 0..combos {
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for i in 0..ne {
            rows.push((p.a_eq.row(i).transpose(), p.b_eq[i]));
        }
        for i in 0..ni {
            match code % 3 {
                1 => rows.push((p.a_in.row(i).transpose(), p.l[i])),
                2 => rows.push((p.a_in.row(i).transpose(), p.u[i])),
                _ => {}
            }
            code /= 3;
        }
        let k = rows.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&p.g));
        for (j, (a, b)) in rows.iter().enumerate() {
            for c in 0..n {
                kkt[(n + j, c)] = a[c];
                kkt[(c, n + j)] = a[c];
            }
            rhs[n + j] = *b;
        }
        let Some(s) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = s.rows(0, n).into_owned();
        let feasible = (&p.a_eq * &x - &p.b_eq).amax() < 1e-8
            && (0..ni).all(|i| {
                let v = p.a_in.row(i).dot(&x.transpose());
                v >= p.l[i] - 1e-8 && v <= p.u[i] + 1e-8
            });
        if !feasible {
            continue;
        }
        let f = p.objective(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.map(|(_, x)| x)
}

/// Random strictly convex instance with `ne` equality rows and `ni` two-sided
/// inequality rows; the feasible set always has an interior.
pub fn random_qp(seed: u64, n: usize, ne: usize, ni: usize) -> QpProblem {
    let mut rng = RngStream::new(seed, 31).rng();
    let mut r = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
    let m = DMatrix::from_fn(n, n, |_, _| r(1.0));
    let h = &m * m.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| r(3.0));
    let a_eq = DMatrix::from_fn(ne, n, |_, _| r(1.0));
    // equality rows pass through a point strictly inside the bounds
    let x_f = DVector::from_fn(n, |_, _| r(0.1 / n as f64));
    let b_eq = &a_eq * &x_f;
    let a_in = DMatrix::from_fn(ni, n, |_, _| r(1.0));
    let l = DVector::from_fn(ni, |_, _| -0.2 - r(0.5).abs());
    let u = DVector::from_fn(ni, |_, _| 0.2 + r(0.5).abs());
    QpProblem::unconstrained(h, g)
        .with_eq(a_eq, b_eq)
        .with_ineq(a_in, l, u)
}
