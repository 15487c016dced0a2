//! Rigid-body quadrotor dynamics, RK4 discretization and residual injection.

use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::quad::{
    quat_deriv_unchecked, rotate_unchecked, Disturbance, QuadParams, QuadState, RotorInput,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDeriv {
    pub d_position: Vector3<f64>,
    pub d_velocity: Vector3<f64>,
    /// `(w, x, y, z)` quaternion rate.
    pub d_attitude: Vector4<f64>,
    pub d_body_rate: Vector3<f64>,
}

/// Which velocity axes receive a learned residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualSelector {
    pub velocity_axes: [bool; 3],
}

impl Default for ResidualSelector {
    fn default() -> Self {
        Self {
            velocity_axes: [true; 3],
        }
    }
}

fn check_inputs(x: &QuadState, u: &RotorInput, e_f: &Disturbance) -> Result<()> {
    if !x.is_finite() || !e_f.is_finite() || u.thrusts.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("non-finite state, input or disturbance"));
    }
    Ok(())
}

/// Continuous-time derivative. The disturbance only enters the translational
/// dynamics.
pub fn continuous_deriv(
    x: &QuadState,
    u: &RotorInput,
    e_f: &Disturbance,
    params: &QuadParams,
) -> Result<StateDeriv> {
    check_inputs(x, u, e_f)?;
    Ok(deriv(x, u, &e_f.accel, params))
}

#[inline]
pub(crate) fn deriv(
    x: &QuadState,
    u: &RotorInput,
    ext_accel: &Vector3<f64>,
    params: &QuadParams,
) -> StateDeriv {
    let (collective, tau) = params.mix(u);
    let thrust_world = rotate_unchecked(&x.attitude, &Vector3::new(0.0, 0.0, collective));
    let d_velocity = params.gravity_vector() + thrust_world / params.mass + ext_accel;
    let j = Vector3::from(params.inertia);
    let w = x.body_rate;
    let jw = j.component_mul(&w);
    let d_body_rate = (tau - w.cross(&jw)).component_div(&j);
    StateDeriv {
        d_position: x.velocity,
        d_velocity,
        d_attitude: quat_deriv_unchecked(&x.attitude, &w),
        d_body_rate,
    }
}

fn advance(x: &QuadState, k: &StateDeriv, h: f64) -> QuadState {
    let mut q = x.attitude;
    q.coords += nalgebra::Vector4::new(k.d_attitude[1], k.d_attitude[2], k.d_attitude[3], k.d_attitude[0]) * h;
    QuadState {
        position: x.position + k.d_position * h,
        velocity: x.velocity + k.d_velocity * h,
        attitude: q,
        body_rate: x.body_rate + k.d_body_rate * h,
    }
}

/// Classical RK4 step of an arbitrary state-dependent derivative, with the
/// attitude renormalized afterwards.
pub fn rk4_with<F>(x: &QuadState, dt: f64, mut f: F) -> QuadState
where
    F: FnMut(&QuadState) -> StateDeriv,
{
    let k1 = f(x);
    let k2 = f(&advance(x, &k1, 0.5 * dt));
    let k3 = f(&advance(x, &k2, 0.5 * dt));
    let k4 = f(&advance(x, &k3, dt));
    let sum = StateDeriv {
        d_position: k1.d_position + 2.0 * k2.d_position + 2.0 * k3.d_position + k4.d_position,
        d_velocity: k1.d_velocity + 2.0 * k2.d_velocity + 2.0 * k3.d_velocity + k4.d_velocity,
        d_attitude: k1.d_attitude + 2.0 * k2.d_attitude + 2.0 * k3.d_attitude + k4.d_attitude,
        d_body_rate: k1.d_body_rate + 2.0 * k2.d_body_rate + 2.0 * k3.d_body_rate + k4.d_body_rate,
    };
    advance(x, &sum, dt / 6.0).normalized()
}

/// One RK4 step with zero-order-hold input and disturbance.
pub fn rk4_step(
    x: &QuadState,
    u: &RotorInput,
    e_f: &Disturbance,
    dt: f64,
    params: &QuadParams,
) -> Result<QuadState> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    check_inputs(x, u, e_f)?;
    Ok(rk4_unchecked(x, u, &e_f.accel, dt, params))
}

#[inline]
pub(crate) fn rk4_unchecked(
    x: &QuadState,
    u: &RotorInput,
    ext_accel: &Vector3<f64>,
    dt: f64,
    params: &QuadParams,
) -> QuadState {
    rk4_with(x, dt, |s| deriv(s, u, ext_accel, params))
}

/// Discrete model: RK4 step plus a residual acceleration (world frame) on the
/// selected axes, applied after the step as a constant-acceleration increment
/// (`residual·dt` on velocity, `½·residual·dt²` on position).
pub fn discrete_model(
    x: &QuadState,
    u: &RotorInput,
    e_f: &Disturbance,
    residual: Option<&Vector3<f64>>,
    selector: &ResidualSelector,
    dt: f64,
    params: &QuadParams,
) -> Result<QuadState> {
    let mut next = rk4_step(x, u, e_f, dt, params)?;
    if let Some(r) = residual {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite residual"));
        }
        apply_residual(&mut next, r, selector, dt);
    }
    Ok(next)
}

#[inline]
pub(crate) fn apply_residual(
    next: &mut QuadState,
    residual: &Vector3<f64>,
    selector: &ResidualSelector,
    dt: f64,
) {
    for a in 0..3 {
        if selector.velocity_axes[a] {
            next.velocity[a] += residual[a] * dt;
            next.position[a] += 0.5 * residual[a] * dt * dt;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Quaternion;
    use proptest::prelude::*;

    fn p() -> QuadParams {
        QuadParams::default()
    }

    fn state_diff(a: &QuadState, b: &QuadState) -> f64 {
        a.to_vector()
            .iter()
            .zip(b.to_vector().iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn hover_is_equilibrium() {
        let x = QuadState::at_rest(Vector3::new(1.0, 2.0, 3.0));
        let d = continuous_deriv(&x, &RotorInput::hover(&p()), &Disturbance::zero(), &p()).unwrap();
        assert_relative_eq!(d.d_velocity.norm(), 0.0, epsilon = 1e-12);
        assert_eq!(d.d_position, Vector3::zeros());
        assert_eq!(d.d_attitude, Vector4::zeros());
        assert_relative_eq!(d.d_body_rate.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn free_fall_derivative() {
        let x = QuadState::default();
        let d = continuous_deriv(&x, &RotorInput::uniform(0.0), &Disturbance::zero(), &p()).unwrap();
        assert_eq!(d.d_velocity, Vector3::new(0.0, 0.0, -9.81));
    }

    #[test]
    fn disturbance_passes_through() {
        let x = QuadState::default();
        let d = continuous_deriv(&x, &RotorInput::hover(&p()), &Disturbance::new(0.0, 2.0, 0.0), &p())
            .unwrap();
        assert_relative_eq!(d.d_velocity, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(d.d_body_rate.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = QuadState::default();
        x.velocity.x = f64::NAN;
        assert!(continuous_deriv(&x, &RotorInput::hover(&p()), &Disturbance::zero(), &p()).is_err());
        assert!(rk4_step(&QuadState::default(), &RotorInput::hover(&p()), &Disturbance::zero(), 0.0, &p()).is_err());
    }

    #[test]
    fn hover_step_keeps_state() {
        let x = QuadState::at_rest(Vector3::new(0.5, -1.0, 2.0));
        let n = rk4_step(&x, &RotorInput::hover(&p()), &Disturbance::zero(), 0.05, &p()).unwrap();
        assert!(state_diff(&x, &n) <= 1e-12);
    }

    #[test]
    fn free_fall_step_is_ballistic() {
        let x = QuadState::default();
        let n = rk4_step(&x, &RotorInput::uniform(0.0), &Disturbance::zero(), 0.05, &p()).unwrap();
        assert_relative_eq!(n.velocity.z, -0.4905, epsilon = 1e-12);
        assert_relative_eq!(n.position.z, -0.0122625, epsilon = 1e-12);
    }

    #[test]
    fn pure_yaw_rate_matches_exponential() {
        let mut x = QuadState::default();
        x.body_rate = Vector3::new(0.0, 0.0, 1.0);
        // no torque: equal thrusts, yaw rate stays constant (J diagonal, ω ∥ z)
        let n = rk4_step(&x, &RotorInput::hover(&p()), &Disturbance::zero(), 0.05, &p()).unwrap();
        let expect = Quaternion::new((0.025f64).cos(), 0.0, 0.0, (0.025f64).sin());
        assert_relative_eq!(n.attitude.coords, expect.coords, epsilon = 1e-8);
    }

    #[test]
    fn absent_residual_equals_rk4() {
        let mut x = QuadState::at_rest(Vector3::new(1.0, 1.0, 1.0));
        x.velocity = Vector3::new(0.4, -0.2, 0.1);
        let u = RotorInput::new([2.0, 2.6, 2.4, 2.5]);
        let e = Disturbance::new(0.0, 2.0, 0.0);
        let a = rk4_step(&x, &u, &e, 0.05, &p()).unwrap();
        let b = discrete_model(&x, &u, &e, None, &ResidualSelector::default(), 0.05, &p()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn residual_adds_velocity_increment() {
        let x = QuadState::default();
        let u = RotorInput::hover(&p());
        let a = rk4_step(&x, &u, &Disturbance::zero(), 0.05, &p()).unwrap();
        let r = Vector3::new(0.0, 1.0, 0.0);
        let b = discrete_model(&x, &u, &Disturbance::zero(), Some(&r), &ResidualSelector::default(), 0.05, &p())
            .unwrap();
        assert_relative_eq!(b.velocity.y - a.velocity.y, 0.05, epsilon = 1e-15);
        assert_relative_eq!(b.position.y - a.position.y, 0.5 * 0.05 * 0.05, epsilon = 1e-15);
    }

    #[test]
    fn residual_cancelling_disturbance() {
        let x = QuadState::default();
        let u = RotorInput::hover(&p());
        let e = Disturbance::new(0.3, 2.0, -0.5);
        let plain = rk4_step(&x, &u, &Disturbance::zero(), 0.05, &p()).unwrap();
        let r = -e.accel;
        let cancelled =
            discrete_model(&x, &u, &e, Some(&r), &ResidualSelector::default(), 0.05, &p()).unwrap();
        assert!(state_diff(&cancelled, &plain) <= 1e-6);
    }

    #[test]
    fn selector_masks_axes() {
        let x = QuadState::default();
        let u = RotorInput::hover(&p());
        let sel = ResidualSelector {
            velocity_axes: [false, true, false],
        };
        let r = Vector3::new(1.0, 1.0, 1.0);
        let n = discrete_model(&x, &u, &Disturbance::zero(), Some(&r), &sel, 0.1, &p()).unwrap();
        assert_relative_eq!(n.velocity, Vector3::new(0.0, 0.1, 0.0), epsilon = 1e-12);
    }

    fn aggressive_state(seed: u64) -> (QuadState, RotorInput) {
        use rand::Rng;
        let mut rng = crate::rng::RngStream::new(seed, 3).rng();
        let mut r = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
        let x = QuadState {
            position: Vector3::new(r(1.0), r(1.0), r(1.0)),
            velocity: Vector3::new(r(2.0), r(2.0), r(2.0)),
            attitude: Quaternion::new(1.0, r(0.4), r(0.4), r(0.4)).normalize(),
            body_rate: Vector3::new(r(3.0), r(3.0), r(3.0)),
        };
        let u = RotorInput::new([2.5 + r(0.3), 2.5 + r(0.3), 2.5 + r(0.3), 2.5 + r(0.3)]);
        (x, u)
    }

    fn integrate(x: &QuadState, u: &RotorInput, e: &Disturbance, h: f64, steps: usize) -> QuadState {
        let mut s = *x;
        for _ in 0..steps {
            s = rk4_step(&s, u, e, h, &p()).unwrap();
        }
        s
    }

    #[test]
    fn rk4_is_fourth_order() {
        // error over a fixed horizon against a 10× sub-stepped reference
        let e = Disturbance::new(0.2, -0.4, 0.1);
        let horizon = 0.4;
        for seed in 0..8 {
            let (x, u) = aggressive_state(seed);
            let err = |dt: f64| {
                let n = (horizon / dt).round() as usize;
                let coarse = integrate(&x, &u, &e, dt, n);
                let fine = integrate(&x, &u, &e, dt / 10.0, n * 10);
                state_diff(&coarse, &fine)
            };
            let ratio = err(0.05) / err(0.025);
            assert!((12.0..=20.0).contains(&ratio), "seed {seed}: ratio {ratio}");
        }
    }

    #[test]
    fn deriv_affine_in_disturbance() {
        let (x, u) = aggressive_state(11);
        let h = 1e-3;
        for axis in 0..3 {
            let mut e1 = Disturbance::new(0.1, 0.2, 0.3);
            let d0 = continuous_deriv(&x, &u, &e1, &p()).unwrap();
            e1.accel[axis] += h;
            let d1 = continuous_deriv(&x, &u, &e1, &p()).unwrap();
            let fd = (d1.d_velocity - d0.d_velocity) / h;
            let mut unit = Vector3::zeros();
            unit[axis] = 1.0;
            assert_relative_eq!(fd, unit, epsilon = 1e-9);
            assert_eq!(d0.d_body_rate, d1.d_body_rate);
            assert_eq!(d0.d_attitude, d1.d_attitude);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attitude_stays_unit(seed in 0u64..10_000) {
            let (x, u) = aggressive_state(seed);
            let mut s = x;
            for _ in 0..40 {
                s = rk4_step(&s, &u, &Disturbance::zero(), 0.05, &p()).unwrap();
                prop_assert!((s.attitude.norm() - 1.0).abs() <= 1e-9);
            }
        }

        #[test]
        fn translation_invariance(seed in 0u64..10_000, dx in -5.0f64..5.0, dy in -5.0f64..5.0) {
            let (x, u) = aggressive_state(seed);
            let mut shifted = x;
            shifted.position += Vector3::new(dx, dy, 0.0);
            let e = Disturbance::new(0.0, 2.0, 0.0);
            let (mut a, mut b) = (x, shifted);
            for _ in 0..10 {
                a = rk4_step(&a, &u, &e, 0.05, &p()).unwrap();
                b = rk4_step(&b, &u, &e, 0.05, &p()).unwrap();
                prop_assert!((a.velocity - b.velocity).norm() <= 1e-12);
                prop_assert!((a.attitude.coords - b.attitude.coords).norm() <= 1e-12);
                prop_assert!((a.body_rate - b.body_rate).norm() <= 1e-12);
                prop_assert!((b.position - a.position - Vector3::new(dx, dy, 0.0)).norm() <= 1e-9);
            }
        }
    }
}
