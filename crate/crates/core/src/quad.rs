//! Shared quadrotor types and quaternion algebra.
//!
//! Quaternions are stored as nalgebra [`Quaternion`]s and always exchanged in
//! `(w, x, y, z)` order when flattened into vectors.

use nalgebra::{Matrix3, Quaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Airframe constants and kinematic limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// Diagonal of the inertia tensor, kg·m².
    pub inertia: [f64; 3],
    /// m/s², acting along world −z.
    pub gravity: f64,
    /// Rotor distance from the body center, m.
    pub arm_length: f64,
    /// Yaw moment per unit rotor thrust, m.
    pub thrust_to_torque: f64,
    /// Maximum thrust of a single rotor, N.
    pub rotor_thrust_max: f64,
    pub v_max: f64,
    pub a_max: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            inertia: [0.01, 0.01, 0.02],
            gravity: 9.81,
            arm_length: 0.17,
            thrust_to_torque: 0.016,
            rotor_thrust_max: 5.0,
            v_max: 3.0,
            a_max: 2.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(Error::invalid("mass must be positive"));
        }
        if self.inertia.iter().any(|&j| !(j > 0.0)) {
            return Err(Error::invalid("inertia diagonal must be positive"));
        }
        if !(self.v_max > 0.0) || !(self.a_max > 0.0) {
            return Err(Error::invalid("v_max and a_max must be positive"));
        }
        if !(self.arm_length > 0.0) || !self.thrust_to_torque.is_finite() {
            return Err(Error::invalid("arm_length must be positive"));
        }
        if !(4.0 * self.rotor_thrust_max > self.mass * self.gravity) {
            return Err(Error::invalid("rotors cannot lift the airframe"));
        }
        Ok(())
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    /// Per-rotor thrust that balances gravity when shared equally.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity / 4.0
    }

    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }

    /// X-configuration mixer: rotor thrusts to (collective thrust, body torque).
    ///
    /// Rotors sit at 45°, 135°, 225° and 315° around body z; rotors 0 and 2
    /// spin counter-clockwise.
    pub fn mix(&self, u: &RotorInput) -> (f64, Vector3<f64>) {
        let d = self.arm_length / std::f64::consts::SQRT_2;
        let t = &u.thrusts;
        let collective = t.iter().sum();
        let tau = Vector3::new(
            d * (t[0] + t[1] - t[2] - t[3]),
            d * (-t[0] + t[1] + t[2] - t[3]),
            self.thrust_to_torque * (t[0] - t[1] + t[2] - t[3]),
        );
        (collective, tau)
    }
}

/// Full rigid-body state: world position/velocity, world←body attitude, body rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Quaternion<f64>,
    pub body_rate: Vector3<f64>,
}

impl Default for QuadState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl QuadState {
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: Quaternion::identity(),
            body_rate: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.body_rate.iter().all(|v| v.is_finite())
    }

    /// Flattened `[p, v, q(w,x,y,z), ω]`.
    pub fn to_vector(&self) -> [f64; 13] {
        let q = wxyz(&self.attitude);
        let p = &self.position;
        let v = &self.velocity;
        let w = &self.body_rate;
        [
            p.x, p.y, p.z, v.x, v.y, v.z, q[0], q[1], q[2], q[3], w.x, w.y, w.z,
        ]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            position: Vector3::new(s[0], s[1], s[2]),
            velocity: Vector3::new(s[3], s[4], s[5]),
            attitude: Quaternion::new(s[6], s[7], s[8], s[9]),
            body_rate: Vector3::new(s[10], s[11], s[12]),
        }
    }

    pub fn normalized(mut self) -> Self {
        self.attitude = self.attitude.normalize();
        self
    }
}

pub const STATE_DIM: usize = 13;
pub const INPUT_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotorInput {
    pub thrusts: [f64; 4],
}

impl RotorInput {
    pub fn new(thrusts: [f64; 4]) -> Self {
        Self { thrusts }
    }

    pub fn uniform(t: f64) -> Self {
        Self { thrusts: [t; 4] }
    }

    pub fn hover(params: &QuadParams) -> Self {
        Self::uniform(params.hover_thrust())
    }

    pub fn clamped(mut self, params: &QuadParams) -> Self {
        for t in &mut self.thrusts {
            *t = t.clamp(0.0, params.rotor_thrust_max);
        }
        self
    }

    pub fn within_bounds(&self, params: &QuadParams) -> bool {
        self.thrusts
            .iter()
            .all(|&t| (0.0..=params.rotor_thrust_max).contains(&t))
    }
}

/// Mass-normalized external force (m/s², world frame).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Disturbance {
    pub accel: Vector3<f64>,
}

impl Disturbance {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self {
            accel: Vector3::new(x, y, z),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.accel.iter().all(|v| v.is_finite())
    }
}

impl From<Vector3<f64>> for Disturbance {
    fn from(accel: Vector3<f64>) -> Self {
        Self { accel }
    }
}

pub fn wxyz(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Rotates `v` by the unit quaternion `q`.
pub fn quat_rotate(q: &Quaternion<f64>, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !q.coords.iter().chain(v.iter()).all(|x| x.is_finite()) {
        return Err(Error::invalid("non-finite quaternion or vector"));
    }
    Ok(rotate_unchecked(q, v))
}

#[inline]
pub(crate) fn rotate_unchecked(q: &Quaternion<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let u = Vector3::new(q.i, q.j, q.k);
    let t = 2.0 * u.cross(v);
    v + q.w * t + u.cross(&t)
}

#[inline]
pub(crate) fn rotate_inverse_unchecked(q: &Quaternion<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    rotate_unchecked(&q.conjugate(), v)
}

/// Quaternion time derivative `½·q ⊗ (0, ω)` for a body-frame rate, `(w, x, y, z)`.
pub fn quat_deriv(q: &Quaternion<f64>, omega: &Vector3<f64>) -> Result<Vector4<f64>> {
    if !q.coords.iter().chain(omega.iter()).all(|x| x.is_finite()) {
        return Err(Error::invalid("non-finite quaternion or rate"));
    }
    Ok(quat_deriv_unchecked(q, omega))
}

#[inline]
pub(crate) fn quat_deriv_unchecked(q: &Quaternion<f64>, omega: &Vector3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    let (p, r, s) = (omega.x, omega.y, omega.z);
    0.5 * Vector4::new(
        -x * p - y * r - z * s,
        w * p + y * s - z * r,
        w * r - x * s + z * p,
        w * s + x * r - y * p,
    )
}

/// Attitude whose body z axis points along `thrust_dir` with zero heading.
pub fn attitude_from_thrust_direction(thrust_dir: &Vector3<f64>, yaw: f64) -> Quaternion<f64> {
    let n = thrust_dir.norm();
    if !(n > 1e-9) {
        return yaw_quaternion(yaw);
    }
    let zb = thrust_dir / n;
    let xc = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let yb_raw = zb.cross(&xc);
    let yb = if yb_raw.norm() > 1e-9 {
        yb_raw.normalize()
    } else {
        Vector3::y()
    };
    let xb = yb.cross(&zb);
    let rot = nalgebra::Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[xb, yb, zb]));
    let q = *nalgebra::UnitQuaternion::from_rotation_matrix(&rot).quaternion();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

pub fn yaw_quaternion(yaw: f64) -> Quaternion<f64> {
    Quaternion::new((0.5 * yaw).cos(), 0.0, 0.0, (0.5 * yaw).sin())
}
