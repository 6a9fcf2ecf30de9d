//! Geometric attitude loop on SO(3).
//!
//! The reduced model treats the Euler-angle rate `η_u` as an input. The
//! [`AttitudeTracker`] turns that rate command into an attitude setpoint by
//! integrating it, and tracks the setpoint with a geometric PD law that
//! produces body torque.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    euler_rate_map_unchecked, rotation_matrix_unchecked, FullControl, FullState, ReducedControl,
    VehicleParams,
};
use crate::linalg::vee;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttitudeGains {
    pub k_r: f64,
    pub k_omega: f64,
}

impl Default for AttitudeGains {
    fn default() -> Self {
        Self {
            k_r: 9.0,
            k_omega: 0.45,
        }
    }
}

/// Attitude error `e_R = ½(R_dᵀR − RᵀR_d)^∨`.
pub fn attitude_error(r: &Matrix3<f64>, r_d: &Matrix3<f64>) -> Vector3<f64> {
    vee(&(r_d.transpose() * r - r.transpose() * r_d)) * 0.5
}

/// Geometric PD torque tracking `R_d(eta_des)` with desired body rate `omega_d`.
///
/// `τ_u = −k_R e_R − k_ω e_ω + ω × Jω`, `e_ω = ω − RᵀR_d ω_d`. Thrust is passed
/// through and both outputs are clamped to the actuator limits.
pub fn attitude_inner_loop(
    x: &FullState,
    f_u: f64,
    eta_des: &Vector3<f64>,
    omega_d: &Vector3<f64>,
    params: &VehicleParams,
    gains: &AttitudeGains,
) -> FullControl {
    let r = rotation_matrix_unchecked(&x.eta);
    let r_d = rotation_matrix_unchecked(eta_des);
    let e_r = attitude_error(&r, &r_d);
    let e_w = x.omega - r.transpose() * r_d * omega_d;
    let jw = params.inertia_matrix() * x.omega;
    let tau = -e_r * gains.k_r - e_w * gains.k_omega + x.omega.cross(&jw);
    FullControl {
        f_u: f_u.clamp(0.0, params.f_max),
        tau_u: tau.map(|t| t.clamp(-params.tau_max, params.tau_max)),
    }
}

/// Stateful wrapper that integrates the Euler-rate command into an attitude
/// setpoint and feeds the matching body rate forward.
#[derive(Clone, Debug)]
pub struct AttitudeTracker {
    setpoint: Vector3<f64>,
    gains: AttitudeGains,
}

/// Largest roll/pitch setpoint magnitude, rad.
const SETPOINT_TILT_LIMIT: f64 = 1.2;

impl AttitudeTracker {
    pub fn new(initial: Vector3<f64>, gains: AttitudeGains) -> Self {
        Self {
            setpoint: initial,
            gains,
        }
    }

    pub fn setpoint(&self) -> Vector3<f64> {
        self.setpoint
    }

    /// Advance the setpoint by one control period and return the torque command.
    pub fn step(
        &mut self,
        x: &FullState,
        cmd: &ReducedControl,
        dt: f64,
        params: &VehicleParams,
    ) -> FullControl {
        let rate = cmd
            .eta_u
            .map(|r| r.clamp(-params.euler_rate_max, params.euler_rate_max));
        let mut next = self.setpoint + rate * dt;
        next.x = next.x.clamp(-SETPOINT_TILT_LIMIT, SETPOINT_TILT_LIMIT);
        next.y = next.y.clamp(-SETPOINT_TILT_LIMIT, SETPOINT_TILT_LIMIT);
        next.z = crate::linalg::wrap_angle(next.z);
        self.setpoint = next;
        let omega_d = euler_rate_map_unchecked(&self.setpoint)
            .try_inverse()
            .map(|m| m * rate)
            .unwrap_or_else(Vector3::zeros);
        attitude_inner_loop(x, cmd.f_u, &self.setpoint, &omega_d, params, &self.gains)
    }

    /// Track a fixed attitude directly, bypassing the rate integration.
    pub fn hold(
        &mut self,
        x: &FullState,
        f_u: f64,
        eta_des: &Vector3<f64>,
        params: &VehicleParams,
    ) -> FullControl {
        self.setpoint = *eta_des;
        attitude_inner_loop(x, f_u, eta_des, &Vector3::zeros(), params, &self.gains)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate_step, rotation_matrix};

    #[test]
    fn zero_error_zero_torque() {
        let p = VehicleParams::default();
        let mut x = FullState::hover_at(Vector3::zeros());
        x.eta = Vector3::new(0.2, -0.1, 0.4);
        let u = attitude_inner_loop(
            &x,
            9.81,
            &x.eta,
            &Vector3::zeros(),
            &p,
            &AttitudeGains::default(),
        );
        assert!(u.tau_u.norm() < 1e-15);
        assert_eq!(u.f_u, 9.81);
    }

    #[test]
    fn small_pitch_error_matches_vee_formula() {
        let p = VehicleParams::default();
        let mut x = FullState::hover_at(Vector3::zeros());
        x.eta = Vector3::new(0.0, 0.1, 0.0);
        let gains = AttitudeGains {
            k_r: 1.0,
            k_omega: 0.0,
        };
        let u = attitude_inner_loop(&x, 9.81, &Vector3::zeros(), &Vector3::zeros(), &p, &gains);
        // R_y(0.1): ½(R − Rᵀ)^∨ = (0, sin 0.1, 0)
        assert!((u.tau_u.y + 0.1f64.sin()).abs() < 1e-12);
        assert!(u.tau_u.x.abs() < 1e-15 && u.tau_u.z.abs() < 1e-15);
    }

    #[test]
    fn attitude_step_settles_within_half_second() {
        let p = VehicleParams::default();
        let gains = AttitudeGains::default();
        let target = Vector3::new(0.2, -0.15, 0.3);
        let mut x = FullState::hover_at(Vector3::new(0.0, 0.0, 10.0));
        let r_d = rotation_matrix(&target).unwrap();
        let none = |_: &FullState, _: &FullControl| (Vector3::zeros(), Vector3::zeros());
        let mut t = 0.0;
        let mut u =
            attitude_inner_loop(&x, p.hover_thrust(), &target, &Vector3::zeros(), &p, &gains);
        for step in 0..500 {
            if step % 10 == 0 {
                u = attitude_inner_loop(
                    &x,
                    p.hover_thrust(),
                    &target,
                    &Vector3::zeros(),
                    &p,
                    &gains,
                );
            }
            x = integrate_step(&x, &u, none, 0.001, &p).unwrap();
            t += 0.001;
        }
        let e = attitude_error(&rotation_matrix(&x.eta).unwrap(), &r_d).norm();
        assert!(t > 0.499 && e < 0.01, "attitude error {e}");
    }
}
