//! Rigid-body quadrotor model.
//!
//! Two views of the same vehicle are used throughout the crate:
//!
//! * the full 12-state model `(p, v, η, ω)` driven by collective thrust and
//!   body torque, which is what the simulator integrates, and
//! * the reduced 9-state position model `(p, v, η)` driven by thrust and an
//!   Euler-rate command, which is what the planner and the contraction
//!   controller reason about.
//!
//! Euler angles follow the ZYX (yaw–pitch–roll) convention,
//! `R = R_z(ψ) R_y(θ) R_x(φ)`, with roll and pitch restricted to
//! `(−π/2, π/2)` and yaw to `[−π, π]`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, SVector, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{wrap_angle, Mat9, Mat94, Vec4, Vec9};

pub type Vec12 = SVector<f64, 12>;

/// Condition threshold on `cos θ` below which the Euler-rate map is treated as singular.
const EULER_SINGULAR_COS: f64 = 1e-6;
const DIVERGENCE_LIMIT: f64 = 1e6;
/// Largest admissible simulation step.
pub const MAX_SIM_DT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub eta: Vector3<f64>,
    pub omega: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub eta: Vector3<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullControl {
    pub f_u: f64,
    pub tau_u: Vector3<f64>,
}

/// Input of the reduced model: collective thrust and the Euler-angle rate
/// command that drives the attitude rows (`η̇ = η_u`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedControl {
    pub f_u: f64,
    pub eta_u: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    /// kg
    pub mass: f64,
    /// kg·m², row-major
    pub inertia: [[f64; 3]; 3],
    /// m/s²
    pub gravity: f64,
    /// m
    pub rotor_radius: f64,
    /// Largest collective thrust, N.
    pub f_max: f64,
    /// Largest magnitude of each body torque component, N·m.
    pub tau_max: f64,
    /// Largest magnitude of each Euler-rate command component, rad/s.
    pub euler_rate_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        let mass = 1.0;
        let gravity = 9.81;
        Self {
            mass,
            inertia: [[0.01, 0.0, 0.0], [0.0, 0.01, 0.0], [0.0, 0.0, 0.02]],
            gravity,
            rotor_radius: 0.12,
            f_max: 4.0 * mass * gravity,
            tau_max: 0.5,
            euler_rate_max: 2.0,
        }
    }
}

impl VehicleParams {
    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        let j = &self.inertia;
        Matrix3::new(
            j[0][0], j[0][1], j[0][2], j[1][0], j[1][1], j[1][2], j[2][0], j[2][1], j[2][2],
        )
    }

    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.inertia_matrix();
        let symmetric = (j - j.transpose()).abs().max() <= 1e-12 * j.abs().max().max(1.0);
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(Error::invalid("vehicle mass must be positive"));
        }
        if !symmetric || j.cholesky().is_none() {
            return Err(Error::invalid(
                "inertia must be symmetric positive definite",
            ));
        }
        if !(self.gravity > 0.0) || !(self.rotor_radius > 0.0) {
            return Err(Error::invalid("gravity and rotor radius must be positive"));
        }
        if !(self.f_max > 0.0) || !(self.tau_max > 0.0) || !(self.euler_rate_max > 0.0) {
            return Err(Error::invalid("actuator limits must be positive"));
        }
        Ok(())
    }
}

impl FullState {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            eta: Vector3::zeros(),
            omega: Vector3::zeros(),
        }
    }

    pub fn reduced(&self) -> ReducedState {
        ReducedState {
            p: self.p,
            v: self.v,
            eta: self.eta,
        }
    }

    pub fn to_vector(&self) -> Vec12 {
        let mut out = Vec12::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.eta);
        out.fixed_rows_mut::<3>(9).copy_from(&self.omega);
        out
    }

    pub fn from_vector(x: &Vec12) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            eta: x.fixed_rows::<3>(6).into(),
            omega: x.fixed_rows::<3>(9).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

impl ReducedState {
    pub fn hover_at(p: Vector3<f64>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            eta: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> Vec9 {
        let mut out = Vec9::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&self.p);
        out.fixed_rows_mut::<3>(3).copy_from(&self.v);
        out.fixed_rows_mut::<3>(6).copy_from(&self.eta);
        out
    }

    pub fn from_vector(x: &Vec9) -> Self {
        Self {
            p: x.fixed_rows::<3>(0).into(),
            v: x.fixed_rows::<3>(3).into(),
            eta: x.fixed_rows::<3>(6).into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }

    /// `self − other` with the angle components wrapped to (−π, π].
    pub fn error_from(&self, other: &ReducedState) -> Vec9 {
        let mut e = self.to_vector() - other.to_vector();
        for i in 6..9 {
            e[i] = wrap_angle(e[i]);
        }
        e
    }
}

impl ReducedControl {
    pub fn hover(params: &VehicleParams) -> Self {
        Self {
            f_u: params.hover_thrust(),
            eta_u: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> Vec4 {
        Vector4::new(self.f_u, self.eta_u.x, self.eta_u.y, self.eta_u.z)
    }

    pub fn from_vector(u: &Vec4) -> Self {
        Self {
            f_u: u[0],
            eta_u: Vector3::new(u[1], u[2], u[3]),
        }
    }
}

pub fn check_euler_box(eta: &Vector3<f64>) -> Result<()> {
    let ok = eta.iter().all(|a| a.is_finite())
        && eta.x.abs() < FRAC_PI_2
        && eta.y.abs() < FRAC_PI_2
        && eta.z.abs() <= PI;
    if ok {
        Ok(())
    } else {
        Err(Error::EulerDomain(*eta))
    }
}

/// Body-to-inertial rotation, `R_z(ψ) R_y(θ) R_x(φ)`.
pub fn rotation_matrix(eta: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_euler_box(eta)?;
    Ok(rotation_matrix_unchecked(eta))
}

pub(crate) fn rotation_matrix_unchecked(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    Matrix3::new(
        cp * ct,
        cp * st * sf - sp * cf,
        cp * st * cf + sp * sf,
        sp * ct,
        sp * st * sf + cp * cf,
        sp * st * cf - cp * sf,
        -st,
        ct * sf,
        ct * cf,
    )
}

/// Thrust axis `r₃(η) = R(η) e₃`.
pub fn thrust_axis(eta: &Vector3<f64>) -> Vector3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    Vector3::new(cp * st * cf + sp * sf, sp * st * cf - cp * sf, ct * cf)
}

/// `∂r₃/∂η`; column `j` is the derivative with respect to `η_j`.
pub fn thrust_axis_jacobian(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    Matrix3::new(
        -cp * st * sf + sp * cf,
        cp * ct * cf,
        -sp * st * cf + cp * sf,
        -sp * st * sf - cp * cf,
        sp * ct * cf,
        cp * st * cf + sp * sf,
        -ct * sf,
        -st * cf,
        0.0,
    )
}

/// Second derivatives of each component of `r₃`: `out[i][(l, j)] = ∂²r₃ᵢ/∂η_l∂η_j`.
pub fn thrust_axis_hessians(eta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let (sp, cp) = eta.z.sin_cos();
    let a = cp * st * cf + sp * sf;
    let b = sp * st * cf - cp * sf;

    let a_ft = -cp * ct * sf;
    let a_fp = sp * st * sf + cp * cf;
    let a_tt = -cp * st * cf;
    let a_tp = -sp * ct * cf;
    let ha = Matrix3::new(-a, a_ft, a_fp, a_ft, a_tt, a_tp, a_fp, a_tp, -a);

    let b_ft = -sp * ct * sf;
    let b_fp = -cp * st * sf + sp * cf;
    let b_tt = -sp * st * cf;
    let b_tp = cp * ct * cf;
    let hb = Matrix3::new(-b, b_ft, b_fp, b_ft, b_tt, b_tp, b_fp, b_tp, -b);

    let c_ff = -ct * cf;
    let c_ft = st * sf;
    let hc = Matrix3::new(c_ff, c_ft, 0.0, c_ft, c_ff, 0.0, 0.0, 0.0, 0.0);

    [ha, hb, hc]
}

/// Map from body angular velocity to Euler-angle rates, `η̇ = R_T(η) ω`.
pub fn euler_rate_map(eta: &Vector3<f64>) -> Result<Matrix3<f64>> {
    check_euler_box(eta)?;
    let ct = eta.y.cos();
    if ct.abs() < EULER_SINGULAR_COS {
        return Err(Error::EulerSingular { pitch: eta.y });
    }
    Ok(euler_rate_map_unchecked(eta))
}

pub(crate) fn euler_rate_map_unchecked(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (sf, cf) = eta.x.sin_cos();
    let (st, ct) = eta.y.sin_cos();
    let tt = st / ct;
    Matrix3::new(1.0, sf * tt, cf * tt, 0.0, cf, -sf, 0.0, sf / ct, cf / ct)
}

fn full_derivative_unchecked(
    x: &FullState,
    u: &FullControl,
    f_dist: &Vector3<f64>,
    tau_dist: &Vector3<f64>,
    params: &VehicleParams,
) -> FullState {
    let r = rotation_matrix_unchecked(&x.eta);
    let j = params.inertia_matrix();
    let thrust = r * Vector3::new(0.0, 0.0, u.f_u);
    let v_dot = (thrust + f_dist) / params.mass - Vector3::new(0.0, 0.0, params.gravity);
    let eta_dot = euler_rate_map_unchecked(&x.eta) * x.omega;
    let jw = j * x.omega;
    let rhs = jw.cross(&x.omega) + tau_dist + u.tau_u;
    let omega_dot = j.cholesky().map(|c| c.solve(&rhs)).unwrap_or(rhs);
    FullState {
        p: x.v,
        v: v_dot,
        eta: eta_dot,
        omega: omega_dot,
    }
}

/// Time derivative of the full state, returned in state layout.
///
/// `ṗ = v`, `m v̇ = R(η) f_T + f_dist − m g e₃`, `η̇ = R_T(η) ω`,
/// `J ω̇ = Jω × ω + τ_dist + τ_u`.
pub fn full_derivative(
    x: &FullState,
    u: &FullControl,
    f_dist: &Vector3<f64>,
    tau_dist: &Vector3<f64>,
    params: &VehicleParams,
) -> Result<FullState> {
    if !x.is_finite() || !u.f_u.is_finite() || !u.tau_u.iter().all(|t| t.is_finite()) {
        return Err(Error::invalid("non-finite state or control"));
    }
    euler_rate_map(&x.eta)?;
    Ok(full_derivative_unchecked(x, u, f_dist, tau_dist, params))
}

/// One classical Runge–Kutta step of `ẋ = f(x)`.
pub fn rk4<const N: usize>(
    f: impl Fn(&SVector<f64, N>) -> SVector<f64, N>,
    x: &SVector<f64, N>,
    h: f64,
) -> SVector<f64, N> {
    let k1 = f(x);
    let k2 = f(&(x + k1 * (h / 2.0)));
    let k3 = f(&(x + k2 * (h / 2.0)));
    let k4 = f(&(x + k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Advance the full model by one fixed RK4 step with zero-order-hold control.
///
/// `dist` returns the disturbance force and torque at an intermediate state;
/// it is evaluated at every Runge–Kutta stage.
pub fn integrate_step<D>(
    x: &FullState,
    u: &FullControl,
    dist: D,
    dt: f64,
    params: &VehicleParams,
) -> Result<FullState>
where
    D: Fn(&FullState, &FullControl) -> (Vector3<f64>, Vector3<f64>),
{
    if !(dt > 0.0 && dt <= MAX_SIM_DT) {
        return Err(Error::invalid(format!(
            "simulation step {dt} outside (0, {MAX_SIM_DT}]"
        )));
    }
    check_euler_box(&x.eta)?;
    let f = |z: &Vec12| {
        let s = FullState::from_vector(z);
        let (fd, td) = dist(&s, u);
        full_derivative_unchecked(&s, u, &fd, &td, params).to_vector()
    };
    let next = rk4(f, &x.to_vector(), dt);
    let magnitude = next.amax();
    if !magnitude.is_finite() || magnitude > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { magnitude });
    }
    let mut out = FullState::from_vector(&next);
    out.eta.z = wrap_angle(out.eta.z);
    check_euler_box(&out.eta)?;
    Ok(out)
}

/// Reduced drift `f(x) = [v; −g e₃; 0]` and input matrix
/// `B(x) = [0 0; r₃(η)/m 0; 0 I₃]`.
pub fn reduced_f_b(x: &ReducedState, params: &VehicleParams) -> (Vec9, Mat94) {
    let mut f = Vec9::zeros();
    f.fixed_rows_mut::<3>(0).copy_from(&x.v);
    f[5] = -params.gravity;
    (f, reduced_input_matrix(&x.eta, params))
}

pub fn reduced_input_matrix(eta: &Vector3<f64>, params: &VehicleParams) -> Mat94 {
    let mut b = Mat94::zeros();
    let r3 = thrust_axis(eta) / params.mass;
    b.fixed_view_mut::<3, 1>(3, 0).copy_from(&r3);
    b.fixed_view_mut::<3, 3>(6, 1)
        .copy_from(&Matrix3::identity());
    b
}

/// `ẋ = f(x) + B(x) u + [0; accel; 0]` for an additive acceleration in the velocity rows.
pub fn reduced_derivative(
    x: &ReducedState,
    u: &ReducedControl,
    accel: &Vector3<f64>,
    params: &VehicleParams,
) -> Vec9 {
    let (f, b) = reduced_f_b(x, params);
    let mut dx = f + b * u.to_vector();
    dx[3] += accel.x;
    dx[4] += accel.y;
    dx[5] += accel.z;
    dx
}

/// State-dependent coefficient factorization of the reduced error dynamics.
///
/// Returns `A` and the remainder `ε_A` such that
/// `f(x) + B(x)u_d − f(x_d) − B(x_d)u_d = A (x − x_d) + ε_A` holds exactly.
/// The `(v, η)` block of `A` is the second-order Taylor factor
/// `(f_u/m)(J(η_d) + ½ η̃ᵀH(η_d))` of the thrust axis.
pub fn sdc_matrix(
    x: &ReducedState,
    x_d: &ReducedState,
    u_d: &ReducedControl,
    params: &VehicleParams,
) -> (Mat9, Vec9) {
    let eta_err = x.eta - x_d.eta;
    let scale = u_d.f_u / params.mass;
    let jac = thrust_axis_jacobian(&x_d.eta);
    let hess = thrust_axis_hessians(&x_d.eta);
    let mut half_h = Matrix3::zeros();
    for i in 0..3 {
        // row i: ½ Σ_l η̃_l ∂²r₃ᵢ/∂η_l∂η_j
        let row = eta_err.transpose() * hess[i] * 0.5;
        half_h.set_row(i, &row);
    }
    let mut a = Mat9::zeros();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    a.fixed_view_mut::<3, 3>(3, 6)
        .copy_from(&((jac + half_h) * scale));

    let (f, b) = reduced_f_b(x, params);
    let (fd, bd) = reduced_f_b(x_d, params);
    let u = u_d.to_vector();
    let lhs = f + b * u - fd - bd * u;
    let diff = x.to_vector() - x_d.to_vector();
    let eps = lhs - a * diff;
    (a, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    fn eta_strategy(limit: f64) -> impl Strategy<Value = Vector3<f64>> {
        (-limit..limit, -limit..limit, -3.0..3.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    #[test]
    fn zero_angles_give_identity() {
        let z = Vector3::zeros();
        assert_eq!(rotation_matrix(&z).unwrap(), Matrix3::identity());
        assert_eq!(euler_rate_map(&z).unwrap(), Matrix3::identity());
    }

    #[test]
    fn pure_yaw_maps_x_to_y() {
        let r = rotation_matrix(&Vector3::new(0.0, 0.0, FRAC_PI_2)).unwrap();
        assert!((r * Vector3::x() - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn euler_box_is_enforced() {
        assert!(rotation_matrix(&Vector3::new(1.6, 0.0, 0.0)).is_err());
        assert!(rotation_matrix(&Vector3::new(0.0, -1.6, 0.0)).is_err());
        assert!(rotation_matrix(&Vector3::new(0.0, 0.0, 3.2)).is_err());
        assert!(euler_rate_map(&Vector3::new(0.0, FRAC_PI_2 - 1e-9, 0.0)).is_err());
    }

    #[test]
    fn euler_rate_map_pitch_sixty() {
        let m = euler_rate_map(&Vector3::new(0.0, PI / 3.0, 0.0)).unwrap();
        // ψ̇ row scales yaw body rate by 1/cos θ = 2
        assert_relative_eq!(m[(2, 2)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(m[(0, 2)], (PI / 3.0).tan(), epsilon = 1e-12);
        assert_relative_eq!(m[(1, 1)], 1.0, epsilon = 1e-12);
        assert_eq!(m[(2, 0)], 0.0);
    }

    #[test]
    fn euler_rates_match_rotation_kinematics() {
        // Ṙ = R ω̂ for body rates; compare a finite difference of R(η(t))
        // along η̇ = R_T ω with R ω̂.
        let eta = Vector3::new(0.3, -0.4, 1.1);
        let omega = Vector3::new(0.7, -0.2, 0.5);
        let eta_dot = euler_rate_map(&eta).unwrap() * omega;
        let h = 1e-6;
        let rp = rotation_matrix(&(eta + eta_dot * h)).unwrap();
        let rm = rotation_matrix(&(eta - eta_dot * h)).unwrap();
        let r_dot = (rp - rm) / (2.0 * h);
        let expected = rotation_matrix(&eta).unwrap() * crate::linalg::hat(&omega);
        assert!((r_dot - expected).norm() < 1e-8);
    }

    #[test]
    fn euler_integration_of_spin_is_first_order_consistent() {
        // Integrate attitude under constant body rate two ways: Euler-angle
        // kinematics vs. exact rotation exponential.
        let omega = Vector3::new(0.4, 0.3, -0.2);
        let mut eta = Vector3::new(0.1, 0.05, 0.2);
        let r0 = rotation_matrix(&eta).unwrap();
        let dt = 1e-4;
        let steps = 5000;
        for _ in 0..steps {
            eta += euler_rate_map(&eta).unwrap() * omega * dt;
        }
        let t = dt * steps as f64;
        let exact = r0 * nalgebra::Rotation3::from_scaled_axis(omega * t).into_inner();
        let got = rotation_matrix(&eta).unwrap();
        assert!((got - exact).norm() < 1e-3, "err {}", (got - exact).norm());
    }

    #[test]
    fn hover_is_equilibrium() {
        let p = params();
        let x = FullState::hover_at(Vector3::new(1.0, 2.0, 3.0));
        let u = FullControl {
            f_u: p.hover_thrust(),
            tau_u: Vector3::zeros(),
        };
        let dx = full_derivative(&x, &u, &Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert!(dx.to_vector().norm() < 1e-15);
        let next = integrate_step(
            &x,
            &u,
            |_, _| (Vector3::zeros(), Vector3::zeros()),
            0.001,
            &p,
        )
        .unwrap();
        assert!((next.to_vector() - x.to_vector()).norm() < 1e-12);
    }

    #[test]
    fn zero_thrust_is_free_fall() {
        let p = params();
        let x = FullState::hover_at(Vector3::zeros());
        let u = FullControl {
            f_u: 0.0,
            tau_u: Vector3::zeros(),
        };
        let dx = full_derivative(&x, &u, &Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
        assert_eq!(dx.v, Vector3::new(0.0, 0.0, -p.gravity));
    }

    #[test]
    fn thrust_force_matches_closed_form_and_finite_differences() {
        // v̇ = R(η) f_T/m − g e₃: the closed-form thrust direction r₃ must equal the
        // third column of R, and ∂v̇/∂f_u by central differences must be r₃/m.
        let p = params();
        let x = FullState {
            p: Vector3::zeros(),
            v: Vector3::new(0.2, -0.1, 0.3),
            eta: Vector3::new(0.2, -0.3, 0.7),
            omega: Vector3::new(0.1, 0.2, -0.3),
        };
        let zero = Vector3::zeros();
        let at = |f: f64| {
            full_derivative(
                &x,
                &FullControl {
                    f_u: f,
                    tau_u: zero,
                },
                &zero,
                &zero,
                &p,
            )
            .unwrap()
            .v
        };
        let h = 1e-4;
        let fd = (at(10.0 + h) - at(10.0 - h)) / (2.0 * h);
        let r = rotation_matrix(&x.eta).unwrap();
        assert!((fd - thrust_axis(&x.eta) / p.mass).norm() < 1e-9);
        assert!((r.column(2) - thrust_axis(&x.eta)).norm() < 1e-15);
        assert!(
            (at(10.0) - (r.column(2) * 10.0 / p.mass - Vector3::z() * p.gravity)).norm() < 1e-12
        );
    }

    #[test]
    fn rk4_matches_fine_euler_in_free_fall() {
        let p = params();
        let mut x = FullState::hover_at(Vector3::new(0.0, 0.0, 10.0));
        x.v = Vector3::new(1.0, 0.0, 0.5);
        let u = FullControl {
            f_u: 0.0,
            tau_u: Vector3::zeros(),
        };
        let none = |_: &FullState, _: &FullControl| (Vector3::zeros(), Vector3::zeros());
        let mut rk = x;
        for _ in 0..100 {
            rk = integrate_step(&rk, &u, none, 0.01, &p).unwrap();
        }
        let mut eu = x;
        let h = 1e-5;
        for _ in 0..100_000 {
            let d = full_derivative(&eu, &u, &Vector3::zeros(), &Vector3::zeros(), &p).unwrap();
            eu = FullState::from_vector(&(eu.to_vector() + d.to_vector() * h));
        }
        // Euler at h leaves O(h) = 5e-5 m error on the quadratic drop; the
        // residual is dominated by the oracle, not by RK4.
        assert!((rk.p - eu.p).norm() < 1e-4);
        let exact = x.p + x.v * 1.0 - Vector3::z() * (0.5 * p.gravity);
        assert!((rk.p - exact).norm() < 1e-12);
        assert!((eu.p - exact).norm() < 1e-4);
    }

    #[test]
    fn rk4_step_doubling_is_fourth_order() {
        let p = params();
        let x = FullState {
            p: Vector3::zeros(),
            v: Vector3::new(0.5, -0.3, 0.1),
            eta: Vector3::new(0.2, -0.1, 0.3),
            omega: Vector3::new(1.0, -0.5, 0.8),
        };
        let u = FullControl {
            f_u: 11.0,
            tau_u: Vector3::new(0.01, -0.02, 0.005),
        };
        let none = |_: &FullState, _: &FullControl| (Vector3::zeros(), Vector3::zeros());
        let err = |dt: f64| {
            let two = integrate_step(
                &integrate_step(&x, &u, none, dt, &p).unwrap(),
                &u,
                none,
                dt,
                &p,
            )
            .unwrap();
            let one = integrate_step(&x, &u, none, 2.0 * dt, &p).unwrap();
            (two.to_vector() - one.to_vector()).norm()
        };
        let e1 = err(0.004);
        let e2 = err(0.002);
        // local error O(dt⁵): halving dt shrinks the mismatch ~32×
        assert!(e1 / e2 > 20.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn integrator_rejects_bad_step_and_divergence() {
        let p = params();
        let x = FullState::hover_at(Vector3::zeros());
        let u = FullControl {
            f_u: 0.0,
            tau_u: Vector3::zeros(),
        };
        let none = |_: &FullState, _: &FullControl| (Vector3::zeros(), Vector3::zeros());
        assert!(integrate_step(&x, &u, none, 0.02, &p).is_err());
        assert!(integrate_step(&x, &u, none, 0.0, &p).is_err());
        let huge =
            |_: &FullState, _: &FullControl| (Vector3::new(1e12, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(
            integrate_step(&x, &u, huge, 0.01, &p),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn translational_energy_conserved_without_thrust() {
        let p = params();
        let mut x = FullState::hover_at(Vector3::new(0.0, 0.0, 5.0));
        x.v = Vector3::new(2.0, -1.0, 3.0);
        let u = FullControl {
            f_u: 0.0,
            tau_u: Vector3::zeros(),
        };
        let energy = |s: &FullState| 0.5 * p.mass * s.v.norm_squared() + p.mass * p.gravity * s.p.z;
        let e0 = energy(&x);
        let none = |_: &FullState, _: &FullControl| (Vector3::zeros(), Vector3::zeros());
        for _ in 0..100 {
            let next = integrate_step(&x, &u, none, 0.01, &p).unwrap();
            assert!((energy(&next) - energy(&x)).abs() < 1e-10);
            x = next;
        }
        assert!((energy(&x) - e0).abs() < 1e-9);
    }

    #[test]
    fn reduced_input_at_level_attitude() {
        let p = params();
        let (f, b) = reduced_f_b(&ReducedState::hover_at(Vector3::zeros()), &p);
        assert_eq!(b[(5, 0)], 1.0 / p.mass);
        assert_eq!(b[(3, 0)], 0.0);
        let dx = f + b * ReducedControl::hover(&p).to_vector();
        assert!(dx.norm() < 1e-15);
    }

    #[test]
    fn sdc_block_at_level_hover() {
        let p = params();
        let x = ReducedState::hover_at(Vector3::zeros());
        let (a, eps) = sdc_matrix(&x, &x, &ReducedControl::hover(&p), &p);
        let block = a.fixed_view::<3, 3>(3, 6);
        let g = p.gravity;
        let expected = Matrix3::new(0.0, g, 0.0, -g, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!((block - expected).norm() < 1e-12);
        assert_eq!(eps, Vec9::zeros());
    }

    #[test]
    fn thrust_axis_derivatives_match_finite_differences() {
        let eta = Vector3::new(0.3, -0.2, 0.8);
        let h = 1e-5;
        let jac = thrust_axis_jacobian(&eta);
        let hess = thrust_axis_hessians(&eta);
        for j in 0..3 {
            let mut d = Vector3::zeros();
            d[j] = h;
            let fd = (thrust_axis(&(eta + d)) - thrust_axis(&(eta - d))) / (2.0 * h);
            assert!((fd - jac.column(j)).norm() < 1e-9);
            let fdj =
                (thrust_axis_jacobian(&(eta + d)) - thrust_axis_jacobian(&(eta - d))) / (2.0 * h);
            for i in 0..3 {
                for l in 0..3 {
                    // ∂/∂η_j of column l of J, component i = ∂²r₃ᵢ/∂η_l∂η_j
                    assert!((fdj[(i, l)] - hess[i][(l, j)]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn sdc_remainder_is_third_order() {
        let p = params();
        let x_d = ReducedState {
            p: Vector3::zeros(),
            v: Vector3::zeros(),
            eta: Vector3::new(0.1, -0.2, 0.05),
        };
        let u_d = ReducedControl::hover(&p);
        let dir = Vector3::new(0.6, -0.5, 0.62).normalize();
        let mut worst: f64 = 0.0;
        for step in 1..=30 {
            let s = 0.01 * step as f64;
            let x = ReducedState {
                eta: x_d.eta + dir * s,
                ..x_d
            };
            let (_, eps) = sdc_matrix(&x, &x_d, &u_d, &p);
            let c = eps.norm() / (s.powi(3) * u_d.f_u / p.mass);
            worst = worst.max(c);
        }
        // third derivatives of r₃ are bounded by a small multiple of 1/6 ·|dir|³
        assert!(worst < 1.0, "fitted remainder constant {worst}");
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(eta in eta_strategy(1.5)) {
            let r = rotation_matrix(&eta).unwrap();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sdc_identity_holds(
            eta_d in eta_strategy(0.6),
            deta in eta_strategy(0.3),
            dp in proptest::array::uniform3(-2.0..2.0f64),
            dv in proptest::array::uniform3(-2.0..2.0f64),
            thrust in 2.0..30.0f64,
        ) {
            let p = params();
            let mut deta = deta;
            deta.z = deta.z.clamp(-0.3, 0.3);
            let x_d = ReducedState { p: Vector3::new(1.0, 0.0, 2.0), v: Vector3::new(0.5, 0.0, -0.2), eta: eta_d };
            let x = ReducedState {
                p: x_d.p + Vector3::from(dp),
                v: x_d.v + Vector3::from(dv),
                eta: eta_d + deta,
            };
            let u_d = ReducedControl { f_u: thrust, eta_u: Vector3::new(0.1, -0.2, 0.3) };
            let (a, eps) = sdc_matrix(&x, &x_d, &u_d, &p);
            let (f, b) = reduced_f_b(&x, &p);
            let (fd, bd) = reduced_f_b(&x_d, &p);
            let u = u_d.to_vector();
            let lhs = f + b * u - fd - bd * u;
            let rhs = a * (x.to_vector() - x_d.to_vector()) + eps;
            prop_assert!((lhs - rhs).norm() < 1e-12);
            // remainder lives only in the velocity rows
            prop_assert!(eps.fixed_rows::<3>(0).norm() == 0.0);
            prop_assert!(eps.fixed_rows::<3>(6).norm() == 0.0);
        }

        #[test]
        fn input_matrix_has_full_column_rank(eta in eta_strategy(1.4)) {
            let p = params();
            let b = reduced_input_matrix(&eta, &p);
            let sv = b.singular_values();
            prop_assert!(sv.min() > 1e-3);
        }
    }
}
