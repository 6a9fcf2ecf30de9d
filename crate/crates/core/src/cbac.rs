//! Contraction-based adaptive tracking law `u = u_d − K e − B†ϕ â` on the reduced model.

use nalgebra::{DMatrix, DVector, SMatrix};
use serde::{Deserialize, Serialize};

use crate::ccm::MetricField;
use crate::dynamics::{reduced_input_matrix, ReducedControl, ReducedState, VehicleParams};
use crate::error::{Error, Result};
use crate::linalg::{Mat49, Mat9, Mat94, Vec4, Vec9};
use crate::nn::{embed_velocity_rows, MlpBasis};

/// Smallest singular value of `B` accepted by [`pseudo_inverse`].
pub const RANK_TOLERANCE: f64 = 1e-8;

/// How the learned basis enters the cancellation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cancellation {
    /// No learned term.
    Off,
    /// `ϕ = φ(x, x_r) − φ(x_d, x_r)`, for plans that already carry `φ(x_d, x_r)â`.
    Difference,
    /// `ϕ = φ(x, x_r)`, for plans made without the learned model.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingError {
    pub e: Vec9,
    /// `√(eᵀMe)`
    pub norm_m: f64,
}

#[derive(Clone, Debug)]
pub struct CbacOutput {
    /// Command after clamping to the actuator limits.
    pub u: ReducedControl,
    /// Command before clamping.
    pub u_raw: ReducedControl,
    pub error: TrackingError,
    pub metric: Mat9,
    pub gain: Mat49,
    pub b: Mat94,
    pub b_dagger: Mat49,
    /// Cancellation basis `ϕ`, `3 × k`; empty when cancellation is off.
    pub varphi: DMatrix<f64>,
    pub saturated: bool,
}

/// `B† = (BᵀB)⁻¹Bᵀ`.
pub fn pseudo_inverse(b: &Mat94) -> Result<Mat49> {
    let sigma_min = b.singular_values().min();
    if !(sigma_min >= RANK_TOLERANCE) {
        return Err(Error::RankDeficient { sigma_min });
    }
    let gram = b.transpose() * b;
    let inv = gram
        .try_inverse()
        .ok_or(Error::RankDeficient { sigma_min })?;
    Ok(inv * b.transpose())
}

/// Clamp a reduced command to `0 ≤ f_u ≤ f_max` and `|η_u,i| ≤ euler_rate_max`.
pub fn clamp_command(u: &ReducedControl, params: &VehicleParams) -> (ReducedControl, bool) {
    let f_u = u.f_u.clamp(0.0, params.f_max);
    let lim = params.euler_rate_max;
    let eta_u = u.eta_u.map(|c| c.clamp(-lim, lim));
    let saturated = f_u != u.f_u || eta_u != u.eta_u;
    (ReducedControl { f_u, eta_u }, saturated)
}

/// Learned-model context for the cancellation term.
pub struct Learned<'a> {
    pub model: &'a MlpBasis,
    pub a_hat: &'a DVector<f64>,
    pub x_r: &'a ReducedState,
    pub mode: Cancellation,
}

pub fn cbac_control(
    x: &ReducedState,
    x_d: &ReducedState,
    u_d: &ReducedControl,
    field: &MetricField,
    learned: Option<&Learned<'_>>,
    params: &VehicleParams,
) -> Result<CbacOutput> {
    if !x.is_finite()
        || !x_d.is_finite()
        || !u_d.f_u.is_finite()
        || !u_d.eta_u.iter().all(|v| v.is_finite())
    {
        return Err(Error::invalid("controller inputs must be finite"));
    }
    let e = x.error_from(x_d);
    let metric = field.metric_at(x_d, u_d);
    let gain = field.gain(x, x_d, u_d);
    let b = reduced_input_matrix(&x.eta, params);
    let b_dagger = pseudo_inverse(&b)?;

    let mut u = u_d.to_vector() - gain * e;
    let mut varphi = DMatrix::zeros(3, 0);
    if let Some(l) = learned {
        if l.mode != Cancellation::Off {
            if l.a_hat.len() != l.model.k {
                return Err(Error::Dimension {
                    expected: l.model.k,
                    got: l.a_hat.len(),
                });
            }
            varphi = l.model.forward(x, l.x_r);
            if l.mode == Cancellation::Difference {
                varphi -= l.model.forward(x_d, l.x_r);
            }
            let term = embed_velocity_rows(&varphi) * l.a_hat;
            u -= b_dagger * Vec9::from_column_slice(term.as_slice());
        }
    }
    let u_raw = ReducedControl::from_vector(&u);
    let (clamped, saturated) = clamp_command(&u_raw, params);
    if saturated {
        log::debug!("reduced command clamped: {:?}", u_raw);
    }
    let norm_m = e.dot(&(metric * e)).max(0.0).sqrt();
    Ok(CbacOutput {
        u: clamped,
        u_raw,
        error: TrackingError { e, norm_m },
        metric,
        gain,
        b,
        b_dagger,
        varphi,
        saturated,
    })
}

/// Cancellation term `B†ϕ â` as a reduced-input vector; zero when `ϕ` is empty.
pub fn cancellation_input(b_dagger: &Mat49, varphi: &DMatrix<f64>, a_hat: &DVector<f64>) -> Vec4 {
    if varphi.ncols() == 0 {
        return Vec4::zeros();
    }
    let term = embed_velocity_rows(varphi) * a_hat;
    b_dagger * SMatrix::<f64, 9, 1>::from_column_slice(term.as_slice())
}
