//! Reference trajectories `x_r(t)` supplied to the planner.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::ReducedState;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reference {
    /// Fixed hover point.
    Hover { position: Vector3<f64> },
    /// Rotated figure-8 in the x–z plane.
    Figure8 {
        amplitude: f64,
        period: f64,
        center: Vector3<f64>,
    },
    /// Landing platform moving with constant velocity from `position` at `t = 0`.
    Platform {
        position: Vector3<f64>,
        velocity: Vector3<f64>,
    },
}

impl Reference {
    pub fn validate(&self) -> Result<()> {
        match self {
            Reference::Figure8 {
                amplitude, period, ..
            } if !(*period > 0.0) || !amplitude.is_finite() => Err(Error::invalid(
                "figure-8 needs a positive period and finite amplitude",
            )),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, t: f64) -> ReducedState {
        match self {
            Reference::Hover { position } => ReducedState::hover_at(*position),
            Reference::Figure8 {
                amplitude,
                period,
                center,
            } => figure8_reference(t, *amplitude, *period, center),
            Reference::Platform { position, velocity } => ReducedState {
                p: position + velocity * t,
                v: *velocity,
                eta: Vector3::zeros(),
            },
        }
    }

    /// Acceleration of the reference position, used as feedforward by the data-collection pilot.
    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        match self {
            Reference::Figure8 {
                amplitude, period, ..
            } => {
                let w = 2.0 * PI / period;
                Vector3::new(
                    -amplitude * w * w * (w * t).sin(),
                    0.0,
                    -0.5 * amplitude * 4.0 * w * w * (2.0 * w * t).sin(),
                )
            }
            _ => Vector3::zeros(),
        }
    }

    /// `x_r(t + k·dt)` for `k = 0..=n`.
    pub fn horizon(&self, t: f64, dt: f64, n: usize) -> Vec<ReducedState> {
        (0..=n).map(|k| self.sample(t + k as f64 * dt)).collect()
    }
}

/// `x = c_x + A sin(2πt/T)`, `z = c_z + (A/2) sin(4πt/T)`, `y = c_y`, level attitude.
pub fn figure8_reference(
    t: f64,
    amplitude: f64,
    period: f64,
    center: &Vector3<f64>,
) -> ReducedState {
    let w = 2.0 * PI / period;
    let (s1, c1) = (w * t).sin_cos();
    let (s2, c2) = (2.0 * w * t).sin_cos();
    ReducedState {
        p: Vector3::new(
            center.x + amplitude * s1,
            center.y,
            center.z + 0.5 * amplitude * s2,
        ),
        v: Vector3::new(amplitude * w * c1, 0.0, amplitude * w * c2),
        eta: Vector3::zeros(),
    }
}
