//! Synthetic ground-truth disturbance forces and the multi-condition residual dataset.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attitude::{AttitudeGains, AttitudeTracker};
use crate::dynamics::{
    integrate_step, thrust_axis, FullControl, FullState, ReducedControl, ReducedState,
    VehicleParams,
};
use crate::error::{Error, Result};
use crate::reference::Reference;

/// Environmental condition `w` behind one slice of the dataset or one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConditions {
    /// Constant wind, m/s, inertial frame.
    pub wind_velocity: Vector3<f64>,
    /// Height of the ground surface, m.
    pub ground_height: f64,
    /// Per-axis quadratic drag coefficient, N·s²/m².
    pub drag_coeff: Vector3<f64>,
    /// Ground-effect strength `ρ`; zero disables the effect.
    pub ground_effect_rho: f64,
    pub rng_seed: u64,
}

impl Default for EnvConditions {
    fn default() -> Self {
        Self {
            wind_velocity: Vector3::zeros(),
            ground_height: 0.0,
            drag_coeff: Vector3::repeat(0.02),
            ground_effect_rho: 0.0,
            rng_seed: 0,
        }
    }
}

impl EnvConditions {
    pub fn validate(&self) -> Result<()> {
        if self.drag_coeff.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::invalid("drag coefficients must be non-negative"));
        }
        // keeps 1 − ρ(R/4z)² positive down to the clamp height R/2
        if !(0.0..4.0).contains(&self.ground_effect_rho) {
            return Err(Error::invalid("ground_effect_rho must lie in [0, 4)"));
        }
        if !self.wind_velocity.iter().all(|w| w.is_finite()) || !self.ground_height.is_finite() {
            return Err(Error::invalid("non-finite environment"));
        }
        Ok(())
    }
}

/// Extra thrust from ground effect, N, at height `z` above the surface.
///
/// `f_ge = f_u (1/(1 − ρ(R/4z)²) − 1)` with `z` clamped below at `R/2`.
pub fn ground_effect_force(z: f64, f_u: f64, rho: f64, params: &VehicleParams) -> f64 {
    if rho == 0.0 {
        return 0.0;
    }
    let z = if z.is_nan() {
        params.rotor_radius / 2.0
    } else {
        z.max(params.rotor_radius / 2.0)
    };
    let ratio = params.rotor_radius / (4.0 * z);
    f_u * (1.0 / (1.0 - rho * ratio * ratio) - 1.0)
}

/// Quadratic drag from the flow relative to the vehicle, `C_d ⊙ (w − v)‖w − v‖`.
pub fn crosswind_force(v: &Vector3<f64>, env: &EnvConditions) -> Vector3<f64> {
    let rel = env.wind_velocity - v;
    env.drag_coeff.component_mul(&rel) * rel.norm()
}

/// Ground effect (along the body thrust axis) plus crosswind drag.
pub fn total_disturbance(
    x: &FullState,
    f_u: f64,
    env: &EnvConditions,
    params: &VehicleParams,
) -> Vector3<f64> {
    let ge = ground_effect_force(
        x.p.z - env.ground_height,
        f_u,
        env.ground_effect_rho,
        params,
    );
    thrust_axis(&x.eta) * ge + crosswind_force(&x.v, env)
}

/// One residual sample: reduced state, applied input, residual acceleration and reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: ReducedState,
    pub u: ReducedControl,
    /// Residual acceleration `v̇ − (r₃ f_u/m − g e₃)`, m/s².
    pub y: Vector3<f64>,
    pub x_r: ReducedState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub condition: EnvConditions,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Number of environmental conditions `M`.
    pub conditions: usize,
    /// Samples per condition `N_k`.
    pub samples_per_condition: usize,
    /// Std of the additive residual noise, m/s² per axis.
    pub noise_std: f64,
    /// Largest wind speed in the condition catalog, m/s.
    pub max_wind: f64,
    pub ground_effect_rho: f64,
    pub drag_coeff: f64,
    /// Record one sample every `record_stride` control periods.
    pub record_stride: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            conditions: 10,
            samples_per_condition: 1500,
            noise_std: 0.05,
            max_wind: 12.0,
            ground_effect_rho: 1.0,
            drag_coeff: 0.02,
            record_stride: 5,
            seed: 7,
        }
    }
}

pub const MIN_SAMPLES_PER_CONDITION: usize = 100;
const SIM_DT: f64 = 0.001;
const CONTROL_DT: f64 = 0.01;

/// Condition catalog: wind speeds evenly spaced on `[0, max_wind]` along `+x`,
/// each paired with ground effect off and on.
pub fn condition_catalog(cfg: &DatasetConfig) -> Vec<EnvConditions> {
    let m = cfg.conditions;
    let speeds = m.div_ceil(2).max(1);
    (0..m)
        .map(|i| {
            let level = i / 2;
            let speed = if speeds > 1 {
                cfg.max_wind * level as f64 / (speeds - 1) as f64
            } else {
                0.0
            };
            EnvConditions {
                wind_velocity: Vector3::new(speed, 0.0, 0.0),
                ground_height: 0.0,
                drag_coeff: Vector3::repeat(cfg.drag_coeff),
                ground_effect_rho: if i % 2 == 1 {
                    cfg.ground_effect_rho
                } else {
                    0.0
                },
                rng_seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            }
        })
        .collect()
}

/// Simple cascaded pilot used only to excite the vehicle while collecting data.
struct Pilot {
    attitude: AttitudeTracker,
    kp: f64,
    kd: f64,
}

impl Pilot {
    fn new(eta: Vector3<f64>) -> Self {
        Self {
            attitude: AttitudeTracker::new(eta, AttitudeGains::default()),
            kp: 4.0,
            kd: 3.0,
        }
    }

    /// Thrust and Euler setpoint realizing a desired acceleration with zero yaw.
    fn command(
        &mut self,
        x: &FullState,
        target: &ReducedState,
        accel_ff: &Vector3<f64>,
        params: &VehicleParams,
    ) -> (FullControl, ReducedControl) {
        let mut a = accel_ff + (target.p - x.p) * self.kp + (target.v - x.v) * self.kd;
        a.z += params.gravity;
        a.z = a.z.max(0.2 * params.gravity);
        let pitch = a.x.atan2(a.z).clamp(-0.6, 0.6);
        let roll = (-a.y)
            .atan2((a.x * a.x + a.z * a.z).sqrt())
            .clamp(-0.6, 0.6);
        let eta_des = Vector3::new(roll, pitch, 0.0);
        let f_u = (params.mass * a.dot(&thrust_axis(&x.eta))).clamp(0.0, params.f_max);
        let u = self.attitude.hold(x, f_u, &eta_des, params);
        let eta_rate = crate::dynamics::euler_rate_map_unchecked(&x.eta) * x.omega;
        (
            u,
            ReducedControl {
                f_u: u.f_u,
                eta_u: eta_rate,
            },
        )
    }
}

/// Excitation episode: what the pilot flies and what is recorded as `x_r`.
enum Episode {
    Figure8(Reference),
    Descent {
        start: Vector3<f64>,
        floor: f64,
        speed: f64,
        platform: Reference,
    },
}

impl Episode {
    fn random(rng: &mut ChaCha8Rng, index: usize) -> Self {
        if index.is_multiple_of(2) {
            Episode::Figure8(Reference::Figure8 {
                amplitude: rng.random_range(1.0..2.5),
                period: rng.random_range(6.0..10.0),
                center: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(1.8..2.6),
                ),
            })
        } else {
            let start = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(0.8..3.0),
            );
            Episode::Descent {
                start,
                floor: rng.random_range(0.0..0.15),
                speed: rng.random_range(0.3..1.2),
                platform: Reference::Platform {
                    position: Vector3::new(start.x, start.y, 0.0),
                    velocity: Vector3::zeros(),
                },
            }
        }
    }

    fn duration(&self) -> f64 {
        match self {
            Episode::Figure8(r) => match r {
                Reference::Figure8 { period, .. } => *period,
                _ => 8.0,
            },
            Episode::Descent {
                start,
                floor,
                speed,
                ..
            } => (start.z - floor) / speed + 3.0,
        }
    }

    fn start(&self) -> ReducedState {
        match self {
            Episode::Figure8(r) => r.sample(0.0),
            Episode::Descent { start, .. } => ReducedState::hover_at(*start),
        }
    }

    /// `(pilot target, feedforward acceleration, recorded reference)`.
    fn at(&self, t: f64) -> (ReducedState, Vector3<f64>, ReducedState) {
        match self {
            Episode::Figure8(r) => {
                let s = r.sample(t);
                (s, r.acceleration(t), s)
            }
            Episode::Descent {
                start,
                floor,
                speed,
                platform,
            } => {
                let z = (start.z - speed * t).max(*floor);
                let vz = if z > *floor { -speed } else { 0.0 };
                let target = ReducedState {
                    p: Vector3::new(start.x, start.y, z),
                    v: Vector3::new(0.0, 0.0, vz),
                    eta: Vector3::zeros(),
                };
                (target, Vector3::zeros(), platform.sample(t))
            }
        }
    }
}

/// Fly randomized figure-8s and descents under `env` and record residual samples.
pub fn generate_condition(
    env: &EnvConditions,
    samples: usize,
    cfg: &DatasetConfig,
    params: &VehicleParams,
) -> Result<DomainDataset> {
    env.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(env.rng_seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| Error::invalid(format!("noise std: {e}")))?;
    let stride = cfg.record_stride.max(1);
    let substeps = (CONTROL_DT / SIM_DT).round() as usize;
    let mut out = Vec::with_capacity(samples);
    let mut episode_index = 0;
    let mut failures = 0;
    while out.len() < samples {
        let episode = Episode::random(&mut rng, episode_index);
        episode_index += 1;
        let start = episode.start();
        let mut x = FullState {
            p: start.p,
            v: start.v,
            eta: start.eta,
            omega: Vector3::zeros(),
        };
        let mut pilot = Pilot::new(x.eta);
        let steps = (episode.duration() / CONTROL_DT) as usize;
        let mut episode_samples = Vec::new();
        let mut ok = true;
        for step in 0..steps {
            let t = step as f64 * CONTROL_DT;
            let (target, ff, x_r) = episode.at(t);
            let (u, reduced_u) = pilot.command(&x, &target, &ff, params);
            if step % stride == 0 {
                let f = total_disturbance(&x, u.f_u, env, params);
                let eps = Vector3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
                episode_samples.push(Sample {
                    t,
                    x: x.reduced(),
                    u: reduced_u,
                    y: f / params.mass + eps,
                    x_r,
                });
            }
            for _ in 0..substeps {
                let dist = |s: &FullState, c: &FullControl| {
                    (total_disturbance(s, c.f_u, env, params), Vector3::zeros())
                };
                match integrate_step(&x, &u, dist, SIM_DT, params) {
                    Ok(next) => x = next,
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
                // the ground is rigid
                if x.p.z < env.ground_height {
                    x.p.z = env.ground_height;
                    x.v.z = x.v.z.max(0.0);
                }
            }
            if !ok {
                break;
            }
        }
        if ok {
            let room = samples - out.len();
            out.extend(episode_samples.into_iter().take(room));
        } else {
            failures += 1;
            if failures > 50 {
                return Err(Error::invalid("data-collection pilot keeps diverging"));
            }
        }
    }
    Ok(DomainDataset {
        condition: env.clone(),
        samples: out,
    })
}

/// Build `𝒟_meta`: one dataset per condition in [`condition_catalog`].
pub fn generate_meta_dataset(
    cfg: &DatasetConfig,
    params: &VehicleParams,
) -> Result<Vec<DomainDataset>> {
    if cfg.conditions == 0 {
        return Err(Error::invalid("at least one condition is required"));
    }
    if cfg.samples_per_condition < MIN_SAMPLES_PER_CONDITION {
        return Err(Error::invalid(format!(
            "samples_per_condition must be at least {MIN_SAMPLES_PER_CONDITION}"
        )));
    }
    params.validate()?;
    condition_catalog(cfg)
        .iter()
        .map(|env| generate_condition(env, cfg.samples_per_condition, cfg, params))
        .collect()
}
