//! Closed-loop experiments: scenarios, the three controller variants, a 1 kHz
//! simulation with a 100 Hz control loop and a 5 Hz planner, and run metrics.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapt_step, chi2_icdf, compute_alpha_bar, compute_d_bar, error_bound, lyapunov_metric_bounds,
    nominal_acceleration, AdaptConfig, AdaptInputs, AdaptState, EnvelopeBounds, ErrorBoundParams,
    ResidualFilter,
};
use crate::attitude::{AttitudeGains, AttitudeTracker};
use crate::cbac::{cbac_control, clamp_command, Cancellation, Learned};
use crate::ccm::MetricField;
use crate::disturbance::{total_disturbance, EnvConditions};
use crate::dynamics::{
    integrate_step, sdc_matrix, FullControl, FullState, ReducedControl, ReducedState, VehicleParams,
};
use crate::error::{Error, Result};
use crate::linalg::{lambda_min, to_dmatrix, Mat9, Vec9};
use crate::mpc::{discretize_augmented, MpcConfig, PlanRequest, PlanResult, PlanStatus};
use crate::nn::{embed_velocity_rows, MetaModel};
use crate::reference::Reference;

/// Controller variant compared in the tracking experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Disturbance-unaware MPC whose plan input is applied open loop.
    #[serde(rename = "nominal-mpc")]
    Nominal,
    /// Disturbance-unaware MPC tracked with the full adaptive controller.
    #[serde(rename = "mpc-plus-mlcbac")]
    MpcPlusMlCbac,
    /// Disturbance-aware MPC tracked with the full adaptive controller.
    #[serde(rename = "full")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Nominal, Variant::MpcPlusMlCbac, Variant::Full];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Nominal => "nominal-mpc",
            Variant::MpcPlusMlCbac => "mpc-plus-mlcbac",
            Variant::Full => "full",
        }
    }

    pub fn adaptive(self) -> bool {
        self != Variant::Nominal
    }

    pub fn planner_aware(self) -> bool {
        self == Variant::Full
    }

    /// Whether the contraction feedback runs; without it the planner,
    /// replanning from the measured state, is the only position feedback.
    pub fn feedback(self) -> bool {
        self != Variant::Nominal
    }

    pub fn cancellation(self) -> Cancellation {
        match self {
            Variant::Nominal => Cancellation::Off,
            Variant::MpcPlusMlCbac => Cancellation::Full,
            Variant::Full => Cancellation::Difference,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// Built-in scenario families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Fig8,
    Landing,
    Hover,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [
        ScenarioKind::Fig8,
        ScenarioKind::Landing,
        ScenarioKind::Hover,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Fig8 => "fig8",
            ScenarioKind::Landing => "landing",
            ScenarioKind::Hover => "hover",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.label() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub duration: f64,
    pub reference: Reference,
    /// Hover point the planner starts from; `None` starts on the reference.
    #[serde(default)]
    pub start: Option<Vector3<f64>>,
    /// Offset of the true initial position from the planner start.
    #[serde(default)]
    pub start_offset: Vector3<f64>,
    pub env: EnvConditions,
    pub variant: Variant,
    pub seed: u64,
    /// Stop once the vehicle is this close above the ground.
    #[serde(default)]
    pub touchdown_height: Option<f64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid("scenario duration must be positive"));
        }
        if self.start_offset.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("start offset must be finite"));
        }
        if let Some(h) = self.touchdown_height {
            if !(h >= 0.0) {
                return Err(Error::invalid("touchdown height must be non-negative"));
            }
        }
        self.reference.validate()?;
        self.env.validate()
    }

    /// Planner state at `t = 0`.
    pub fn initial_plan_state(&self) -> ReducedState {
        match self.start {
            Some(p) => ReducedState::hover_at(p),
            None => self.reference.sample(0.0),
        }
    }
}

/// Parameters of the built-in scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioPresets {
    pub figure8_amplitude: f64,
    pub figure8_period: f64,
    pub figure8_center: Vector3<f64>,
    pub figure8_duration: f64,
    /// Wind speed along `+x`, m/s.
    pub crosswind: f64,
    pub landing_start_height: f64,
    pub landing_duration: f64,
    pub touchdown_height: f64,
    pub hover_height: f64,
    pub hover_duration: f64,
    pub ground_effect_rho: f64,
    pub drag_coeff: f64,
}

impl Default for ScenarioPresets {
    fn default() -> Self {
        Self {
            figure8_amplitude: 2.0,
            figure8_period: 8.0,
            figure8_center: Vector3::new(0.0, 0.0, 2.0),
            figure8_duration: 16.0,
            crosswind: 12.0,
            landing_start_height: 3.0,
            landing_duration: 12.0,
            touchdown_height: 0.02,
            hover_height: 2.0,
            hover_duration: 5.0,
            ground_effect_rho: 1.0,
            drag_coeff: 0.02,
        }
    }
}

impl ScenarioPresets {
    fn env(&self, wind: f64, rho: f64, seed: u64) -> EnvConditions {
        EnvConditions {
            wind_velocity: Vector3::new(wind, 0.0, 0.0),
            ground_height: 0.0,
            drag_coeff: Vector3::repeat(self.drag_coeff),
            ground_effect_rho: rho,
            rng_seed: seed,
        }
    }

    pub fn build(&self, kind: ScenarioKind, variant: Variant, seed: u64) -> Scenario {
        match kind {
            ScenarioKind::Fig8 => Scenario {
                name: kind.label().into(),
                duration: self.figure8_duration,
                reference: Reference::Figure8 {
                    amplitude: self.figure8_amplitude,
                    period: self.figure8_period,
                    center: self.figure8_center,
                },
                start: None,
                start_offset: Vector3::zeros(),
                env: self.env(self.crosswind, self.ground_effect_rho, seed),
                variant,
                seed,
                touchdown_height: None,
            },
            ScenarioKind::Landing => Scenario {
                name: kind.label().into(),
                duration: self.landing_duration,
                reference: Reference::Platform {
                    position: Vector3::zeros(),
                    velocity: Vector3::zeros(),
                },
                start: Some(Vector3::new(0.0, 0.0, self.landing_start_height)),
                start_offset: Vector3::zeros(),
                env: self.env(0.0, self.ground_effect_rho, seed),
                variant,
                seed,
                touchdown_height: Some(self.touchdown_height),
            },
            ScenarioKind::Hover => Scenario {
                name: kind.label().into(),
                duration: self.hover_duration,
                reference: Reference::Hover {
                    position: Vector3::new(0.0, 0.0, self.hover_height),
                },
                start: None,
                start_offset: Vector3::zeros(),
                env: self.env(0.0, 0.0, seed),
                variant,
                seed,
                touchdown_height: None,
            },
        }
    }

    /// Figure-8 under a wind drawn from the training distribution: uniform speed
    /// on `[0, max_wind]` along `+x`, ground effect on or off with equal odds.
    pub fn randomized_figure8(
        &self,
        variant: Variant,
        seed: u64,
        max_wind: f64,
        duration: f64,
    ) -> Scenario {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f18e);
        let wind = rng.random_range(0.0..=max_wind.max(0.0));
        let rho = if rng.random_bool(0.5) {
            self.ground_effect_rho
        } else {
            0.0
        };
        let mut s = self.build(ScenarioKind::Fig8, variant, seed);
        s.name = "fig8-random".into();
        s.duration = duration;
        s.env = self.env(wind, rho, seed);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub sim_dt: f64,
    pub control_dt: f64,
    pub attitude: AttitudeGains,
    pub adapt: AdaptConfig,
    pub mpc: MpcConfig,
    /// Time after which `ε̄` switches from the training estimate to the online innovation RMS, s.
    pub eps_warmup: f64,
    /// Std of the additive velocity measurement noise, m/s.
    pub velocity_noise_std: f64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            sim_dt: 0.001,
            control_dt: 0.01,
            attitude: AttitudeGains::default(),
            adapt: AdaptConfig::default(),
            mpc: MpcConfig::default(),
            eps_warmup: 1.0,
            velocity_noise_std: 0.0,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sim_dt > 0.0) || !(self.control_dt >= self.sim_dt) {
            return Err(Error::invalid("need 0 < sim_dt ≤ control_dt"));
        }
        if (self.control_dt / self.sim_dt - self.substeps() as f64).abs() > 1e-9 {
            return Err(Error::invalid("control_dt must be a multiple of sim_dt"));
        }
        let replan = self.mpc.replan_period / self.control_dt;
        if !(self.mpc.replan_period > 0.0) || (replan - replan.round()).abs() > 1e-9 {
            return Err(Error::invalid(
                "replan period must be a multiple of control_dt",
            ));
        }
        if !(self.eps_warmup >= 0.0) || !(self.velocity_noise_std >= 0.0) {
            return Err(Error::invalid(
                "eps_warmup and noise std must be non-negative",
            ));
        }
        self.adapt.validate()?;
        self.mpc.validate()
    }

    fn substeps(&self) -> usize {
        (self.control_dt / self.sim_dt).round() as usize
    }

    fn replan_every(&self) -> usize {
        (self.mpc.replan_period / self.control_dt).round().max(1.0) as usize
    }
}

/// Artifacts and settings a run draws on.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub field: &'a MetricField,
    pub model: Option<&'a MetaModel>,
    pub envelope: Option<&'a EnvelopeBounds>,
    pub params: &'a VehicleParams,
    pub cfg: &'a HarnessConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcStats {
    /// `None` when the solver returned an error and the previous plan was kept.
    pub status: Option<PlanStatus>,
    pub iterations: usize,
    pub cost: f64,
    pub kkt_residual: f64,
    pub max_defect: f64,
    pub solve_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub v: f64,
    pub v_dot: f64,
    pub rhs: f64,
}

impl LyapunovSample {
    pub fn holds(&self) -> bool {
        self.v_dot <= self.rhs + 1e-9 * (1.0 + self.v.abs())
    }
}

/// One 100 Hz control step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub x: ReducedState,
    pub x_d: ReducedState,
    pub x_r: ReducedState,
    /// Applied reduced command.
    pub u: ReducedControl,
    pub a_hat: Vec<f64>,
    pub lambda_min_p: f64,
    /// Certified error bound; NaN for variants without adaptation.
    pub e_bar: f64,
    pub alpha_bar: f64,
    pub e_norm: f64,
    pub e_norm_m: f64,
    pub saturated: bool,
    pub replanned: bool,
    /// Statistics of the plan in use.
    pub mpc: MpcStats,
    pub cbac_us: f64,
    pub lyapunov: Option<LyapunovSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Touchdown {
    pub t: f64,
    pub v_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cbac_median_us: f64,
    pub mpc_median_ms: f64,
    pub mpc_max_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    pub flown: f64,
    pub rmse: f64,
    pub terminal_error: f64,
    /// `z − z_r` at the last step.
    pub terminal_height_error: f64,
    /// Fraction of steps with `‖e‖ > ē`; `None` without a certified bound.
    pub bound_violation_fraction: Option<f64>,
    pub lyapunov_pass_fraction: Option<f64>,
    pub touchdown: Option<Touchdown>,
    pub saturation_fraction: f64,
    pub replans: usize,
    pub degraded_plans: usize,
    pub solver_errors: usize,
    pub aborted: Option<String>,
    /// Wall-clock figures; excluded from determinism comparisons.
    pub timing: Timing,
}

impl RunSummary {
    /// The summary with wall-clock figures zeroed.
    pub fn deterministic_part(&self) -> RunSummary {
        RunSummary {
            timing: Timing {
                cbac_median_us: 0.0,
                mpc_median_ms: 0.0,
                mpc_max_ms: 0.0,
            },
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunLog {
    pub scenario: Scenario,
    pub records: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// `√(mean ‖p − p_r‖²)` over the records.
pub fn rmse(records: &[StepRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("RMSE of an empty log"));
    }
    let sum: f64 = records
        .iter()
        .map(|r| (r.x.p - r.x_r.p).norm_squared())
        .sum();
    Ok((sum / records.len() as f64).sqrt())
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Recompute the summary from the per-step records.
pub fn summarize(
    scenario: &Scenario,
    records: &[StepRecord],
    aborted: Option<String>,
) -> Result<RunSummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::invalid("cannot summarize an empty log"))?;
    let bounded: Vec<&StepRecord> = records.iter().filter(|r| r.e_bar.is_finite()).collect();
    let bound_violation_fraction = (!bounded.is_empty()).then(|| {
        bounded.iter().filter(|r| r.e_norm > r.e_bar).count() as f64 / bounded.len() as f64
    });
    let replay: Vec<LyapunovSample> = records.iter().filter_map(|r| r.lyapunov).collect();
    let lyapunov_pass_fraction = (!replay.is_empty())
        .then(|| replay.iter().filter(|s| s.holds()).count() as f64 / replay.len() as f64);
    let touchdown = scenario.touchdown_height.and_then(|h| {
        (last.x.p.z - scenario.env.ground_height <= h).then_some(Touchdown {
            t: last.t,
            v_z: last.x.v.z,
        })
    });
    let replanned: Vec<&StepRecord> = records.iter().filter(|r| r.replanned).collect();
    let mut mpc_ms: Vec<f64> = replanned.iter().map(|r| r.mpc.solve_ms).collect();
    let mpc_max_ms = mpc_ms.iter().copied().fold(0.0, f64::max);
    let mut cbac_us: Vec<f64> = records.iter().map(|r| r.cbac_us).collect();
    Ok(RunSummary {
        scenario: scenario.name.clone(),
        variant: scenario.variant,
        seed: scenario.seed,
        steps: records.len(),
        flown: last.t,
        rmse: rmse(records)?,
        terminal_error: (last.x.p - last.x_r.p).norm(),
        terminal_height_error: last.x.p.z - last.x_r.p.z,
        bound_violation_fraction,
        lyapunov_pass_fraction,
        touchdown,
        saturation_fraction: records.iter().filter(|r| r.saturated).count() as f64
            / records.len() as f64,
        replans: replanned.len(),
        degraded_plans: replanned
            .iter()
            .filter(|r| r.mpc.status == Some(PlanStatus::InfeasibleRelaxed))
            .count(),
        solver_errors: replanned.iter().filter(|r| r.mpc.status.is_none()).count(),
        aborted,
        timing: Timing {
            cbac_median_us: median(&mut cbac_us),
            mpc_median_ms: median(&mut mpc_ms),
            mpc_max_ms,
        },
    })
}

/// Inputs of the certified bound `ē` evaluated at one control step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundSnapshot {
    pub alpha_bar: f64,
    pub lambda_m_ratio: f64,
    pub lambda_min_m: f64,
    pub d_bar: f64,
    pub feasible: bool,
}

impl BoundSnapshot {
    pub fn params(&self, e0: f64, a_tilde0: f64) -> ErrorBoundParams {
        ErrorBoundParams {
            alpha_bar: self.alpha_bar,
            lambda_m_ratio: self.lambda_m_ratio,
            lambda_min_m: self.lambda_min_m,
            d_bar: self.d_bar,
            e0,
            a_tilde0,
        }
    }
}

/// `ᾱ`, `λ_𝓜`, `λ_min(𝓜)` and `D̄` at the current metric, covariance and basis.
pub fn bound_snapshot(
    metric: &Mat9,
    state: &AdaptState,
    phi: &DMatrix<f64>,
    envelope: &EnvelopeBounds,
    field: &MetricField,
    cfg: &AdaptConfig,
    p_rate: Option<f64>,
) -> Result<BoundSnapshot> {
    let k = state.a_hat.len();
    let ab = compute_alpha_bar(
        metric,
        &state.p,
        phi,
        &cfg.q_matrix(k),
        &cfg.r_matrix(),
        field.alpha,
    )?;
    let (lambda_m_ratio, lambda_min_m) = lyapunov_metric_bounds(metric, &state.p)?;
    let d = compute_d_bar(state, envelope, field.omega_chi(), cfg, p_rate)?;
    Ok(BoundSnapshot {
        alpha_bar: ab.value,
        lambda_m_ratio,
        lambda_min_m,
        d_bar: d.value,
        feasible: ab.feasible,
    })
}

/// `sup‖ã(0)‖` for an estimate started at zero: `‖a_prior‖ + √(χ²_k(1−δ)/λ_min(P_𝒟meta))`.
pub fn initial_coefficient_error(model: &MetaModel, delta: f64) -> Result<f64> {
    let chi = chi2_icdf(model.a_prior.len(), 1.0 - delta)?;
    let lmin = lambda_min(&model.p_meta);
    if !(lmin > 0.0) {
        return Err(Error::invalid("P_meta is not positive definite"));
    }
    Ok(model.a_prior.norm() + (chi / lmin).sqrt())
}

/// Quantities of one step kept for the Lyapunov replay.
struct ReplayPoint {
    e: Vec9,
    metric: Mat9,
    /// `A(x, x_d) − B(x)K`
    closed_loop: Mat9,
    /// `BB†ϕ` embedded in the velocity rows, `9 × k`.
    proj_varphi: DMatrix<f64>,
    phi: DMatrix<f64>,
    a_hat: DVector<f64>,
    p: DMatrix<f64>,
    /// True disturbance acceleration at the step.
    disturbance: Vector3<f64>,
    alpha_bar: f64,
}

/// Least-squares `a*` with `φ a* ≈` the true disturbance over the run.
fn in_span_coefficients(points: &[ReplayPoint]) -> DVector<f64> {
    let k = points.first().map_or(0, |p| p.a_hat.len());
    let mut gram = DMatrix::<f64>::identity(k, k) * 1e-9;
    let mut rhs = DVector::zeros(k);
    for pt in points {
        gram += pt.phi.transpose() * &pt.phi;
        rhs += pt.phi.transpose() * DVector::from_column_slice(pt.disturbance.as_slice());
    }
    gram.cholesky()
        .map_or_else(|| DVector::zeros(k), |c| c.solve(&rhs))
}

/// Replay `V = eᵀMe + ãᵀP⁻¹ã` along the log and compare the central-difference
/// `V̇` with `−2ᾱV + 2√(V/λ_min(𝓜))·D`. `D = ‖𝓜ξ‖` where `ξ` is the exact
/// residual of the coupled error system after removing its homogeneous part.
fn lyapunov_replay(
    points: &[ReplayPoint],
    dt: f64,
    cfg: &AdaptConfig,
) -> Vec<Option<LyapunovSample>> {
    let n = points.len();
    let mut out = vec![None; n];
    if n < 3 {
        return out;
    }
    let k = points[0].a_hat.len();
    let a_star = in_span_coefficients(points);
    let q = cfg.q_matrix(k);
    let r_inv = cfg
        .r_matrix()
        .try_inverse()
        .unwrap_or_else(|| DMatrix::identity(3, 3));
    let sigma = cfg.sigma;
    let prepared: Vec<Option<(DVector<f64>, DMatrix<f64>, f64)>> = points
        .iter()
        .map(|pt| {
            let a_tilde = &pt.a_hat - &a_star;
            let p_inv = pt.p.clone().try_inverse()?;
            let v = pt.e.dot(&(pt.metric * pt.e)) + a_tilde.dot(&(&p_inv * &a_tilde));
            Some((a_tilde, p_inv, v))
        })
        .collect();
    let h = 2.0 * dt;
    for i in 1..n - 1 {
        let (Some(prev), Some(cur), Some(next)) =
            (&prepared[i - 1], &prepared[i], &prepared[i + 1])
        else {
            continue;
        };
        let pt = &points[i];
        let (a_tilde, p_inv, v) = cur;
        let v_dot = (next.2 - prev.2) / h;
        let e_dot = (points[i + 1].e - points[i - 1].e) / h;
        let m_dot = (points[i + 1].metric - points[i - 1].metric) / h;
        let Some(m_inv) = pt.metric.try_inverse() else {
            continue;
        };
        let a_t = DVector::from_column_slice(a_tilde.as_slice());
        let phi9 = embed_velocity_rows(&pt.phi);
        let e_d = DVector::from_column_slice(pt.e.as_slice());
        let m_d = to_dmatrix(&pt.metric);

        let r_e = DVector::from_column_slice(e_dot.as_slice()) - to_dmatrix(&pt.closed_loop) * &e_d
            + &phi9 * &a_t;
        let xi_e = r_e + to_dmatrix(&(m_inv * m_dot * 0.5)) * &e_d + &pt.proj_varphi * &a_t;

        let a_dot = (&next.0 - &prev.0) / h;
        let homogeneous_a = -&a_t * sigma - &pt.p * pt.phi.transpose() * &r_inv * &pt.phi * &a_t
            + &pt.p * pt.proj_varphi.transpose() * &m_d * &e_d;
        let p_inv_dot = (&next.1 - &prev.1) / h;
        let p_inv_flow =
            p_inv * (2.0 * sigma) - p_inv * &q * p_inv + pt.phi.transpose() * &r_inv * &pt.phi;
        let xi_a = a_dot - homogeneous_a + &pt.p * (p_inv_dot - p_inv_flow) * &a_t * 0.5;

        let top = &m_d * xi_e;
        let bottom = p_inv * xi_a;
        let d = (top.norm_squared() + bottom.norm_squared()).sqrt();
        let lmin = lambda_min(&m_d).min(lambda_min(p_inv));
        if !(lmin > 0.0) {
            continue;
        }
        let rhs = -2.0 * pt.alpha_bar * v + 2.0 * (v.max(0.0) / lmin).sqrt() * d;
        out[i] = Some(LyapunovSample { v: *v, v_dot, rhs });
    }
    out
}

/// The plan currently tracked, with the estimate it was made with.
struct ActivePlan {
    plan: PlanResult,
    stats: MpcStats,
    a_snapshot: Option<DVector<f64>>,
}

fn hover_plan(t0: f64, x0: &ReducedState, cfg: &MpcConfig, params: &VehicleParams) -> PlanResult {
    let n = cfg.horizon;
    let mut x = *x0;
    x.v = Vector3::zeros();
    PlanResult {
        t0,
        dt: cfg.dt,
        x: vec![x; n + 1],
        u: vec![ReducedControl::hover(params); n],
        cost: f64::NAN,
        status: PlanStatus::InfeasibleRelaxed,
        kkt_residual: f64::NAN,
        iterations: 0,
        max_defect: f64::NAN,
        max_violation: f64::NAN,
        merit_history: Vec::new(),
    }
}

fn full_state_from(x: &ReducedState) -> FullState {
    FullState {
        p: x.p,
        v: x.v,
        eta: x.eta,
        omega: Vector3::zeros(),
    }
}

/// Run one scenario to completion.
///
/// Solver failures are recorded and the run continues on the previous plan;
/// a diverging simulation ends the run early with `aborted` set.
pub fn run(scenario: &Scenario, ctx: &RunContext<'_>) -> Result<RunLog> {
    scenario.validate()?;
    let cfg = ctx.cfg;
    cfg.validate()?;
    let params = ctx.params;
    let variant = scenario.variant;
    let model = match (variant.adaptive(), ctx.model) {
        (true, None) => return Err(Error::MissingArtifact("meta-trained model")),
        (true, Some(m)) => Some(m),
        (false, _) => None,
    };
    let envelope = match (variant.adaptive(), ctx.envelope) {
        (true, None) => return Err(Error::MissingArtifact("envelope bounds")),
        (_, e) => e.cloned(),
    };
    let field = ctx.field;
    let mpc_cfg = &cfg.mpc;
    let dt = cfg.control_dt;
    let substeps = cfg.substeps();
    let replan_every = cfg.replan_every();
    let steps = (scenario.duration / dt).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let noise =
        Normal::new(0.0, cfg.velocity_noise_std).map_err(|e| Error::invalid(e.to_string()))?;

    let mut x_d = scenario.initial_plan_state();
    let mut x_true = full_state_from(&x_d);
    x_true.p += scenario.start_offset;
    let mut tracker = AttitudeTracker::new(x_true.eta, cfg.attitude.clone());
    let mut filter = ResidualFilter::new(cfg.adapt.filter_cutoff_hz, dt);
    let k = model.map_or(0, |m| m.basis.k);
    let p0 = model.map(|m| m.p_meta.clone());
    let mut adapt = model.map(|m| AdaptState {
        a_hat: DVector::zeros(m.basis.k),
        p: m.p_meta.clone(),
    });
    let a_tilde0 = match model {
        Some(m) => initial_coefficient_error(m, cfg.adapt.delta)?,
        None => 0.0,
    };
    let e0 = x_true.reduced().error_from(&x_d).norm();

    let mut active: Option<ActivePlan> = None;
    let mut last_thrust = params.hover_thrust();
    let mut records = Vec::with_capacity(steps + 1);
    let mut replay = Vec::new();
    let mut snapshot: Option<BoundSnapshot> = None;
    let mut last_lambda_p: Option<(f64, f64)> = None;
    let mut innovation_sq = 0.0;
    let mut innovation_n = 0usize;
    let mut aborted = None;

    for step in 0..=steps {
        let t = step as f64 * dt;
        let x_r = scenario.reference.sample(t);
        let x_meas = {
            let mut s = x_true.reduced();
            if cfg.velocity_noise_std > 0.0 {
                s.v += Vector3::new(
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                    noise.sample(&mut rng),
                );
            }
            s
        };
        let y = filter
            .push(
                x_meas.v,
                nominal_acceleration(&x_meas.eta, last_thrust, params),
            )
            .unwrap_or_else(Vector3::zeros);

        // ē(t) and its inputs at the current estimate
        let e_bar_at = |snap: &Option<BoundSnapshot>, tau: f64| -> f64 {
            match snap {
                Some(s) => error_bound(tau, &s.params(e0, a_tilde0)),
                None => f64::NAN,
            }
        };

        let replanned = step % replan_every == 0;
        if replanned {
            if !variant.feedback() {
                x_d = x_meas;
            }
            let x_r_h = scenario.reference.horizon(t, mpc_cfg.dt, mpc_cfg.horizon);
            let e_bar_h: Vec<f64> = (0..=mpc_cfg.horizon)
                .map(|i| {
                    let v = e_bar_at(&snapshot, t + i as f64 * mpc_cfg.dt);
                    if v.is_finite() {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            let a_snapshot = if variant.planner_aware() {
                adapt.as_ref().map(|s| s.a_hat.clone())
            } else {
                None
            };
            let warm = active.as_ref().map(|a| {
                let shift = ((t - a.plan.t0) / a.plan.dt).round() as usize;
                a.plan.shifted(shift)
            });
            let req = PlanRequest {
                t0: t,
                x0: &x_d,
                x_r: &x_r_h,
                e_bar: &e_bar_h,
                warm: warm.as_ref(),
            };
            let learned = match (&a_snapshot, model) {
                (Some(a), Some(m)) => Some((&m.basis, a)),
                _ => None,
            };
            let started = Instant::now();
            let result = crate::mpc::solve(&req, learned, mpc_cfg, params);
            let solve_ms = started.elapsed().as_secs_f64() * 1e3;
            active = Some(match result {
                Ok(plan) => ActivePlan {
                    stats: MpcStats {
                        status: Some(plan.status),
                        iterations: plan.iterations,
                        cost: plan.cost,
                        kkt_residual: plan.kkt_residual,
                        max_defect: plan.max_defect,
                        solve_ms,
                    },
                    plan,
                    a_snapshot,
                },
                Err(err) => {
                    log::warn!("planner failed at t = {t:.2} s: {err}");
                    let stats = MpcStats {
                        status: None,
                        iterations: 0,
                        cost: f64::NAN,
                        kkt_residual: f64::NAN,
                        max_defect: f64::NAN,
                        solve_ms,
                    };
                    match active.take() {
                        Some(prev) => ActivePlan { stats, ..prev },
                        None => ActivePlan {
                            plan: hover_plan(t, &x_d, mpc_cfg, params),
                            stats,
                            a_snapshot: None,
                        },
                    }
                }
            });
        }
        let plan = active.as_ref().expect("a plan exists after the first step");
        let (_, u_d) = plan.plan.sample(t);

        let learned = match (&adapt, model) {
            (Some(s), Some(m)) => Some(Learned {
                model: &m.basis,
                a_hat: &s.a_hat,
                x_r: &x_r,
                mode: variant.cancellation(),
            }),
            _ => None,
        };
        let started = Instant::now();
        let out = cbac_control(&x_meas, &x_d, &u_d, field, learned.as_ref(), params)?;
        let cbac_us = started.elapsed().as_secs_f64() * 1e6;
        let (u_cmd, saturated) = if variant.feedback() {
            (out.u, out.saturated)
        } else {
            clamp_command(&u_d, params)
        };

        let mut alpha_bar = f64::NAN;
        let mut e_bar = f64::NAN;
        let mut lambda_min_p = f64::NAN;
        let mut a_hat_log = Vec::new();
        if let (Some(state), Some(m), Some(env_bounds)) = (adapt.as_mut(), model, envelope.as_ref())
        {
            let phi = m.basis.forward(&x_meas, &x_r);
            let innovation = y - &phi * &state.a_hat;
            if t >= cfg.eps_warmup {
                innovation_sq += innovation.norm_squared();
                innovation_n += 1;
            }
            let mut bounds = env_bounds.clone();
            if innovation_n > 0 {
                bounds.eps_bar = 3.0 * (innovation_sq / innovation_n as f64).sqrt();
            }
            let lp = lambda_min(&state.p);
            let p_rate = last_lambda_p.map(|(t_prev, l_prev)| (lp - l_prev) / (t - t_prev).max(dt));
            last_lambda_p = Some((t, lp));
            let snap =
                bound_snapshot(&out.metric, state, &phi, &bounds, field, &cfg.adapt, p_rate)?;
            alpha_bar = snap.alpha_bar;
            snapshot = Some(snap);
            e_bar = e_bar_at(&snapshot, t);
            lambda_min_p = lp;
            a_hat_log = state.a_hat.iter().copied().collect();

            let proj = to_dmatrix(&(out.b * out.b_dagger));
            let varphi = if out.varphi.ncols() == k {
                out.varphi.clone()
            } else {
                DMatrix::zeros(3, k)
            };
            let proj_varphi = &proj * embed_velocity_rows(&varphi);
            let (a_sdc, _) = sdc_matrix(&x_meas, &x_d, &u_d, params);
            let disturbance =
                total_disturbance(&x_true, last_thrust, &scenario.env, params) / params.mass;
            replay.push(ReplayPoint {
                e: out.error.e,
                metric: out.metric,
                closed_loop: a_sdc - out.b * out.gain,
                proj_varphi,
                phi: phi.clone(),
                a_hat: state.a_hat.clone(),
                p: state.p.clone(),
                disturbance,
                alpha_bar,
            });

            let inputs = AdaptInputs {
                phi: &phi,
                y: &y,
                e: &out.error.e,
                metric: &out.metric,
                b: &out.b,
                b_dagger: &out.b_dagger,
                varphi: &varphi,
            };
            let next = adapt_step(
                state,
                &inputs,
                &cfg.adapt,
                p0.as_ref().expect("adaptive run has P₀"),
                dt,
            )?;
            if next.reset {
                log::warn!("adaptation covariance reset at t = {t:.2} s");
            }
            *state = next.state;
        }

        records.push(StepRecord {
            t,
            x: x_true.reduced(),
            x_d,
            x_r,
            u: u_cmd,
            a_hat: a_hat_log,
            lambda_min_p,
            e_bar,
            alpha_bar,
            e_norm: out.error.e.norm(),
            e_norm_m: out.error.norm_m,
            saturated,
            replanned,
            mpc: plan.stats.clone(),
            cbac_us,
            lyapunov: None,
        });

        if let Some(h) = scenario.touchdown_height {
            if x_true.p.z - scenario.env.ground_height <= h {
                break;
            }
        }
        if step == steps {
            break;
        }

        let command: FullControl = tracker.step(&x_true, &u_cmd, dt, params);
        last_thrust = command.f_u;
        let env = &scenario.env;
        let mut failed = None;
        for _ in 0..substeps {
            let dist = |s: &FullState, c: &FullControl| {
                (total_disturbance(s, c.f_u, env, params), Vector3::zeros())
            };
            match integrate_step(&x_true, &command, dist, cfg.sim_dt, params) {
                Ok(next) => x_true = next,
                Err(err) => {
                    failed = Some(err);
                    break;
                }
            }
            // the ground is rigid
            if x_true.p.z < env.ground_height {
                x_true.p.z = env.ground_height;
                x_true.v.z = x_true.v.z.max(0.0);
            }
        }
        if let Some(err) = failed {
            log::warn!("simulation stopped at t = {t:.2} s: {err}");
            aborted = Some(err.to_string());
            break;
        }

        let learned_plan = match (&plan.a_snapshot, model) {
            (Some(a), Some(m)) => Some((&m.basis, a)),
            _ => None,
        };
        x_d = discretize_augmented(&x_d, &u_d, &x_r, learned_plan, dt, params);
    }

    if variant.adaptive() {
        let samples = lyapunov_replay(&replay, dt, &cfg.adapt);
        for (rec, s) in records.iter_mut().zip(samples) {
            rec.lyapunov = s;
        }
    }
    let summary = summarize(scenario, &records, aborted)?;
    Ok(RunLog {
        scenario: scenario.clone(),
        records,
        summary,
    })
}

/// Run several scenarios on up to `threads` worker threads; results keep the input order.
pub fn run_many(
    scenarios: &[Scenario],
    ctx: &RunContext<'_>,
    threads: usize,
) -> Vec<Result<RunLog>> {
    let threads = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .min(scenarios.len().max(1));
    if threads <= 1 {
        return scenarios.iter().map(|s| run(s, ctx)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunLog>>> = (0..scenarios.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= scenarios.len() {
                    break;
                }
                let r = run(&scenarios[i], ctx);
                results.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|r| r.unwrap_or_else(|| Err(Error::invalid("run did not complete"))))
        .collect()
}
