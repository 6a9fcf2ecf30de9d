//! Online estimation of the environment coefficients `â` with covariance `P`,
//! the chance-constrained uncertainty set and the certified tracking-error bound.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::disturbance::DomainDataset;
use crate::dynamics::{thrust_axis, ReducedState, VehicleParams};
use crate::error::{Error, Result};
use crate::linalg::{
    floor_eigenvalues, lambda_max, lambda_min, spd_sqrt_pair, sym, Mat9, Mat94, Vec9,
};
use crate::nn::{embed_velocity_rows, MetaModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Forgetting rate `σ`, 1/s.
    pub sigma: f64,
    /// Process-noise weight, `Q = q I`.
    pub q: f64,
    /// Measurement weight, `R = r I` (continuous-time spectral density).
    pub r_meas: f64,
    /// Failure probability `δ` of the uncertainty set.
    pub delta: f64,
    /// Eigenvalue floor of `P`.
    pub p_min: f64,
    /// Cut-off of the residual low-pass filter, Hz.
    pub filter_cutoff_hz: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            q: 0.5,
            r_meas: 0.05,
            delta: 0.05,
            p_min: 1e-8,
            filter_cutoff_hz: 10.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !(self.q > 0.0) || !(self.r_meas > 0.0) {
            return Err(Error::invalid("adaptation needs σ ≥ 0 and positive Q, R"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid("δ must lie in (0, 1)"));
        }
        if !(self.p_min > 0.0) || !(self.filter_cutoff_hz > 0.0) {
            return Err(Error::invalid("p_min and filter cut-off must be positive"));
        }
        Ok(())
    }

    pub fn q_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::identity(k, k) * self.q
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(3, 3) * self.r_meas
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub a_hat: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// First-order low-pass filtered finite-difference residual `y`.
#[derive(Clone, Debug)]
pub struct ResidualFilter {
    alpha: f64,
    dt: f64,
    previous: Option<(Vector3<f64>, Vector3<f64>)>,
    value: Option<Vector3<f64>>,
    count: usize,
}

/// Samples needed before the filter reports a value.
pub const MIN_RESIDUAL_HISTORY: usize = 3;

impl ResidualFilter {
    pub fn new(cutoff_hz: f64, dt: f64) -> Self {
        let tau = 1.0 / (2.0 * std::f64::consts::PI * cutoff_hz);
        Self {
            alpha: dt / (dt + tau),
            dt,
            previous: None,
            value: None,
            count: 0,
        }
    }

    /// Push the current velocity together with the nominal acceleration
    /// `(1/m) r₃(η) f_u − g e₃` applied since the previous sample.
    pub fn push(&mut self, v: Vector3<f64>, nominal_accel: Vector3<f64>) -> Option<Vector3<f64>> {
        self.count += 1;
        if let Some((v_prev, a_prev)) = self.previous {
            // trapezoidal nominal acceleration over the interval
            let raw = (v - v_prev) / self.dt - (a_prev + nominal_accel) * 0.5;
            self.value = Some(match self.value {
                Some(y) => y + (raw - y) * self.alpha,
                None => raw,
            });
        }
        self.previous = Some((v, nominal_accel));
        if self.count >= MIN_RESIDUAL_HISTORY {
            self.value
        } else {
            None
        }
    }

    pub fn value(&self) -> Option<Vector3<f64>> {
        self.value
    }
}

pub fn nominal_acceleration(eta: &Vector3<f64>, f_u: f64, params: &VehicleParams) -> Vector3<f64> {
    thrust_axis(eta) * (f_u / params.mass) - Vector3::new(0.0, 0.0, params.gravity)
}

/// Filtered residual from a uniformly sampled history of states and applied thrusts.
pub fn measure_residual(
    states: &[ReducedState],
    thrusts: &[f64],
    dt: f64,
    cutoff_hz: f64,
    params: &VehicleParams,
) -> Result<Vector3<f64>> {
    if states.len() < MIN_RESIDUAL_HISTORY || thrusts.len() < states.len() {
        return Err(Error::InsufficientHistory {
            needed: MIN_RESIDUAL_HISTORY,
            have: states.len().min(thrusts.len()),
        });
    }
    let mut filter = ResidualFilter::new(cutoff_hz, dt);
    let mut last = None;
    for (s, f) in states.iter().zip(thrusts) {
        last = filter.push(s.v, nominal_acceleration(&s.eta, *f, params));
    }
    last.ok_or(Error::InsufficientHistory {
        needed: MIN_RESIDUAL_HISTORY,
        have: states.len(),
    })
}

/// Everything the adaptation law needs at one control step.
pub struct AdaptInputs<'a> {
    /// Measurement basis `φ(x, x_r)`, `3 × k`.
    pub phi: &'a DMatrix<f64>,
    pub y: &'a Vector3<f64>,
    /// Tracking error `x − x_d`.
    pub e: &'a Vec9,
    pub metric: &'a Mat9,
    pub b: &'a Mat94,
    pub b_dagger: &'a nalgebra::SMatrix<f64, 4, 9>,
    /// Cancellation basis `ϕ`, `3 × k` in velocity rows.
    pub varphi: &'a DMatrix<f64>,
}

/// Outcome of one discrete adaptation step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStep {
    pub state: AdaptState,
    /// True when `P` collapsed below the floor and was reset to `P₀`.
    pub reset: bool,
}

fn predict(state: &mut AdaptState, sigma: f64, q: &DMatrix<f64>, h: f64) {
    state.a_hat *= (-sigma * h).exp();
    state.p = &state.p * (-2.0 * sigma * h).exp() + q * h;
}

/// One 100 Hz step of the two-step Kalman discretization of
/// `ȧ̂ = −σâ + PφᵀR⁻¹(y − φâ) + P(BB†ϕ)ᵀMe`, `Ṗ = −2σP + Q − PφᵀR⁻¹φP`.
///
/// The step is symmetric: half a prediction, the measurement update with
/// per-step covariance `R/dt` in Joseph form, the second half prediction, then the
/// tracking-error coupling `dt·P(BB†ϕ)ᵀMe`.
pub fn adapt_step(
    state: &AdaptState,
    inputs: &AdaptInputs<'_>,
    cfg: &AdaptConfig,
    p0: &DMatrix<f64>,
    dt: f64,
) -> Result<AdaptStep> {
    let k = state.a_hat.len();
    if inputs.phi.nrows() != 3 || inputs.phi.ncols() != k || inputs.varphi.ncols() != k {
        return Err(Error::Dimension {
            expected: k,
            got: inputs.phi.ncols(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::invalid("adaptation step must be positive"));
    }
    let q = cfg.q_matrix(k);
    let mut next = state.clone();
    predict(&mut next, cfg.sigma, &q, dt / 2.0);

    let phi = inputs.phi;
    let r_step = cfg.r_matrix() / dt;
    let s = phi * &next.p * phi.transpose() + &r_step;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::invalid("innovation covariance is singular"))?;
    let gain = &next.p * phi.transpose() * s_inv;
    let y = DVector::from_column_slice(inputs.y.as_slice());
    let innovation = y - phi * &next.a_hat;
    next.a_hat += &gain * innovation;
    let i_kh = DMatrix::identity(k, k) - &gain * phi;
    next.p = &i_kh * &next.p * i_kh.transpose() + &gain * r_step * gain.transpose();

    predict(&mut next, cfg.sigma, &q, dt / 2.0);

    let proj = inputs.b * inputs.b_dagger;
    let varphi9 = embed_velocity_rows(inputs.varphi);
    let proj_d = crate::linalg::to_dmatrix(&proj);
    let coupling = (&proj_d * varphi9).transpose()
        * crate::linalg::to_dmatrix(inputs.metric)
        * DVector::from_column_slice(inputs.e.as_slice());
    next.a_hat += &next.p * coupling * dt;

    next.p = sym(&next.p);
    let mut reset = false;
    if lambda_min(&next.p) < cfg.p_min || next.p.iter().any(|v| !v.is_finite()) {
        next.p = p0.clone();
        reset = true;
    } else {
        next.p = floor_eigenvalues(&next.p, cfg.p_min);
    }
    if next.a_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            magnitude: f64::INFINITY,
        });
    }
    Ok(AdaptStep { state: next, reset })
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut sum = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        sum += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + sum.ln()
}

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut n = a;
        for _ in 0..1000 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp()
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (log_prefix.exp() * h)
    }
}

pub fn chi2_cdf(k: usize, x: f64) -> f64 {
    regularized_gamma_p(k as f64 / 2.0, x / 2.0)
}

/// Inverse CDF of the chi-square distribution with `k` degrees of freedom.
pub fn chi2_icdf(k: usize, p: f64) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid(
            "chi-square needs at least one degree of freedom",
        ));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("probability {p} outside (0, 1)")));
    }
    let mut hi = k as f64 + 10.0 * (2.0 * k as f64).sqrt() + 10.0;
    while chi2_cdf(k, hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(k, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi.max(1e-300) {
            break;
        }
    }
    let mut x = 0.5 * (lo + hi);
    // Newton polish on the density
    let a = k as f64 / 2.0;
    for _ in 0..3 {
        if x <= 0.0 {
            break;
        }
        let log_pdf = (a - 1.0) * x.ln() - x / 2.0 - a * 2f64.ln() - ln_gamma(a);
        let pdf = log_pdf.exp();
        if !(pdf > 0.0) || !pdf.is_finite() {
            break;
        }
        let step = (chi2_cdf(k, x) - p) / pdf;
        let candidate = x - step;
        if candidate > 0.0 && candidate.is_finite() {
            x = candidate;
        }
    }
    Ok(x)
}

/// Radius of `𝒮_P`: `(χ²_k(1−δ), √(χ²_k(1−δ)/λ_min(P)))`.
pub fn uncertainty_set_radius(state: &AdaptState, delta: f64) -> Result<(f64, f64)> {
    let chi = chi2_icdf(state.a_hat.len(), 1.0 - delta)?;
    let lmin = lambda_min(&state.p);
    if !(lmin > 0.0) {
        return Err(Error::invalid("covariance is not positive definite"));
    }
    Ok((chi, (chi / lmin).sqrt()))
}

/// Envelope suprema entering `D̄`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeBounds {
    /// Unmodeled-disturbance bound `d̄`.
    pub d_bar: f64,
    /// `sup ‖φ‖`.
    pub phi_bar: f64,
    /// `λ_max(I − BB†)`.
    pub b_bar: f64,
    /// Measurement-noise bound `ε̄`.
    pub eps_bar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DBar {
    /// `D̄` with the `λ_min(P)σ` term.
    pub value: f64,
    /// Same bound with `σ/λ_min(P)` in place of `λ_min(P)σ`.
    pub inverse_variant: f64,
    /// `‖â‖ + √(χ²_k(1−δ)/λ_min(P))`.
    pub sup_a: f64,
    /// False when the steady-state precondition failed.
    pub converged: bool,
}

/// `D̄ = d̄/ω_χ + φ̄ε̄λ_max(R) + (b̄φ̄/ω_χ + λ_min(P)σ)·sup‖a‖`.
pub fn compute_d_bar(
    state: &AdaptState,
    bounds: &EnvelopeBounds,
    omega_chi: f64,
    cfg: &AdaptConfig,
    p_rate: Option<f64>,
) -> Result<DBar> {
    if !(omega_chi > 0.0) {
        return Err(Error::invalid("ω_χ must be positive"));
    }
    let (_, radius) = uncertainty_set_radius(state, cfg.delta)?;
    let sup_a = state.a_hat.norm() + radius;
    let lmin_p = lambda_min(&state.p);
    let r_max = lambda_max(&cfg.r_matrix());
    let base = bounds.d_bar / omega_chi + bounds.phi_bar * bounds.eps_bar * r_max;
    let value = base + (bounds.b_bar * bounds.phi_bar / omega_chi + lmin_p * cfg.sigma) * sup_a;
    let inverse_variant =
        base + (bounds.b_bar * bounds.phi_bar / omega_chi + cfg.sigma / lmin_p) * sup_a;
    let converged = p_rate.is_none_or(|r| r.abs() <= 1e-2 * lmin_p.max(1e-12));
    if !converged {
        log::debug!("D̄ evaluated before the covariance reached steady state");
    }
    Ok(DBar {
        value,
        inverse_variant,
        sup_a,
        converged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBoundParams {
    pub alpha_bar: f64,
    /// `λ_𝓜 = √(λ_max(𝓜)/λ_min(𝓜))`.
    pub lambda_m_ratio: f64,
    pub lambda_min_m: f64,
    pub d_bar: f64,
    pub e0: f64,
    pub a_tilde0: f64,
}

/// `ē(t) = e^{−ᾱt} λ_𝓜 (‖e(0)‖ + ã₀) + (1 − e^{−ᾱt}) D̄/(ᾱ λ_min(𝓜))`; the
/// `ᾱ → 0` limit grows linearly in `t`.
pub fn error_bound(t: f64, p: &ErrorBoundParams) -> f64 {
    let start = p.lambda_m_ratio * (p.e0 + p.a_tilde0);
    if p.alpha_bar <= 0.0 {
        return start + t * p.d_bar / p.lambda_min_m;
    }
    let decay = (-p.alpha_bar * t).exp();
    decay * start + (1.0 - decay) * p.d_bar / (p.alpha_bar * p.lambda_min_m)
}

/// `λ_𝓜` and `λ_min(𝓜)` for `𝓜 = blockdiag(M, P⁻¹)`.
pub fn lyapunov_metric_bounds(metric: &Mat9, p: &DMatrix<f64>) -> Result<(f64, f64)> {
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("covariance is singular"))?;
    let m = crate::linalg::to_dmatrix(metric);
    let lo = lambda_min(&m).min(lambda_min(&p_inv));
    let hi = lambda_max(&m).max(lambda_max(&p_inv));
    if !(lo > 0.0) {
        return Err(Error::invalid("Lyapunov metric is not positive definite"));
    }
    Ok(((hi / lo).sqrt(), lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBar {
    pub value: f64,
    pub feasible: bool,
}

/// The symmetrized block matrix `sym(Block) − 2ᾱ𝓜` whose positive semidefiniteness
/// is the coupled decay condition.
pub fn alpha_bar_lmi(
    metric: &Mat9,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_meas: &DMatrix<f64>,
    alpha: f64,
    alpha_bar: f64,
) -> Result<DMatrix<f64>> {
    let k = p.nrows();
    let p_inv = p
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("covariance is singular"))?;
    let r_inv = r_meas
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("measurement weight is singular"))?;
    let m = crate::linalg::to_dmatrix(metric);
    let phi9 = embed_velocity_rows(phi);
    let lower = &p_inv * q * &p_inv + phi.transpose() * r_inv * phi;
    let coupling = &m * &phi9;
    let mut g = DMatrix::zeros(9 + k, 9 + k);
    g.view_mut((0, 0), (9, 9))
        .copy_from(&(&m * (2.0 * (alpha - alpha_bar))));
    g.view_mut((0, 9), (9, k)).copy_from(&coupling);
    g.view_mut((9, 0), (k, 9)).copy_from(&coupling.transpose());
    g.view_mut((9, 9), (k, k))
        .copy_from(&(sym(&lower) - &p_inv * (2.0 * alpha_bar)));
    Ok(sym(&g))
}

/// Largest `ᾱ ∈ [0, α]` keeping the coupled block condition satisfied, by bisection.
pub fn compute_alpha_bar(
    metric: &Mat9,
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_meas: &DMatrix<f64>,
    alpha: f64,
) -> Result<AlphaBar> {
    let feasible = |ab: f64| -> Result<bool> {
        let g = alpha_bar_lmi(metric, p, phi, q, r_meas, alpha, ab)?;
        Ok(lambda_min(&g) >= -1e-10 * g.norm().max(1.0))
    };
    if !feasible(0.0)? {
        return Ok(AlphaBar {
            value: 0.0,
            feasible: false,
        });
    }
    // the lower block caps ᾱ at ½λ_min(P^{1/2}(P⁻¹QP⁻¹ + φᵀR⁻¹φ)P^{1/2})
    let mut hi = alpha;
    if let Some((sqrt_p, _)) = spd_sqrt_pair(p) {
        let p_inv = p.clone().try_inverse().unwrap_or_else(|| p.clone());
        let r_inv = r_meas
            .clone()
            .try_inverse()
            .unwrap_or_else(|| r_meas.clone());
        let lower = &p_inv * q * &p_inv + phi.transpose() * r_inv * phi;
        hi = hi.min(0.5 * lambda_min(&(&sqrt_p * lower * &sqrt_p)));
    }
    if feasible(hi)? {
        return Ok(AlphaBar {
            value: hi,
            feasible: true,
        });
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1e-300) {
            break;
        }
    }
    Ok(AlphaBar {
        value: lo,
        feasible: true,
    })
}

/// Flight envelope sampled for the `φ̄` and `b̄` suprema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeSpec {
    pub position_min: Vector3<f64>,
    pub position_max: Vector3<f64>,
    pub speed_max: f64,
    pub tilt_max: f64,
    pub samples: usize,
    /// Multiplicative safety factor on every sampled supremum.
    pub inflation: f64,
    pub seed: u64,
}

impl Default for EnvelopeSpec {
    fn default() -> Self {
        Self {
            position_min: Vector3::new(-3.0, -1.5, 0.0),
            position_max: Vector3::new(3.0, 1.5, 4.0),
            speed_max: 4.0,
            tilt_max: 0.6,
            samples: 100_000,
            inflation: 1.1,
            seed: 5,
        }
    }
}

impl EnvelopeSpec {
    pub fn validate(&self) -> Result<()> {
        let box_ok = (0..3).all(|i| self.position_min[i] <= self.position_max[i]);
        if !box_ok
            || !(self.speed_max >= 0.0)
            || !(self.tilt_max >= 0.0)
            || self.samples == 0
            || !(self.inflation >= 1.0)
        {
            return Err(Error::invalid(
                "envelope needs an ordered box, non-negative limits, samples and inflation ≥ 1",
            ));
        }
        Ok(())
    }

    fn sample_state(&self, rng: &mut ChaCha8Rng) -> ReducedState {
        let mut draw = |lo: f64, hi: f64| {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let p = Vector3::new(
            draw(self.position_min.x, self.position_max.x),
            draw(self.position_min.y, self.position_max.y),
            draw(self.position_min.z, self.position_max.z),
        );
        let s = self.speed_max;
        let v = Vector3::new(draw(-s, s), draw(-s, s), draw(-s, s));
        let t = self.tilt_max;
        let eta = Vector3::new(
            draw(-t, t),
            draw(-t, t),
            draw(-std::f64::consts::PI, std::f64::consts::PI),
        );
        ReducedState { p, v, eta }
    }
}

/// Envelope suprema for `D̄`: `φ̄` and `b̄` by sampling states in the envelope,
/// `d̄` as the largest training residual `‖y − φa_i‖` and `ε̄` as three times its RMS.
pub fn estimate_envelope(
    model: &MetaModel,
    datasets: &[DomainDataset],
    spec: &EnvelopeSpec,
    params: &VehicleParams,
) -> Result<EnvelopeBounds> {
    spec.validate()?;
    if datasets.len() != model.coeffs.len() {
        return Err(Error::Dimension {
            expected: model.coeffs.len(),
            got: datasets.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut phi_bar: f64 = 0.0;
    let mut b_bar: f64 = 0.0;
    for _ in 0..spec.samples {
        let x = spec.sample_state(&mut rng);
        let x_r = spec.sample_state(&mut rng);
        let phi = model.basis.forward(&x, &x_r);
        phi_bar = phi_bar.max(phi.singular_values().max());
        let b = crate::dynamics::reduced_input_matrix(&x.eta, params);
        let proj = b * crate::cbac::pseudo_inverse(&b)?;
        let complement = crate::linalg::to_dmatrix(&(Mat9::identity() - proj));
        b_bar = b_bar.max(lambda_max(&sym(&complement)));
    }
    let mut worst: f64 = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (d, a) in datasets.iter().zip(&model.coeffs) {
        for s in &d.samples {
            let r = (s.y - model.basis.predict(&s.x, &s.x_r, a)).norm();
            worst = worst.max(r);
            sq += r * r;
            n += 1;
        }
    }
    let rms = if n > 0 { (sq / n as f64).sqrt() } else { 0.0 };
    Ok(EnvelopeBounds {
        d_bar: worst * spec.inflation,
        phi_bar: phi_bar * spec.inflation,
        b_bar: b_bar * spec.inflation,
        eps_bar: 3.0 * rms,
    })
}
