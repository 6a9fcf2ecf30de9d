//! Contraction metric synthesis on a grid of planned operating points.
//!
//! At each node the metric `W̄` is constant, so the time-derivative and
//! directional-derivative conditions on `W̄` hold identically and only the
//! pointwise matrix inequality
//! `2sym(AW̄) − 2νBR⁻¹Bᵀ + 2αW̄ ⪯ 0`, `I ⪯ W̄ ⪯ ω_χ I` remains.
//! The controller uses `M = ν W̄⁻¹`, interpolated multilinearly between nodes.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    reduced_input_matrix, sdc_matrix, ReducedControl, ReducedState, VehicleParams,
};
use crate::error::{Error, Result};
use crate::linalg::{lambda_max, lambda_min, sym, to_dmatrix, Mat49, Mat9};
use crate::sdp::{find_feasible, solve_from, Feasibility, LmiBlock, SdpOptions, SdpProblem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Axis {
    pub fn values(&self) -> Vec<f64> {
        match self.count {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Planned roll `φ_d`, rad.
    pub roll: Axis,
    /// Planned pitch `θ_d`, rad.
    pub pitch: Axis,
    /// Planned thrust as a multiple of `mg`.
    pub thrust: Axis,
    /// Diagonal of the input weight `R`.
    pub r_weight: [f64; 4],
    pub omega_chi_max: f64,
    /// Upper bound on `ν`, which caps the feedback gain.
    pub nu_max: f64,
    /// Largest contraction rate tried by the line search, 1/s.
    pub alpha_max: f64,
    pub alpha_min: f64,
    /// Geometric ratio between consecutive rates in the line search.
    pub alpha_ratio: f64,
    /// Strict margin imposed on the contraction inequality.
    pub lmi_margin: f64,
    /// Relative slack on `ω_χ` allowed while minimizing `ν`.
    pub omega_slack: f64,
    /// Worker threads for node solves; zero uses the available parallelism.
    pub threads: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            roll: Axis {
                min: -0.4,
                max: 0.4,
                count: 9,
            },
            pitch: Axis {
                min: -0.4,
                max: 0.4,
                count: 9,
            },
            thrust: Axis {
                min: 0.5,
                max: 1.5,
                count: 7,
            },
            r_weight: [1.0, 5.0, 5.0, 5.0],
            omega_chi_max: 100.0,
            nu_max: 100.0,
            alpha_max: 4.0,
            alpha_min: 0.05,
            alpha_ratio: 1.25,
            lmi_margin: 1e-6,
            omega_slack: 0.1,
            threads: 0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("roll", &self.roll),
            ("pitch", &self.pitch),
            ("thrust", &self.thrust),
        ] {
            if a.count == 0 || !(a.max >= a.min) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(Error::invalid(format!(
                    "grid axis {name} is empty or reversed"
                )));
            }
        }
        if self.roll.min.abs().max(self.roll.max.abs()) >= std::f64::consts::FRAC_PI_2
            || self.pitch.min.abs().max(self.pitch.max.abs()) >= std::f64::consts::FRAC_PI_2
        {
            return Err(Error::invalid("grid attitude must stay inside (−π/2, π/2)"));
        }
        if !(self.thrust.min > 0.0) {
            return Err(Error::invalid("grid thrust must be positive"));
        }
        if self.r_weight.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("input weight must be positive"));
        }
        if !(self.omega_chi_max > 1.0) || !(self.nu_max > 0.0) {
            return Err(Error::invalid(
                "ω_χ_max must exceed 1 and ν_max must be positive",
            ));
        }
        if !(self.alpha_min > 0.0 && self.alpha_max >= self.alpha_min && self.alpha_ratio > 1.0) {
            return Err(Error::invalid(
                "α search range must be positive with ratio above 1",
            ));
        }
        if !(self.lmi_margin >= 0.0) || !(self.omega_slack >= 0.0) {
            return Err(Error::invalid("margins must be non-negative"));
        }
        Ok(())
    }

    pub fn r_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&self.r_weight.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSolveResult {
    pub w_bar: DMatrix<f64>,
    pub nu: f64,
    pub omega_chi: f64,
    pub alpha: f64,
    pub feasible: bool,
    /// Largest eigenvalue of `2sym(AW̄) − 2νBR⁻¹Bᵀ + 2αW̄`.
    pub margin: f64,
}

/// Largest eigenvalue of the contraction inequality at a stored solution.
pub fn contraction_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    w_bar: &DMatrix<f64>,
    nu: f64,
    alpha: f64,
) -> Result<f64> {
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("input weight is singular"))?;
    let aw = a * w_bar;
    let lmi = &aw + aw.transpose() - b * r_inv * b.transpose() * (2.0 * nu) + w_bar * (2.0 * alpha);
    Ok(lambda_max(&sym(&lmi)))
}

/// Certificate check: contraction residual ≤ `tol` and `I ⪯ W̄ ⪯ ω_χ I` up to `tol`.
pub fn certify(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    res: &MetricSolveResult,
    tol: f64,
) -> Result<bool> {
    let residual = contraction_residual(a, b, r, &res.w_bar, res.nu, res.alpha)?;
    let lo = lambda_min(&res.w_bar);
    let hi = lambda_max(&res.w_bar);
    Ok(residual <= tol && lo >= 1.0 - tol && hi <= res.omega_chi * (1.0 + tol) + tol)
}

struct Layout {
    n: usize,
}

impl Layout {
    fn n_w(&self) -> usize {
        self.n * (self.n + 1) / 2
    }
    fn nu(&self) -> usize {
        self.n_w()
    }
    fn omega(&self) -> usize {
        self.n_w() + 1
    }
    fn vars(&self) -> usize {
        self.n_w() + 2
    }
    /// Symmetric unit matrices spanning `W̄`.
    fn basis(&self) -> Vec<DMatrix<f64>> {
        let mut out = Vec::with_capacity(self.n_w());
        for i in 0..self.n {
            for j in i..self.n {
                let mut e = DMatrix::zeros(self.n, self.n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                out.push(e);
            }
        }
        out
    }
    fn pack(&self, w: &DMatrix<f64>, nu: f64, omega: f64) -> DVector<f64> {
        let mut z = DVector::zeros(self.vars());
        let mut idx = 0;
        for i in 0..self.n {
            for j in i..self.n {
                z[idx] = w[(i, j)];
                idx += 1;
            }
        }
        z[self.nu()] = nu;
        z[self.omega()] = omega;
        z
    }
    fn unpack(&self, z: &DVector<f64>) -> (DMatrix<f64>, f64, f64) {
        let mut w = DMatrix::zeros(self.n, self.n);
        let mut idx = 0;
        for i in 0..self.n {
            for j in i..self.n {
                w[(i, j)] = z[idx];
                w[(j, i)] = z[idx];
                idx += 1;
            }
        }
        (w, z[self.nu()], z[self.omega()])
    }
}

fn build_problem(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    omega_cap: f64,
    cfg: &MetricConfig,
    objective_omega: bool,
) -> Result<(Layout, SdpProblem)> {
    let n = a.nrows();
    let lay = Layout { n };
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::invalid("input weight is singular"))?;
    let brb = b * r_inv * b.transpose();
    let basis = lay.basis();
    let vars = lay.vars();
    let identity = DMatrix::identity(n, n);

    // −(2sym(AW̄) − 2νBR⁻¹Bᵀ + 2αW̄) − εI ≻ 0
    let mut contraction = LmiBlock {
        f0: -&identity * cfg.lmi_margin,
        fi: vec![None; vars],
    };
    // W̄ − I ≻ 0
    let mut lower = LmiBlock {
        f0: -identity.clone(),
        fi: vec![None; vars],
    };
    // ω I − W̄ ≻ 0
    let mut upper = LmiBlock {
        f0: DMatrix::zeros(n, n),
        fi: vec![None; vars],
    };
    for (idx, e) in basis.iter().enumerate() {
        let ae = a * e;
        contraction.fi[idx] = Some(-(&ae + ae.transpose()) - e * (2.0 * alpha));
        lower.fi[idx] = Some(e.clone());
        upper.fi[idx] = Some(-e);
    }
    contraction.fi[lay.nu()] = Some(&brb * 2.0);
    upper.fi[lay.omega()] = Some(identity);

    let blocks = vec![
        contraction,
        lower,
        upper,
        LmiBlock::scalar(0.0, &[(lay.nu(), 1.0)], vars),
        LmiBlock::scalar(cfg.nu_max, &[(lay.nu(), -1.0)], vars),
        LmiBlock::scalar(omega_cap, &[(lay.omega(), -1.0)], vars),
    ];
    let mut c = DVector::zeros(vars);
    if objective_omega {
        c[lay.omega()] = 1.0;
    } else {
        c[lay.nu()] = 1.0 / cfg.nu_max;
    }
    Ok((lay, SdpProblem { c, blocks }))
}

fn initial_point(lay: &Layout, cfg: &MetricConfig, omega_cap: f64) -> DVector<f64> {
    let w = DMatrix::identity(lay.n, lay.n) * 1.5_f64.min(0.5 * (1.0 + omega_cap));
    lay.pack(
        &w,
        0.5 * cfg.nu_max,
        0.5 * (1.5 + omega_cap).min(omega_cap * 0.99 + 0.01),
    )
}

fn infeasible(n: usize, alpha: f64) -> MetricSolveResult {
    MetricSolveResult {
        w_bar: DMatrix::identity(n, n),
        nu: 0.0,
        omega_chi: f64::INFINITY,
        alpha,
        feasible: false,
        margin: f64::INFINITY,
    }
}

/// Strict feasibility of the node inequality at rate `alpha` with `ω_χ ≤ ω_χ_max`.
pub fn is_feasible(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    cfg: &MetricConfig,
) -> Result<bool> {
    let (lay, problem) = build_problem(a, b, r, alpha, cfg.omega_chi_max, cfg, true)?;
    let z0 = initial_point(&lay, cfg, cfg.omega_chi_max);
    let opts = SdpOptions::default();
    Ok(matches!(
        find_feasible(&problem, &z0, 1e-9, &opts)?,
        Feasibility::Feasible(_)
    ))
}

/// Minimize `ω_χ`, then `ν` within `(1 + slack)` of the optimal `ω_χ`, at a fixed rate.
pub fn solve_metric_point(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha: f64,
    cfg: &MetricConfig,
) -> Result<MetricSolveResult> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("contraction rate must be positive"));
    }
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::Dimension {
            expected: n,
            got: b.nrows(),
        });
    }
    let opts = SdpOptions::default();
    let (lay, stage1) = build_problem(a, b, r, alpha, cfg.omega_chi_max, cfg, true)?;
    let z0 = initial_point(&lay, cfg, cfg.omega_chi_max);
    let start = match find_feasible(&stage1, &z0, 1e-9, &opts)? {
        Feasibility::Feasible(z) => z,
        Feasibility::Infeasible { .. } => return Ok(infeasible(n, alpha)),
    };
    let first = solve_from(&stage1, start, &opts)?;
    let omega_star = first.objective;
    let cap = omega_star * (1.0 + cfg.omega_slack);
    let (_, stage2) = build_problem(a, b, r, alpha, cap, cfg, false)?;
    let z = if cfg.omega_slack > 0.0 {
        solve_from(&stage2, first.z.clone(), &opts)
            .map(|s| s.z)
            .unwrap_or(first.z)
    } else {
        first.z
    };
    let (w_bar, nu, omega) = lay.unpack(&z);
    let margin = contraction_residual(a, b, r, &w_bar, nu, alpha)?;
    let result = MetricSolveResult {
        w_bar,
        nu,
        omega_chi: omega,
        alpha,
        feasible: true,
        margin,
    };
    if !certify(a, b, r, &result, 1e-8)? {
        return Ok(MetricSolveResult {
            feasible: false,
            ..result
        });
    }
    Ok(result)
}

/// Largest rate on the geometric grid `α_max / ratioᵏ` that is feasible, if any.
pub fn max_feasible_alpha(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    cfg: &MetricConfig,
    start: f64,
) -> Result<Option<f64>> {
    let mut alpha = start;
    while alpha >= cfg.alpha_min * (1.0 - 1e-12) {
        if is_feasible(a, b, r, alpha, cfg)? {
            return Ok(Some(alpha));
        }
        alpha /= cfg.alpha_ratio;
    }
    Ok(None)
}

/// Line search over `[alpha_lo, alpha_hi]` on a geometric grid; returns the largest
/// feasible rate with its solution.
pub fn line_search_alpha(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    alpha_lo: f64,
    alpha_hi: f64,
    cfg: &MetricConfig,
) -> Result<(f64, MetricSolveResult)> {
    if !(alpha_lo > 0.0 && alpha_hi >= alpha_lo) {
        return Err(Error::invalid("α range must be positive and ordered"));
    }
    let mut alpha = alpha_hi;
    loop {
        let res = solve_metric_point(a, b, r, alpha, cfg)?;
        if res.feasible {
            return Ok((alpha, res));
        }
        alpha /= cfg.alpha_ratio;
        if alpha < alpha_lo * (1.0 - 1e-12) {
            return Err(Error::NoneFeasible {
                lo: alpha_lo,
                hi: alpha_hi,
            });
        }
    }
}

/// Operating point of a grid node.
pub fn node_operating_point(
    roll: f64,
    pitch: f64,
    thrust_frac: f64,
    params: &VehicleParams,
) -> (ReducedState, ReducedControl) {
    let x = ReducedState {
        p: Vector3::zeros(),
        v: Vector3::zeros(),
        eta: Vector3::new(roll, pitch, 0.0),
    };
    let u = ReducedControl {
        f_u: thrust_frac * params.hover_thrust(),
        eta_u: Vector3::zeros(),
    };
    (x, u)
}

/// `(A, B)` of the reduced model at a node (`η̃ = 0`).
pub fn node_system(
    roll: f64,
    pitch: f64,
    thrust_frac: f64,
    params: &VehicleParams,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (x, u) = node_operating_point(roll, pitch, thrust_frac, params);
    let (a, _) = sdc_matrix(&x, &x, &u, params);
    (
        to_dmatrix(&a),
        to_dmatrix(&reduced_input_matrix(&x.eta, params)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricNode {
    pub w_bar: Mat9,
    pub nu: f64,
    pub omega_chi: f64,
    pub margin: f64,
    /// `M = ν W̄⁻¹`
    pub m: Mat9,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricField {
    pub roll: Vec<f64>,
    pub pitch: Vec<f64>,
    pub thrust: Vec<f64>,
    /// Row-major over (roll, pitch, thrust).
    pub nodes: Vec<MetricNode>,
    pub alpha: f64,
    pub r_weight: [f64; 4],
    pub vehicle: VehicleParams,
    #[serde(skip)]
    clamped_queries: AtomicUsize,
}

impl Clone for MetricField {
    fn clone(&self) -> Self {
        Self {
            roll: self.roll.clone(),
            pitch: self.pitch.clone(),
            thrust: self.thrust.clone(),
            nodes: self.nodes.clone(),
            alpha: self.alpha,
            r_weight: self.r_weight,
            vehicle: self.vehicle.clone(),
            clamped_queries: AtomicUsize::new(self.clamped_queries.load(Ordering::Relaxed)),
        }
    }
}

fn run_parallel<T: Send, F>(count: usize, threads: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync,
{
    let workers = if threads == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        threads
    }
    .min(count.max(1));
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<T>> = (0..count).map(|_| None).collect();
    let collected = std::sync::Mutex::new(Vec::with_capacity(count));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let r = f(i);
                collected.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    for (i, r) in collected.into_inner().expect("worker panicked") {
        results[i] = Some(r);
    }
    results
        .into_iter()
        .map(|r| r.expect("every node solved"))
        .collect()
}

/// Line search for the largest rate feasible at every node, then a solve of each node at that rate.
pub fn build_metric_field(cfg: &MetricConfig, params: &VehicleParams) -> Result<MetricField> {
    cfg.validate()?;
    params.validate()?;
    let roll = cfg.roll.values();
    let pitch = cfg.pitch.values();
    let thrust = cfg.thrust.values();
    let mut points = Vec::with_capacity(roll.len() * pitch.len() * thrust.len());
    for &ro in &roll {
        for &pi in &pitch {
            for &fu in &thrust {
                points.push((ro, pi, fu));
            }
        }
    }
    let r = to_dmatrix(&cfg.r_matrix());

    // Feasibility is monotone in α, so a running minimum over the nodes equals the
    // minimum of the per-node line searches while testing each node far fewer times.
    let mut alpha = cfg.alpha_max;
    for &(ro, pi, fu) in &points {
        let (a, b) = node_system(ro, pi, fu, params);
        match max_feasible_alpha(&a, &b, &r, cfg, alpha)? {
            Some(v) => alpha = v,
            None => {
                return Err(Error::NoneFeasible {
                    lo: cfg.alpha_min,
                    hi: cfg.alpha_max,
                })
            }
        }
    }
    log::info!(
        "metric grid of {} nodes certified at α = {alpha:.4}",
        points.len()
    );

    let solved = run_parallel(points.len(), cfg.threads, |i| {
        let (ro, pi, fu) = points[i];
        let (a, b) = node_system(ro, pi, fu, params);
        solve_metric_point(&a, &b, &r, alpha, cfg)
    });
    let mut nodes = Vec::with_capacity(points.len());
    for res in solved {
        let res = res?;
        if !res.feasible {
            return Err(Error::NoneFeasible {
                lo: alpha,
                hi: alpha,
            });
        }
        let w_bar = Mat9::from_iterator(res.w_bar.iter().copied());
        let m = w_bar
            .try_inverse()
            .ok_or_else(|| Error::Sdp("stored metric is singular".into()))?
            * res.nu;
        nodes.push(MetricNode {
            w_bar,
            nu: res.nu,
            omega_chi: res.omega_chi,
            margin: res.margin,
            m: crate::linalg::sym9(&m),
        });
    }
    Ok(MetricField {
        roll,
        pitch,
        thrust,
        nodes,
        alpha,
        r_weight: cfg.r_weight,
        vehicle: params.clone(),
        clamped_queries: AtomicUsize::new(0),
    })
}

/// Bracketing index and weight of `v` on a sorted axis, clamped to the hull.
fn bracket(axis: &[f64], v: f64) -> (usize, usize, f64, bool) {
    let n = axis.len();
    if n == 1 {
        return (0, 0, 0.0, v != axis[0]);
    }
    let clamped = v < axis[0] || v > axis[n - 1] || v.is_nan();
    let v = if v.is_nan() {
        axis[0]
    } else {
        v.clamp(axis[0], axis[n - 1])
    };
    let mut i = axis.partition_point(|a| *a <= v).saturating_sub(1);
    if i >= n - 1 {
        i = n - 2;
    }
    let w = (v - axis[i]) / (axis[i + 1] - axis[i]);
    (i, i + 1, w, clamped)
}

impl MetricField {
    pub fn node_index(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.pitch.len() + j) * self.thrust.len() + l
    }

    pub fn node_coordinates(&self, idx: usize) -> (f64, f64, f64) {
        let nt = self.thrust.len();
        let np = self.pitch.len();
        let l = idx % nt;
        let j = (idx / nt) % np;
        let i = idx / (nt * np);
        (self.roll[i], self.pitch[j], self.thrust[l])
    }

    pub fn r_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&self.r_weight.into())
    }

    /// Number of queries that fell outside the grid hull and were clamped.
    pub fn clamped_queries(&self) -> usize {
        self.clamped_queries.load(Ordering::Relaxed)
    }

    /// Largest node `ω_χ`.
    pub fn omega_chi(&self) -> f64 {
        self.nodes.iter().map(|n| n.omega_chi).fold(1.0, f64::max)
    }

    pub fn validate_shape(&self) -> Result<()> {
        let expected = self.roll.len() * self.pitch.len() * self.thrust.len();
        if expected == 0 || self.nodes.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: self.nodes.len(),
            });
        }
        for axis in [&self.roll, &self.pitch, &self.thrust] {
            if axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::invalid("grid axes must be strictly increasing"));
            }
        }
        if !(self.alpha > 0.0) || self.r_weight.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid(
                "metric field needs positive α and input weights",
            ));
        }
        Ok(())
    }

    /// Multilinear interpolation of `M` at the planned attitude and thrust.
    pub fn metric_at(&self, x_d: &ReducedState, u_d: &ReducedControl) -> Mat9 {
        let frac = u_d.f_u / self.vehicle.hover_thrust();
        let (i0, i1, wi, ci) = bracket(&self.roll, x_d.eta.x);
        let (j0, j1, wj, cj) = bracket(&self.pitch, x_d.eta.y);
        let (l0, l1, wl, cl) = bracket(&self.thrust, frac);
        if ci || cj || cl {
            let n = self.clamped_queries.fetch_add(1, Ordering::Relaxed);
            if n == 0 {
                log::warn!("metric query outside the grid hull was clamped");
            }
        }
        let mut m = Mat9::zeros();
        for (i, a) in [(i0, 1.0 - wi), (i1, wi)] {
            for (j, b) in [(j0, 1.0 - wj), (j1, wj)] {
                for (l, c) in [(l0, 1.0 - wl), (l1, wl)] {
                    let w = a * b * c;
                    if w != 0.0 {
                        m += self.nodes[self.node_index(i, j, l)].m * w;
                    }
                }
            }
        }
        m
    }

    /// `K = R⁻¹ B(x)ᵀ M(x_d, u_d)`.
    pub fn gain(&self, x: &ReducedState, x_d: &ReducedState, u_d: &ReducedControl) -> Mat49 {
        let b = reduced_input_matrix(&x.eta, &self.vehicle);
        let r_inv = Matrix4::from_diagonal(&self.r_weight.map(|r| 1.0 / r).into());
        r_inv * b.transpose() * self.metric_at(x_d, u_d)
    }

    /// Re-check every stored node: contraction residual, `I ⪯ W̄ ⪯ ω_χ I` and the
    /// `M = νW̄⁻¹` reconstruction. Returns the indices of failing nodes.
    pub fn verify(&self, tol: f64) -> Result<Vec<usize>> {
        self.validate_shape()?;
        let r = to_dmatrix(&self.r_matrix());
        let mut failing = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let (ro, pi, fu) = self.node_coordinates(idx);
            let (a, b) = node_system(ro, pi, fu, &self.vehicle);
            let res = MetricSolveResult {
                w_bar: to_dmatrix(&node.w_bar),
                nu: node.nu,
                omega_chi: node.omega_chi,
                alpha: self.alpha,
                feasible: true,
                margin: node.margin,
            };
            let certified = certify(&a, &b, &r, &res, tol)?;
            let reconstructed = node.m.try_inverse().map(|mi| mi * node.nu);
            let consistent = reconstructed
                .map(|w| {
                    (w - node.w_bar).norm()
                        <= 1e-10 * node.w_bar.norm().max(1.0) * node.omega_chi.max(1.0)
                })
                .unwrap_or(false);
            if !certified || !consistent {
                failing.push(idx);
            }
        }
        Ok(failing)
    }
}
