//! Disturbance-aware trajectory planner: direct multiple shooting solved by a
//! Gauss–Newton SQP with condensed box-constrained QP subproblems.
//!
//! State constraints (obstacles eroded by `ē`, tilt and speed boxes) are handled
//! by an augmented Lagrangian around the SQP; the terminal goal set is a soft
//! penalty on the distance beyond `ε_l`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    reduced_derivative, reduced_input_matrix, rk4, thrust_axis, thrust_axis_jacobian,
    ReducedControl, ReducedState, VehicleParams,
};
use crate::error::{Error, Result};
use crate::linalg::{wrap_angle, Mat4, Mat9, Mat94, Vec4, Vec9};
use crate::nn::MlpBasis;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Obstacle {
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Unsafe side is `n·p < offset`; `normal` is normalized on use.
    HalfSpace {
        normal: Vector3<f64>,
        offset: f64,
    },
}

impl Obstacle {
    /// Signed distance from `p` to the obstacle and its gradient.
    pub fn signed_distance(&self, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Obstacle::Sphere { center, radius } => {
                let d = p - center;
                let n = d.norm();
                let grad = if n > 1e-12 { d / n } else { Vector3::z() };
                (n - radius, grad)
            }
            Obstacle::HalfSpace { normal, offset } => {
                let n = normal.norm().max(1e-300);
                let unit = normal / n;
                (unit.dot(p) - offset / n, unit)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Planning step, s.
    pub dt: f64,
    pub q_diag: [f64; 9],
    pub r_diag: [f64; 4],
    /// Terminal goal radius `ε_l`, m.
    pub goal_radius: f64,
    /// Penalty weight on the terminal distance beyond the goal radius.
    pub goal_weight: f64,
    pub obstacles: Vec<Obstacle>,
    /// Bound on planned roll and pitch, rad.
    pub tilt_max: f64,
    /// Bound on each planned velocity component, m/s.
    pub speed_max: f64,
    pub max_iter: usize,
    /// Converged when the largest input step falls below this.
    pub step_tol: f64,
    /// Largest dynamics defect and constraint violation of a solved plan.
    pub feasibility_tol: f64,
    pub al_rho: f64,
    pub al_outer: usize,
    /// Weight on the `ℓ₁` defect norm in the merit function.
    pub merit_weight: f64,
    /// Replanning period, s.
    pub replan_period: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q_diag: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1],
            r_diag: [0.1, 1.0, 1.0, 1.0],
            goal_radius: 0.1,
            goal_weight: 100.0,
            obstacles: Vec::new(),
            tilt_max: 0.6,
            // p99 per-axis speed of the default training data is 2.1 m/s
            speed_max: 2.0,
            max_iter: 30,
            step_tol: 1e-6,
            feasibility_tol: 1e-6,
            al_rho: 1e3,
            al_outer: 20,
            merit_weight: 1e3,
            replan_period: 0.2,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::invalid("planning horizon must be at least 2"));
        }
        if !(self.dt > 0.0) || !(self.replan_period > 0.0) {
            return Err(Error::invalid(
                "planning step and replanning period must be positive",
            ));
        }
        if self.q_diag.iter().any(|q| !(*q > 0.0)) || self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("MPC weights must be positive definite"));
        }
        if !(self.goal_radius > 0.0) || !(self.goal_weight >= 0.0) {
            return Err(Error::invalid("goal radius must be positive"));
        }
        if !(self.tilt_max > 0.0 && self.tilt_max < std::f64::consts::FRAC_PI_2)
            || !(self.speed_max > 0.0)
        {
            return Err(Error::invalid(
                "state box must be nonempty and inside the Euler box",
            ));
        }
        if self.max_iter == 0
            || self.al_outer == 0
            || !(self.al_rho > 0.0)
            || !(self.merit_weight > 0.0)
        {
            return Err(Error::invalid("solver settings must be positive"));
        }
        for o in &self.obstacles {
            if let Obstacle::Sphere { radius, .. } = o {
                if !(*radius > 0.0) {
                    return Err(Error::invalid("sphere obstacles need a positive radius"));
                }
            }
        }
        Ok(())
    }

    pub fn q_matrix(&self) -> Mat9 {
        Mat9::from_diagonal(&self.q_diag.into())
    }

    pub fn r_matrix(&self) -> Mat4 {
        Mat4::from_diagonal(&self.r_diag.into())
    }
}

/// Discrete dynamics `x_{k+1} = F_k(x_k, u_k)` with Jacobians.
pub trait ShootingModel {
    fn step(&self, k: usize, x: &Vec9, u: &Vec4) -> Vec9;
    /// `(F_k(x, u), ∂F/∂x, ∂F/∂u)`
    fn linearize(&self, k: usize, x: &Vec9, u: &Vec4) -> (Vec9, Mat9, Mat94);
    /// Input the stage cost is centred on at stage `k` for reference node `x_ref`.
    fn input_reference(&self, _k: usize, _x_ref: &Vec9, hover: &Vec4) -> Vec4 {
        *hover
    }
}

/// Reduced model augmented with the learned disturbance `φ(x, x_r) â`.
pub struct AugmentedModel<'a> {
    pub params: &'a VehicleParams,
    pub learned: Option<(&'a MlpBasis, &'a DVector<f64>)>,
    /// Reference held over each step, one per stage.
    pub x_r: &'a [ReducedState],
    pub dt: f64,
}

impl AugmentedModel<'_> {
    fn reference(&self, k: usize) -> &ReducedState {
        &self.x_r[k.min(self.x_r.len() - 1)]
    }

    fn accel(&self, x: &ReducedState, x_r: &ReducedState) -> Vector3<f64> {
        match self.learned {
            Some((model, a)) => model.predict(x, x_r, a),
            None => Vector3::zeros(),
        }
    }

    fn continuous(&self, x: &Vec9, u: &ReducedControl, x_r: &ReducedState) -> (Vec9, Mat9, Mat94) {
        let s = ReducedState::from_vector(x);
        let mut fx = Mat9::zeros();
        fx.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&Matrix3::identity());
        fx.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(thrust_axis_jacobian(&s.eta) * (u.f_u / self.params.mass)));
        let accel = match self.learned {
            Some((model, a)) => {
                let (value, jac) = model.predict_with_jacobian(&s, x_r, a);
                let mut rows = fx.fixed_view_mut::<3, 9>(3, 0);
                rows += jac;
                value
            }
            None => Vector3::zeros(),
        };
        (
            reduced_derivative(&s, u, &accel, self.params),
            fx,
            reduced_input_matrix(&s.eta, self.params),
        )
    }
}

impl ShootingModel for AugmentedModel<'_> {
    fn step(&self, k: usize, x: &Vec9, u: &Vec4) -> Vec9 {
        let x_r = self.reference(k);
        let u = ReducedControl::from_vector(u);
        rk4(
            |z: &Vec9| {
                let s = ReducedState::from_vector(z);
                reduced_derivative(&s, &u, &self.accel(&s, x_r), self.params)
            },
            x,
            self.dt,
        )
    }

    /// Thrust holding `x_ref` at rest against gravity and the predicted disturbance.
    fn input_reference(&self, k: usize, x_ref: &Vec9, hover: &Vec4) -> Vec4 {
        let s = ReducedState::from_vector(x_ref);
        let need = Vector3::new(0.0, 0.0, self.params.gravity) - self.accel(&s, self.reference(k));
        let f = self.params.mass * thrust_axis(&s.eta).dot(&need);
        let mut u = *hover;
        u[0] = f.clamp(0.0, self.params.f_max);
        u
    }

    fn linearize(&self, k: usize, x: &Vec9, u: &Vec4) -> (Vec9, Mat9, Mat94) {
        let x_r = self.reference(k);
        let uc = ReducedControl::from_vector(u);
        let h = self.dt;
        let i9 = Mat9::identity();
        let (k1, a1, b1) = self.continuous(x, &uc, x_r);
        let (k2, a2, b2) = self.continuous(&(x + k1 * (h / 2.0)), &uc, x_r);
        let dk1x = a1;
        let dk1u = b1;
        let dk2x = a2 * (i9 + dk1x * (h / 2.0));
        let dk2u = a2 * dk1u * (h / 2.0) + b2;
        let (k3, a3, b3) = self.continuous(&(x + k2 * (h / 2.0)), &uc, x_r);
        let dk3x = a3 * (i9 + dk2x * (h / 2.0));
        let dk3u = a3 * dk2u * (h / 2.0) + b3;
        let (k4, a4, b4) = self.continuous(&(x + k3 * h), &uc, x_r);
        let dk4x = a4 * (i9 + dk3x * h);
        let dk4u = a4 * dk3u * h + b4;
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let fx = i9 + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * (h / 6.0);
        let fu = (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * (h / 6.0);
        (next, fx, fu)
    }
}

/// One RK4 step of `ẋ_d = f(x_d) + B(x_d)u_d + φ(x_d, x_r)â`, with the network
/// evaluated at every stage.
pub fn discretize_augmented(
    x_d: &ReducedState,
    u_d: &ReducedControl,
    x_r: &ReducedState,
    learned: Option<(&MlpBasis, &DVector<f64>)>,
    dt: f64,
    params: &VehicleParams,
) -> ReducedState {
    let refs = [*x_r];
    let model = AugmentedModel {
        params,
        learned,
        x_r: &refs,
        dt,
    };
    ReducedState::from_vector(&model.step(0, &x_d.to_vector(), &u_d.to_vector()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Solved,
    MaxIter,
    /// Eroded safety constraints could not be met; the plan brakes to hover.
    InfeasibleRelaxed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// Planner time of the first node, s.
    pub t0: f64,
    pub dt: f64,
    pub x: Vec<ReducedState>,
    pub u: Vec<ReducedControl>,
    pub cost: f64,
    pub status: PlanStatus,
    pub kkt_residual: f64,
    /// Accepted SQP steps.
    pub iterations: usize,
    pub max_defect: f64,
    pub max_violation: f64,
    /// Merit value after each accepted step, one run per multiplier update.
    pub merit_history: Vec<Vec<f64>>,
}

impl PlanResult {
    pub fn horizon(&self) -> usize {
        self.u.len()
    }

    /// Linear interpolation of the planned state and zero-order hold of the input at `t`.
    pub fn sample(&self, t: f64) -> (ReducedState, ReducedControl) {
        let n = self.u.len();
        let s = ((t - self.t0) / self.dt).clamp(0.0, n as f64);
        let k = (s.floor() as usize).min(n - 1);
        let w = s - k as f64;
        let x = self.x[k].to_vector() * (1.0 - w) + self.x[k + 1].to_vector() * w;
        (ReducedState::from_vector(&x), self.u[k])
    }

    /// Drop the first `steps` nodes and repeat the last one, as a warm start.
    pub fn shifted(&self, steps: usize) -> PlanResult {
        let n = self.u.len();
        let steps = steps.min(n);
        let mut x: Vec<ReducedState> = self.x[steps..].to_vec();
        let mut u: Vec<ReducedControl> = self.u[steps..].to_vec();
        while x.len() < n + 1 {
            x.push(x.last().cloned().unwrap_or_else(|| self.x[n]));
        }
        while u.len() < n {
            u.push(u.last().cloned().unwrap_or_else(|| self.u[n - 1]));
        }
        PlanResult {
            t0: self.t0 + steps as f64 * self.dt,
            x,
            u,
            merit_history: Vec::new(),
            ..self.clone()
        }
    }
}

/// Scalar constraint `h(x) ≥ 0` with its gradient.
struct Inequality {
    value: f64,
    grad: Vec9,
}

fn stage_constraints(cfg: &MpcConfig, e_bar: f64, x: &Vec9) -> Vec<Inequality> {
    let mut out = Vec::with_capacity(cfg.obstacles.len() + 10);
    let p = Vector3::new(x[0], x[1], x[2]);
    for o in &cfg.obstacles {
        let (d, g) = o.signed_distance(&p);
        let mut grad = Vec9::zeros();
        grad.fixed_rows_mut::<3>(0).copy_from(&g);
        out.push(Inequality {
            value: d - e_bar,
            grad,
        });
    }
    for (idx, bound) in [
        (6, cfg.tilt_max),
        (7, cfg.tilt_max),
        (3, cfg.speed_max),
        (4, cfg.speed_max),
        (5, cfg.speed_max),
    ] {
        for sign in [1.0, -1.0] {
            let mut grad = Vec9::zeros();
            grad[idx] = -sign;
            out.push(Inequality {
                value: bound - sign * x[idx],
                grad,
            });
        }
    }
    out
}

struct Problem<'a> {
    cfg: &'a MpcConfig,
    refs: Vec<Vec9>,
    e_bar: &'a [f64],
    /// Stage input references, one per stage `0..N`.
    u_ref: Vec<Vec4>,
    u_lb: Vec4,
    u_ub: Vec4,
    sqrt_q: Mat9,
    r: Mat4,
    /// Multipliers per stage `1..=N`, per constraint.
    lambda: Vec<Vec<f64>>,
    rho: f64,
}

const MAX_PENALTY: f64 = 1e8;

/// Stacked least-squares residuals of stage `k ≥ 1` and their Jacobian.
fn stage_residuals(p: &Problem<'_>, k: usize, x: &Vec9) -> (DVector<f64>, DMatrix<f64>) {
    let n = p.cfg.horizon;
    let mut diff = x - p.refs[k];
    for i in 6..9 {
        diff[i] = wrap_angle(diff[i]);
    }
    let cons = stage_constraints(p.cfg, p.e_bar[k.min(p.e_bar.len() - 1)], x);
    let extra = usize::from(k == n);
    let rows = 9 + cons.len() + extra;
    let mut r = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, 9);
    r.rows_mut(0, 9).copy_from(&(p.sqrt_q * diff));
    j.view_mut((0, 0), (9, 9)).copy_from(&p.sqrt_q);
    let rho = p.rho;
    let sr = rho.sqrt();
    for (i, c) in cons.iter().enumerate() {
        let lam = p.lambda[k - 1][i];
        let shifted = lam - rho * c.value;
        if shifted > 0.0 {
            r[9 + i] = shifted / sr;
            j.row_mut(9 + i).copy_from(&(-c.grad.transpose() * sr));
        }
    }
    if k == n && p.cfg.goal_weight > 0.0 {
        let d = Vector3::new(diff[0], diff[1], diff[2]);
        let dist = d.norm();
        if dist > p.cfg.goal_radius {
            let w = p.cfg.goal_weight.sqrt();
            r[rows - 1] = w * (dist - p.cfg.goal_radius);
            let g = d / dist * w;
            j[(rows - 1, 0)] = g.x;
            j[(rows - 1, 1)] = g.y;
            j[(rows - 1, 2)] = g.z;
        }
    }
    (r, j)
}

fn objective(p: &Problem<'_>, xs: &[Vec9], us: &[Vec4]) -> f64 {
    let mut total = 0.0;
    for (k, x) in xs.iter().enumerate().skip(1) {
        total += stage_residuals(p, k, x).0.norm_squared();
    }
    for (u, u_ref) in us.iter().zip(&p.u_ref) {
        let du = u - u_ref;
        total += du.dot(&(p.r * du));
    }
    total
}

/// Plain tracking cost `J` without penalty terms, including the fixed first stage.
fn tracking_cost(cfg: &MpcConfig, refs: &[Vec9], u_ref: &[Vec4], xs: &[Vec9], us: &[Vec4]) -> f64 {
    let q = cfg.q_matrix();
    let r = cfg.r_matrix();
    let mut total = 0.0;
    for (x, xr) in xs.iter().zip(refs) {
        let mut d = x - xr;
        for i in 6..9 {
            d[i] = wrap_angle(d[i]);
        }
        total += d.dot(&(q * d));
    }
    for (u, u_ref) in us.iter().zip(u_ref) {
        let du = u - u_ref;
        total += du.dot(&(r * du));
    }
    total
}

fn defects<M: ShootingModel>(model: &M, xs: &[Vec9], us: &[Vec4]) -> Vec<Vec9> {
    us.iter()
        .enumerate()
        .map(|(k, u)| model.step(k, &xs[k], u) - xs[k + 1])
        .collect()
}

fn l1(ds: &[Vec9]) -> f64 {
    ds.iter().map(|d| d.abs().sum()).sum()
}

fn max_violation(cfg: &MpcConfig, e_bar: &[f64], xs: &[Vec9]) -> f64 {
    xs.iter()
        .enumerate()
        .skip(1)
        .flat_map(|(k, x)| stage_constraints(cfg, e_bar[k.min(e_bar.len() - 1)], x))
        .map(|c| (-c.value).max(0.0))
        .fold(0.0, f64::max)
}

/// Box-constrained convex QP `min ½dᵀHd + gᵀd, lb ≤ d ≤ ub` by projected Newton
/// with an active set.
pub fn solve_box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = g.len();
    let q = |d: &DVector<f64>| 0.5 * d.dot(&(h * d)) + g.dot(d);
    let project = |d: &DVector<f64>| d.zip_zip_map(lb, ub, |v, l, u| v.clamp(l, u));
    let mut d = project(&DVector::zeros(n));
    for _ in 0..200 {
        let grad = h * &d + g;
        let eps = 1e-12;
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((d[i] <= lb[i] + eps && grad[i] > 0.0) || (d[i] >= ub[i] - eps && grad[i] < 0.0))
            })
            .collect();
        let stationarity = free.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
        if stationarity <= 1e-12 * (1.0 + g.amax()) {
            return Ok(d);
        }
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let gf = DVector::from_fn(free.len(), |a, _| grad[free[a]]);
        let step = hf
            .cholesky()
            .ok_or_else(|| Error::invalid("QP Hessian is not positive definite"))?
            .solve(&(-gf));
        let mut dir = DVector::zeros(n);
        for (a, &i) in free.iter().enumerate() {
            dir[i] = step[a];
        }
        let q0 = q(&d);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let trial = project(&(&d + &dir * t));
            if q(&trial) <= q0 + 1e-4 * grad.dot(&(&trial - &d)) {
                moved = (&trial - &d).amax() > 0.0;
                d = trial;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return Ok(d);
        }
    }
    Ok(d)
}

struct Linearization {
    xs_next: Vec<Vec9>,
    a: Vec<Mat9>,
    b: Vec<Mat94>,
}

struct QpStep {
    du: Vec<Vec4>,
    dx: Vec<Vec9>,
    predicted: f64,
    kkt: f64,
}

fn condensed_step(
    p: &Problem<'_>,
    xs: &[Vec9],
    us: &[Vec4],
    lin: &Linearization,
) -> Result<QpStep> {
    let n = p.cfg.horizon;
    let nu = 4 * n;
    // dx_k = S_k du + s_k
    let mut s_mat = vec![DMatrix::<f64>::zeros(9, nu)];
    let mut s_vec = vec![Vec9::zeros()];
    for k in 0..n {
        let c = lin.xs_next[k] - xs[k + 1];
        let a = crate::linalg::to_dmatrix(&lin.a[k]);
        let mut next = &a * &s_mat[k];
        next.view_mut((0, 4 * k), (9, 4))
            .copy_from(&crate::linalg::to_dmatrix(&lin.b[k]));
        s_mat.push(next);
        s_vec.push(lin.a[k] * s_vec[k] + c);
    }
    let mut h = DMatrix::zeros(nu, nu);
    let mut g = DVector::zeros(nu);
    let mut model_at_zero = 0.0;
    let mut residuals = Vec::with_capacity(n);
    for k in 1..=n {
        let (r, j) = stage_residuals(p, k, &xs[k]);
        let js = &j * &s_mat[k];
        let r0 = &r + &j * DVector::from_column_slice(s_vec[k].as_slice());
        h += js.transpose() * &js;
        g += js.transpose() * &r0;
        model_at_zero += r0.norm_squared();
        residuals.push((r0, js));
    }
    let mut lb = DVector::zeros(nu);
    let mut ub = DVector::zeros(nu);
    for k in 0..n {
        let du_ref = us[k] - p.u_ref[k];
        let rd = p.r * du_ref;
        for i in 0..4 {
            h[(4 * k + i, 4 * k + i)] += p.r[(i, i)];
            g[4 * k + i] += rd[i];
            lb[4 * k + i] = p.u_lb[i] - us[k][i];
            ub[4 * k + i] = p.u_ub[i] - us[k][i];
        }
        model_at_zero += du_ref.dot(&rd);
    }
    let d = solve_box_qp(&h, &g, &lb, &ub)?;
    let model_at_d = model_at_zero + 2.0 * g.dot(&d) + d.dot(&(&h * &d));
    let grad = &h * &d + &g;
    let kkt = (0..nu)
        .map(|i| {
            let at_lb = d[i] <= lb[i] + 1e-12 && grad[i] > 0.0;
            let at_ub = d[i] >= ub[i] - 1e-12 && grad[i] < 0.0;
            if at_lb || at_ub {
                0.0
            } else {
                grad[i].abs()
            }
        })
        .fold(0.0, f64::max);
    let du: Vec<Vec4> = (0..n)
        .map(|k| Vec4::from_column_slice(&d.as_slice()[4 * k..4 * k + 4]))
        .collect();
    let dx: Vec<Vec9> = (0..=n)
        .map(|k| {
            let v = &s_mat[k] * &d;
            Vec9::from_column_slice(v.as_slice()) + s_vec[k]
        })
        .collect();
    Ok(QpStep {
        du,
        dx,
        predicted: model_at_zero - model_at_d,
        kkt,
    })
}

/// Inputs describing one planning problem.
pub struct PlanRequest<'a> {
    /// Planner time of the first node, s.
    pub t0: f64,
    /// Initial state of the plan (held fixed).
    pub x0: &'a ReducedState,
    /// `x_r(t0 + k·dt)`, `k = 0..=N`.
    pub x_r: &'a [ReducedState],
    /// `ē(t_k)` per node, `k = 0..=N`; shorter slices repeat their last entry.
    pub e_bar: &'a [f64],
    pub warm: Option<&'a PlanResult>,
}

/// Solve the planning problem for a generic discrete model.
pub fn solve_with_model<M: ShootingModel>(
    model: &M,
    req: &PlanRequest<'_>,
    cfg: &MpcConfig,
    params: &VehicleParams,
) -> Result<PlanResult> {
    cfg.validate()?;
    let n = cfg.horizon;
    if req.x_r.len() != n + 1 {
        return Err(Error::Dimension {
            expected: n + 1,
            got: req.x_r.len(),
        });
    }
    if !req.x0.is_finite() {
        return Err(Error::invalid("plan seed must be finite"));
    }
    let zero_e_bar = [0.0];
    let e_bar = if req.e_bar.is_empty() {
        &zero_e_bar[..]
    } else {
        req.e_bar
    };
    let hover = ReducedControl::hover(params).to_vector();
    let mut problem = Problem {
        cfg,
        refs: req.x_r.iter().map(|s| s.to_vector()).collect(),
        e_bar,
        u_ref: req
            .x_r
            .iter()
            .take(n)
            .enumerate()
            .map(|(k, s)| model.input_reference(k, &s.to_vector(), &hover))
            .collect(),
        u_lb: Vec4::new(
            0.0,
            -params.euler_rate_max,
            -params.euler_rate_max,
            -params.euler_rate_max,
        ),
        u_ub: Vec4::new(
            params.f_max,
            params.euler_rate_max,
            params.euler_rate_max,
            params.euler_rate_max,
        ),
        sqrt_q: Mat9::from_diagonal(&cfg.q_diag.map(f64::sqrt).into()),
        r: cfg.r_matrix(),
        lambda: Vec::new(),
        rho: cfg.al_rho,
    };
    let n_cons = stage_constraints(cfg, 0.0, &req.x0.to_vector()).len();
    problem.lambda = vec![vec![0.0; n_cons]; n];

    let (mut xs, mut us): (Vec<Vec9>, Vec<Vec4>) = match req.warm {
        Some(w) if w.u.len() == n => (
            w.x.iter().map(|s| s.to_vector()).collect(),
            w.u.iter().map(|u| u.to_vector()).collect(),
        ),
        _ => (vec![req.x0.to_vector(); n + 1], vec![hover; n]),
    };
    xs[0] = req.x0.to_vector();
    for u in us.iter_mut() {
        *u = u.zip_zip_map(&problem.u_lb, &problem.u_ub, |v, l, h| v.clamp(l, h));
    }

    let mut iterations = 0;
    let mut last_violation = f64::INFINITY;
    let mut merit_history = Vec::with_capacity(cfg.al_outer);
    let mut kkt = f64::INFINITY;
    let mut converged = false;
    for _outer in 0..cfg.al_outer {
        let mut history = Vec::new();
        converged = false;
        for _ in 0..cfg.max_iter {
            let mut lin = Linearization {
                xs_next: Vec::with_capacity(n),
                a: Vec::with_capacity(n),
                b: Vec::with_capacity(n),
            };
            for k in 0..n {
                let (next, a, b) = model.linearize(k, &xs[k], &us[k]);
                lin.xs_next.push(next);
                lin.a.push(a);
                lin.b.push(b);
            }
            let current_defects: Vec<Vec9> = (0..n).map(|k| lin.xs_next[k] - xs[k + 1]).collect();
            let mu = cfg.merit_weight;
            let merit0 = objective(&problem, &xs, &us) + mu * l1(&current_defects);
            if history.is_empty() {
                history.push(merit0);
            }
            let step = condensed_step(&problem, &xs, &us, &lin)?;
            kkt = step.kkt;
            let largest = step.du.iter().map(|d| d.amax()).fold(0.0, f64::max);
            let defect_max = current_defects.iter().map(|d| d.amax()).fold(0.0, f64::max);
            if largest <= cfg.step_tol && defect_max <= 1e-3 * cfg.feasibility_tol {
                converged = true;
                break;
            }
            let slope = -(step.predicted.max(0.0)) - mu * l1(&current_defects);
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..30 {
                let xt: Vec<Vec9> = xs
                    .iter()
                    .zip(&step.dx)
                    .map(|(x, d)| x + d * alpha)
                    .collect();
                let ut: Vec<Vec4> = us
                    .iter()
                    .zip(&step.du)
                    .map(|(u, d)| u + d * alpha)
                    .collect();
                let merit = objective(&problem, &xt, &ut) + mu * l1(&defects(model, &xt, &ut));
                if merit.is_finite() && merit <= merit0 + 1e-4 * alpha * slope {
                    accepted = Some((xt, ut, merit));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((xt, ut, merit)) => {
                    iterations += 1;
                    xs = xt;
                    us = ut;
                    history.push(merit);
                }
                None => break,
            }
        }
        merit_history.push(history);
        let violation = max_violation(cfg, e_bar, &xs);
        if violation <= cfg.feasibility_tol {
            break;
        }
        for k in 1..=n {
            let cons = stage_constraints(cfg, e_bar[k.min(e_bar.len() - 1)], &xs[k]);
            for (i, c) in cons.iter().enumerate() {
                problem.lambda[k - 1][i] =
                    (problem.lambda[k - 1][i] - problem.rho * c.value).max(0.0);
            }
        }
        if violation > 0.25 * last_violation {
            problem.rho = (problem.rho * 10.0).min(MAX_PENALTY);
        }
        last_violation = violation;
    }

    let final_defects = defects(model, &xs, &us);
    let max_defect = final_defects.iter().map(|d| d.amax()).fold(0.0, f64::max);
    let violation = max_violation(cfg, e_bar, &xs);
    let obstacle_violation = xs
        .iter()
        .enumerate()
        .skip(1)
        .flat_map(|(k, x)| {
            let p = Vector3::new(x[0], x[1], x[2]);
            let eb = e_bar[k.min(e_bar.len() - 1)];
            cfg.obstacles
                .iter()
                .map(move |o| (eb - o.signed_distance(&p).0).max(0.0))
        })
        .fold(0.0, f64::max);
    if obstacle_violation > 1e3 * cfg.feasibility_tol.max(1e-9) {
        log::warn!(
            "eroded safety set unreachable (violation {obstacle_violation:.3e}); braking to hover"
        );
        return Ok(brake_plan(
            req,
            cfg,
            params,
            iterations,
            max_defect,
            violation,
            merit_history,
        ));
    }
    let status =
        if converged && max_defect <= cfg.feasibility_tol && violation <= cfg.feasibility_tol {
            PlanStatus::Solved
        } else {
            PlanStatus::MaxIter
        };
    Ok(PlanResult {
        t0: req.t0,
        dt: cfg.dt,
        cost: tracking_cost(cfg, &problem.refs, &problem.u_ref, &xs, &us),
        x: xs.iter().map(ReducedState::from_vector).collect(),
        u: us.iter().map(ReducedControl::from_vector).collect(),
        status,
        kkt_residual: kkt.max(max_defect),
        iterations,
        max_defect,
        max_violation: violation,
        merit_history,
    })
}

fn brake_plan(
    req: &PlanRequest<'_>,
    cfg: &MpcConfig,
    params: &VehicleParams,
    iterations: usize,
    max_defect: f64,
    violation: f64,
    merit_history: Vec<Vec<f64>>,
) -> PlanResult {
    let hold = ReducedState {
        p: req.x0.p,
        v: Vector3::zeros(),
        eta: Vector3::new(0.0, 0.0, req.x0.eta.z),
    };
    PlanResult {
        t0: req.t0,
        dt: cfg.dt,
        x: vec![hold; cfg.horizon + 1],
        u: vec![ReducedControl::hover(params); cfg.horizon],
        cost: f64::NAN,
        status: PlanStatus::InfeasibleRelaxed,
        kkt_residual: f64::NAN,
        iterations,
        max_defect,
        max_violation: violation,
        merit_history,
    }
}

/// Plan with the reduced model augmented by the learned disturbance estimate.
pub fn solve(
    req: &PlanRequest<'_>,
    learned: Option<(&MlpBasis, &DVector<f64>)>,
    cfg: &MpcConfig,
    params: &VehicleParams,
) -> Result<PlanResult> {
    let model = AugmentedModel {
        params,
        learned,
        x_r: req.x_r,
        dt: cfg.dt,
    };
    solve_with_model(&model, req, cfg, params)
}
