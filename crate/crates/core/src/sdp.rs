//! Small dense semidefinite programs by a log-det barrier method.
//!
//! Problems have the form `minimize cᵀz subject to F_j(z) = F_j0 + Σ_i z_i F_ji ≻ 0`.
//! Scalar inequalities are 1 × 1 blocks. A phase-I problem finds a strictly
//! feasible start when none is supplied.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One linear matrix inequality `F0 + Σ z_i F_i ≻ 0`.
#[derive(Clone, Debug)]
pub struct LmiBlock {
    pub f0: DMatrix<f64>,
    /// One coefficient matrix per decision variable; `None` for variables absent from the block.
    pub fi: Vec<Option<DMatrix<f64>>>,
}

impl LmiBlock {
    pub fn dim(&self) -> usize {
        self.f0.nrows()
    }

    pub fn evaluate(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (zi, fi) in z.iter().zip(&self.fi) {
            if let Some(m) = fi {
                f.zip_apply(m, |a, b| *a += *zi * b);
            }
        }
        f
    }

    /// Scalar constraint `offset + Σ coeffs_i z_i > 0`.
    pub fn scalar(offset: f64, coeffs: &[(usize, f64)], n_vars: usize) -> Self {
        let mut fi = vec![None; n_vars];
        for &(i, c) in coeffs {
            fi[i] = Some(DMatrix::from_element(1, 1, c));
        }
        Self {
            f0: DMatrix::from_element(1, 1, offset),
            fi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub c: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Clone, Debug)]
pub struct SdpOptions {
    /// Duality-gap target `m/τ`.
    pub gap_tol: f64,
    pub max_newton: usize,
    pub mu: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            max_newton: 400,
            mu: 20.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub newton_steps: usize,
}

#[derive(Clone, Debug)]
pub enum Feasibility {
    /// Strictly feasible point.
    Feasible(DVector<f64>),
    /// Phase I converged with the smallest achievable uniform violation.
    Infeasible { violation: f64 },
}

fn chol_inverse(f: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if f.iter().any(|v| !v.is_finite()) {
        return None;
    }
    f.clone().cholesky().map(|c| c.inverse())
}

fn strictly_feasible(problem: &SdpProblem, z: &DVector<f64>) -> bool {
    problem
        .blocks
        .iter()
        .all(|b| b.evaluate(z).cholesky().is_some())
}

fn log_det_sum(problem: &SdpProblem, z: &DVector<f64>) -> Option<f64> {
    let mut total = 0.0;
    for b in &problem.blocks {
        let chol = b.evaluate(z).cholesky()?;
        total += 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
    }
    Some(total)
}

/// Gradient and Hessian of `τcᵀz − Σ log det F_j(z)`.
fn barrier_derivatives(
    problem: &SdpProblem,
    z: &DVector<f64>,
    tau: f64,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n = z.len();
    let mut g = &problem.c * tau;
    let mut h = DMatrix::zeros(n, n);
    for b in &problem.blocks {
        let inv = chol_inverse(&b.evaluate(z))?;
        let active: Vec<(usize, DMatrix<f64>, DMatrix<f64>)> =
            b.fi.iter()
                .enumerate()
                .filter_map(|(i, m)| {
                    m.as_ref().map(|m| {
                        let gi = &inv * m;
                        let gt = gi.transpose();
                        (i, gi, gt)
                    })
                })
                .collect();
        for (a, (i, gi, _)) in active.iter().enumerate() {
            g[*i] -= gi.trace();
            for (j, _, gt) in active.iter().skip(a) {
                // tr(G_i G_j) = ⟨G_i, G_jᵀ⟩
                let v = gi.dot(gt);
                h[(*i, *j)] += v;
                if i != j {
                    h[(*j, *i)] += v;
                }
            }
        }
    }
    Some((g, h))
}

fn newton_direction(g: &DVector<f64>, h: &DMatrix<f64>) -> Option<DVector<f64>> {
    let n = g.len();
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = 0.0;
    for _ in 0..8 {
        let hr = h + DMatrix::identity(n, n) * reg;
        if let Some(c) = hr.cholesky() {
            return Some(-c.solve(g));
        }
        reg = if reg == 0.0 {
            1e-12 * scale
        } else {
            reg * 100.0
        };
    }
    None
}

const MAX_CENTERING_STEPS: usize = 50;

/// Minimize `τcᵀz + barrier` from a strictly feasible `z` by damped Newton.
fn centering(
    problem: &SdpProblem,
    z: &mut DVector<f64>,
    tau: f64,
    budget: &mut usize,
) -> Result<()> {
    let objective = |z: &DVector<f64>| -> Option<f64> {
        log_det_sum(problem, z).map(|ld| tau * problem.c.dot(z) - ld)
    };
    let mut current =
        objective(z).ok_or_else(|| Error::Sdp("start point is not strictly feasible".into()))?;
    for _ in 0..MAX_CENTERING_STEPS {
        if *budget == 0 {
            return Ok(());
        }
        *budget -= 1;
        let (g, h) = barrier_derivatives(problem, z, tau)
            .ok_or_else(|| Error::Sdp("lost strict feasibility".into()))?;
        let Some(dz) = newton_direction(&g, &h) else {
            return Ok(());
        };
        let decrement = -g.dot(&dz);
        if decrement / 2.0 <= 1e-9 {
            return Ok(());
        }
        let mut s = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &*z + &dz * s;
            if let Some(v) = objective(&trial) {
                if v <= current - 0.25 * s * decrement {
                    *z = trial;
                    current = v;
                    accepted = true;
                    break;
                }
            }
            s *= 0.5;
        }
        if !accepted {
            return Ok(());
        }
    }
    Ok(())
}

/// Barrier path-following from a strictly feasible start.
pub fn solve_from(
    problem: &SdpProblem,
    z0: DVector<f64>,
    opts: &SdpOptions,
) -> Result<SdpSolution> {
    if !strictly_feasible(problem, &z0) {
        return Err(Error::Sdp("initial point is not strictly feasible".into()));
    }
    let m: usize = problem.blocks.iter().map(|b| b.dim()).sum();
    let mut z = z0;
    let mut tau = 1.0;
    let mut budget = opts.max_newton;
    let start = budget;
    loop {
        centering(problem, &mut z, tau, &mut budget)?;
        let scale = problem.c.dot(&z).abs().max(1.0);
        if m as f64 / tau <= opts.gap_tol * scale || budget == 0 {
            break;
        }
        tau *= opts.mu;
    }
    Ok(SdpSolution {
        objective: problem.c.dot(&z),
        z,
        newton_steps: start - budget,
    })
}

/// Phase I: minimize the uniform violation `t` with `F_j(z) + tI ≻ 0`.
///
/// Stops as soon as `t < −strict`, returning that strictly feasible point.
pub fn find_feasible(
    problem: &SdpProblem,
    z0: &DVector<f64>,
    strict: f64,
    opts: &SdpOptions,
) -> Result<Feasibility> {
    if strictly_feasible(problem, z0) {
        return Ok(Feasibility::Feasible(z0.clone()));
    }
    let n = z0.len();
    let mut blocks: Vec<LmiBlock> = problem
        .blocks
        .iter()
        .map(|b| {
            let mut fi = b.fi.clone();
            fi.push(Some(DMatrix::identity(b.dim(), b.dim())));
            LmiBlock {
                f0: b.f0.clone(),
                fi,
            }
        })
        .collect();
    // keep phase I bounded below
    blocks.push(LmiBlock::scalar(1.0, &[(n, 1.0)], n + 1));
    let mut c = DVector::zeros(n + 1);
    c[n] = 1.0;
    let phase1 = SdpProblem { c, blocks };

    let worst = problem
        .blocks
        .iter()
        .map(|b| -crate::linalg::lambda_min(&b.evaluate(z0)))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = z0.clone().insert_row(n, worst.max(0.0) + 1.0);
    if !strictly_feasible(&phase1, &z) {
        return Err(Error::Sdp("phase I start is not strictly feasible".into()));
    }
    let m: usize = phase1.blocks.iter().map(|b| b.dim()).sum();
    let mut tau = 1.0;
    let mut budget = opts.max_newton;
    loop {
        centering(&phase1, &mut z, tau, &mut budget)?;
        let t = z[n];
        if t < -strict {
            let found = z.rows(0, n).into_owned();
            if strictly_feasible(problem, &found) {
                return Ok(Feasibility::Feasible(found));
            }
        }
        if m as f64 / tau <= opts.gap_tol || budget == 0 {
            return Ok(Feasibility::Infeasible { violation: t });
        }
        tau *= opts.mu;
    }
}
