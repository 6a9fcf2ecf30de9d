use dampc::dynamics::{reduced_derivative, rk4, ReducedControl, ReducedState, VehicleParams};
use dampc::linalg::{Mat4, Mat9, Mat94, Vec4, Vec9};
use dampc::mpc::{
    discretize_augmented, solve, solve_box_qp, solve_with_model, AugmentedModel, MpcConfig,
    Obstacle, PlanRequest, PlanStatus, ShootingModel,
};
use dampc::nn::MlpBasis;
use nalgebra::{DMatrix, DVector, Vector3};

fn hover_state(z: f64) -> ReducedState {
    ReducedState::hover_at(Vector3::new(0.0, 0.0, z))
}

/// Network whose output is the constant `bias`, so `φ â = bias` for `â = 1`.
fn constant_model(bias: [f64; 3]) -> MlpBasis {
    let mut m = MlpBasis::new_random(1, 4, 1, 10.0, 1).unwrap();
    for layer in m.layers.iter_mut() {
        layer.weights.fill(0.0);
        layer.bias.fill(0.0);
    }
    let last = m.layers.last_mut().unwrap();
    last.bias.copy_from_slice(&bias);
    m
}

fn assert_solved_plan_is_consistent(plan: &dampc::mpc::PlanResult) {
    assert_eq!(plan.status, PlanStatus::Solved);
    assert!(plan.max_defect <= 1e-6, "defect {}", plan.max_defect);
    for run in &plan.merit_history {
        for w in run.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0),
                "merit rose {} → {}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn zero_estimate_matches_nominal_rk4() {
    let params = VehicleParams::default();
    let x = ReducedState {
        p: Vector3::new(0.1, 0.2, 1.0),
        v: Vector3::new(0.5, -0.2, 0.1),
        eta: Vector3::new(0.1, -0.2, 0.3),
    };
    let u = ReducedControl {
        f_u: 11.0,
        eta_u: Vector3::new(0.2, 0.1, -0.3),
    };
    let model = constant_model([1.0, 2.0, 3.0]);
    let zero = DVector::zeros(1);
    let next = discretize_augmented(
        &x,
        &u,
        &hover_state(0.0),
        Some((&model, &zero)),
        0.1,
        &params,
    );
    let oracle = rk4(
        |z: &Vec9| {
            reduced_derivative(
                &ReducedState::from_vector(z),
                &u,
                &Vector3::zeros(),
                &params,
            )
        },
        &x.to_vector(),
        0.1,
    );
    assert_eq!(next.to_vector(), oracle);
}

#[test]
fn constant_vertical_estimate_offsets_acceleration() {
    let params = VehicleParams::default();
    let c = 0.7;
    let model = constant_model([0.0, 0.0, c]);
    let a = DVector::from_element(1, 1.0);
    let x = hover_state(1.0);
    let h = 0.1;
    let next = discretize_augmented(
        &x,
        &ReducedControl::hover(&params),
        &x,
        Some((&model, &a)),
        h,
        &params,
    );
    assert!((next.p.z - (1.0 + 0.5 * c * h * h)).abs() < 1e-14);
    assert!((next.v.z - c * h).abs() < 1e-14);
}

#[test]
fn halving_the_step_agrees_to_fourth_order() {
    let params = VehicleParams::default();
    let x = ReducedState {
        p: Vector3::zeros(),
        v: Vector3::new(1.0, 0.0, 0.5),
        eta: Vector3::new(0.2, -0.1, 0.0),
    };
    let u = ReducedControl {
        f_u: 12.0,
        eta_u: Vector3::new(1.0, -0.5, 0.2),
    };
    let gap = |h: f64| {
        let one = discretize_augmented(&x, &u, &x, None, h, &params);
        let half = discretize_augmented(&x, &u, &x, None, h / 2.0, &params);
        let two = discretize_augmented(&half, &u, &x, None, h / 2.0, &params);
        (one.to_vector() - two.to_vector()).norm()
    };
    let ratio = gap(0.2) / gap(0.1);
    // local error O(h⁵)
    assert!(ratio > 20.0 && ratio < 45.0, "ratio {ratio}");
}

#[test]
fn linearization_matches_finite_differences() {
    let params = VehicleParams::default();
    let model = MlpBasis::new_random(3, 16, 2, 10.0, 9).unwrap();
    let a = DVector::from_vec(vec![0.4, -0.8, 1.1]);
    let refs = vec![hover_state(0.5)];
    let aug = AugmentedModel {
        params: &params,
        learned: Some((&model, &a)),
        x_r: &refs,
        dt: 0.1,
    };
    let x = Vec9::from_column_slice(&[0.3, -0.2, 1.2, 0.5, 0.1, -0.3, 0.15, -0.1, 0.2]);
    let u = Vec4::new(10.5, 0.3, -0.2, 0.1);
    let (next, fx, fu) = aug.linearize(0, &x, &u);
    assert_eq!(next, aug.step(0, &x, &u));
    let eps = 1e-6;
    let mut fx_fd = Mat9::zeros();
    for j in 0..9 {
        let mut xp = x;
        let mut xm = x;
        xp[j] += eps;
        xm[j] -= eps;
        fx_fd.set_column(
            j,
            &((aug.step(0, &xp, &u) - aug.step(0, &xm, &u)) / (2.0 * eps)),
        );
    }
    let mut fu_fd = Mat94::zeros();
    for j in 0..4 {
        let mut up = u;
        let mut um = u;
        up[j] += eps;
        um[j] -= eps;
        fu_fd.set_column(
            j,
            &((aug.step(0, &x, &up) - aug.step(0, &x, &um)) / (2.0 * eps)),
        );
    }
    assert!(
        (fx - fx_fd).norm() < 1e-6 * fx.norm(),
        "{}",
        (fx - fx_fd).norm()
    );
    assert!((fu - fu_fd).norm() < 1e-6 * fu.norm().max(1.0));
}

#[test]
fn box_qp_matches_enumerated_optimum() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let g = DVector::from_vec(vec![-4.0, 1.0]);
    let lb = DVector::from_vec(vec![-1.0, 0.0]);
    let ub = DVector::from_vec(vec![1.0, 2.0]);
    let d = solve_box_qp(&h, &g, &lb, &ub).unwrap();
    // unconstrained optimum is outside; x₁ = 1 at the bound, x₂ = max(0, −(1 + 0.5))
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12, "{d}");
}

/// Double integrator with frozen attitude, written so that hover thrust is the
/// zero of the shifted input `u − u_ref`.
struct LinearRestriction {
    a: Mat9,
    b: Mat94,
    c: Vec9,
}

impl LinearRestriction {
    fn new(h: f64, params: &VehicleParams) -> Self {
        let mut a = Mat9::identity();
        for i in 0..3 {
            a[(i, 3 + i)] = h;
        }
        let mut b = Mat94::zeros();
        b[(5, 0)] = h / params.mass;
        b[(3, 1)] = h;
        b[(4, 2)] = h;
        b[(8, 3)] = h;
        let mut c = Vec9::zeros();
        c[5] = -params.gravity * h;
        Self { a, b, c }
    }
}

impl ShootingModel for LinearRestriction {
    fn step(&self, _k: usize, x: &Vec9, u: &Vec4) -> Vec9 {
        self.a * x + self.b * u + self.c
    }
    fn linearize(&self, k: usize, x: &Vec9, u: &Vec4) -> (Vec9, Mat9, Mat94) {
        (self.step(k, x, u), self.a, self.b)
    }
}

#[test]
fn linear_restriction_matches_riccati() {
    let params = VehicleParams::default();
    let cfg = MpcConfig {
        goal_weight: 0.0,
        ..Default::default()
    };
    let lin = LinearRestriction::new(cfg.dt, &params);
    let x0 = ReducedState {
        p: Vector3::new(0.1, -0.05, 1.08),
        v: Vector3::new(0.02, 0.0, -0.03),
        eta: Vector3::new(0.0, 0.0, 0.04),
    };
    let target = hover_state(1.0);
    let refs = vec![target; cfg.horizon + 1];
    let req = PlanRequest {
        t0: 0.0,
        x0: &x0,
        x_r: &refs,
        e_bar: &[0.0],
        warm: None,
    };
    let plan = solve_with_model(&lin, &req, &cfg, &params).unwrap();
    assert_solved_plan_is_consistent(&plan);

    // backward Riccati recursion in the error coordinates
    let q = cfg.q_matrix();
    let r = Mat4::from_diagonal(&cfg.r_diag.into());
    let mut p = q;
    let mut gains = Vec::new();
    for _ in 0..cfg.horizon {
        let k = (r + lin.b.transpose() * p * lin.b).try_inverse().unwrap()
            * lin.b.transpose()
            * p
            * lin.a;
        p = q + lin.a.transpose() * p * (lin.a - lin.b * k);
        gains.push(k);
    }
    gains.reverse();
    let u_ref = ReducedControl::hover(&params).to_vector();
    let mut e = x0.to_vector() - target.to_vector();
    for k in 0..cfg.horizon {
        let w = -gains[k] * e;
        let planned = plan.u[k].to_vector() - u_ref;
        assert!((planned - w).amax() < 1e-6, "stage {k}: {planned} vs {w}");
        e = lin.a * e + lin.b * w;
    }
}

#[test]
fn hover_reference_is_an_equilibrium_optimum() {
    let params = VehicleParams::default();
    let cfg = MpcConfig::default();
    let x0 = hover_state(2.0);
    let refs = vec![x0; cfg.horizon + 1];
    let req = PlanRequest {
        t0: 0.0,
        x0: &x0,
        x_r: &refs,
        e_bar: &[0.0],
        warm: None,
    };
    let plan = solve(&req, None, &cfg, &params).unwrap();
    assert_solved_plan_is_consistent(&plan);
    for u in &plan.u {
        assert!((u.f_u - params.hover_thrust()).abs() < 1e-9);
        assert!(u.eta_u.amax() < 1e-9);
    }
    assert!(plan.cost < 1e-12);
}

#[test]
fn known_crosswind_plan_tilts_into_the_wind() {
    let params = VehicleParams::default();
    let cfg = MpcConfig::default();
    let f_w = 2.88;
    let model = constant_model([f_w / params.mass, 0.0, 0.0]);
    let a = DVector::from_element(1, 1.0);
    let x0 = hover_state(2.0);
    let refs = vec![x0; cfg.horizon + 1];
    let mut warm = None;
    let mut plan = None;
    let mut x = x0;
    // let the plan settle by receding a few times
    for i in 0..15 {
        let req = PlanRequest {
            t0: i as f64 * 0.2,
            x0: &x,
            x_r: &refs,
            e_bar: &[0.0],
            warm: warm.as_ref(),
        };
        let p = solve(&req, Some((&model, &a)), &cfg, &params).unwrap();
        assert_solved_plan_is_consistent(&p);
        x = p.x[2];
        warm = Some(p.shifted(2));
        plan = Some(p);
    }
    let plan = plan.unwrap();
    let expected = -(f_w / (params.mass * params.gravity)).atan();
    let pitch = plan.x[cfg.horizon / 2].eta.y;
    assert!(
        (pitch - expected).abs() <= 0.01,
        "pitch {pitch} expected {expected}"
    );
    assert!(plan.x[cfg.horizon / 2].eta.x.abs() < 1e-6);
}

#[test]
fn eroded_floor_is_respected() {
    let params = VehicleParams::default();
    let cfg = MpcConfig {
        obstacles: vec![Obstacle::HalfSpace {
            normal: Vector3::z(),
            offset: 0.0,
        }],
        ..Default::default()
    };
    let x0 = hover_state(1.0);
    let refs = vec![hover_state(0.2); cfg.horizon + 1];
    for e_bar in [0.0, 0.5] {
        let req = PlanRequest {
            t0: 0.0,
            x0: &x0,
            x_r: &refs,
            e_bar: &[e_bar],
            warm: None,
        };
        let plan = solve(&req, None, &cfg, &params).unwrap();
        assert_solved_plan_is_consistent(&plan);
        let lowest = plan.x.iter().map(|s| s.p.z).fold(f64::INFINITY, f64::min);
        assert!(lowest >= e_bar - 1e-6, "ē {e_bar}: lowest {lowest}");
        if e_bar > 0.0 {
            assert!(
                lowest < e_bar + 0.05,
                "plan should press against the eroded floor"
            );
        }
    }
}

#[test]
fn unreachable_safe_set_brakes_to_hover() {
    let params = VehicleParams::default();
    let x0 = ReducedState {
        p: Vector3::new(0.0, 0.0, 2.0),
        v: Vector3::new(1.0, 0.0, 0.0),
        eta: Vector3::zeros(),
    };
    let cfg = MpcConfig {
        obstacles: vec![Obstacle::Sphere {
            center: x0.p,
            radius: 1.0,
        }],
        ..Default::default()
    };
    let refs = vec![x0; cfg.horizon + 1];
    let req = PlanRequest {
        t0: 0.0,
        x0: &x0,
        x_r: &refs,
        e_bar: &[0.0],
        warm: None,
    };
    let plan = solve(&req, None, &cfg, &params).unwrap();
    assert_eq!(plan.status, PlanStatus::InfeasibleRelaxed);
    assert!(plan
        .x
        .iter()
        .all(|s| s.v == Vector3::zeros() && s.p == x0.p));
    assert!(plan.u.iter().all(|u| *u == ReducedControl::hover(&params)));
}

#[test]
fn warm_started_figure8_converges_quickly() {
    let params = VehicleParams::default();
    let cfg = MpcConfig::default();
    let reference = dampc::reference::Reference::Figure8 {
        amplitude: 2.0,
        period: 8.0,
        center: Vector3::new(0.0, 0.0, 2.0),
    };
    let mut x = reference.sample(0.0);
    let mut warm: Option<dampc::mpc::PlanResult> = None;
    let mut iterations = Vec::new();
    for i in 0..20 {
        let t = i as f64 * cfg.replan_period;
        let refs = reference.horizon(t, cfg.dt, cfg.horizon);
        let req = PlanRequest {
            t0: t,
            x0: &x,
            x_r: &refs,
            e_bar: &[0.0],
            warm: warm.as_ref(),
        };
        let plan = solve(&req, None, &cfg, &params).unwrap();
        assert_solved_plan_is_consistent(&plan);
        if i > 0 {
            iterations.push(plan.iterations);
        }
        x = plan.sample(t + cfg.replan_period).0;
        warm = Some(plan.shifted(2));
    }
    iterations.sort_unstable();
    let median = iterations[iterations.len() / 2];
    assert!(
        median <= 5,
        "median SQP iterations {median}: {iterations:?}"
    );
}

#[test]
fn sampling_interpolates_between_nodes() {
    let params = VehicleParams::default();
    let cfg = MpcConfig::default();
    let x0 = hover_state(1.0);
    let refs = vec![hover_state(2.0); cfg.horizon + 1];
    let req = PlanRequest {
        t0: 1.0,
        x0: &x0,
        x_r: &refs,
        e_bar: &[0.0],
        warm: None,
    };
    let plan = solve(&req, None, &cfg, &params).unwrap();
    let (mid, u) = plan.sample(1.0 + 0.25);
    let expect = (plan.x[2].to_vector() + plan.x[3].to_vector()) * 0.5;
    assert!((mid.to_vector() - expect).norm() < 1e-12);
    assert_eq!(u, plan.u[2]);
    let shifted = plan.shifted(2);
    assert_eq!(shifted.x[0], plan.x[2]);
    assert_eq!(shifted.x.len(), plan.x.len());
    assert!((shifted.t0 - 1.2).abs() < 1e-12);
}
