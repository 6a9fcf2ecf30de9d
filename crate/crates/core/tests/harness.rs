use std::sync::OnceLock;

use dampc::adaptation::EnvelopeBounds;
use dampc::artifacts::{read_run, write_run};
use dampc::ccm::{build_metric_field, Axis, MetricConfig, MetricField};
use dampc::dynamics::{ReducedControl, ReducedState, VehicleParams};
use dampc::error::Error;
use dampc::harness::{
    rmse, run, run_many, summarize, HarnessConfig, MpcStats, RunContext, ScenarioKind,
    ScenarioPresets, StepRecord, Variant,
};
use dampc::nn::{MetaModel, MlpBasis, TrainReport};
use nalgebra::{DMatrix, DVector, Vector3};

const HASH: &str = "fedcba9876543210fedcba9876543210fedcba9876543210fedcba9876543210";

fn field() -> &'static MetricField {
    static FIELD: OnceLock<MetricField> = OnceLock::new();
    FIELD.get_or_init(|| {
        let cfg = MetricConfig {
            roll: Axis {
                min: -0.4,
                max: 0.4,
                count: 3,
            },
            pitch: Axis {
                min: -0.4,
                max: 0.4,
                count: 3,
            },
            thrust: Axis {
                min: 0.5,
                max: 1.5,
                count: 3,
            },
            ..Default::default()
        };
        build_metric_field(&cfg, &VehicleParams::default()).expect("grid is feasible")
    })
}

/// An untrained model: enough to exercise the adaptive wiring.
fn model() -> &'static (MetaModel, EnvelopeBounds) {
    static MODEL: OnceLock<(MetaModel, EnvelopeBounds)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let model = MetaModel {
            basis: MlpBasis::new_random(3, 16, 2, 10.0, 2).unwrap(),
            coeffs: vec![DVector::zeros(3)],
            a_prior: DVector::from_vec(vec![0.1, 0.1, 0.1]),
            p_meta: DMatrix::identity(3, 3) * 2.0,
            report: TrainReport {
                history: Vec::new(),
                validation_condition: None,
                validation_baseline: None,
                best_epoch: 0,
            },
        };
        let env = EnvelopeBounds {
            d_bar: 1.0,
            phi_bar: 2.0,
            b_bar: 1.1,
            eps_bar: 0.3,
        };
        (model, env)
    })
}

fn with_context<T>(f: impl FnOnce(&RunContext<'_>) -> T) -> T {
    let (m, env) = model();
    let cfg = HarnessConfig::default();
    let params = VehicleParams::default();
    let ctx = RunContext {
        field: field(),
        model: Some(m),
        envelope: Some(env),
        params: &params,
        cfg: &cfg,
    };
    f(&ctx)
}

fn at(t: f64, p: Vector3<f64>, p_r: Vector3<f64>) -> StepRecord {
    StepRecord {
        t,
        x: ReducedState::hover_at(p),
        x_d: ReducedState::hover_at(p_r),
        x_r: ReducedState::hover_at(p_r),
        u: ReducedControl::hover(&VehicleParams::default()),
        a_hat: Vec::new(),
        lambda_min_p: f64::NAN,
        e_bar: f64::NAN,
        alpha_bar: f64::NAN,
        e_norm: 0.0,
        e_norm_m: 0.0,
        saturated: false,
        replanned: false,
        mpc: MpcStats {
            status: None,
            iterations: 0,
            cost: 0.0,
            kkt_residual: 0.0,
            max_defect: 0.0,
            solve_ms: 0.0,
        },
        cbac_us: 0.0,
        lyapunov: None,
    }
}

#[test]
fn rmse_of_perfect_and_offset_tracking() {
    let p = Vector3::new(1.0, 2.0, 3.0);
    let perfect: Vec<_> = (0..10).map(|i| at(i as f64 * 0.01, p, p)).collect();
    assert_eq!(rmse(&perfect).unwrap(), 0.0);
    let offset: Vec<_> = (0..10)
        .map(|i| at(i as f64 * 0.01, p + Vector3::new(0.0, 0.1, 0.0), p))
        .collect();
    assert!((rmse(&offset).unwrap() - 0.1).abs() < 1e-15);
    assert!(rmse(&[]).is_err());
}

#[test]
fn labels_parse_back() {
    for v in Variant::ALL {
        assert_eq!(v.label().parse::<Variant>().unwrap(), v);
    }
    for k in ScenarioKind::ALL {
        assert_eq!(k.label().parse::<ScenarioKind>().unwrap(), k);
    }
    assert!("fastest".parse::<Variant>().is_err());
    assert!("loop".parse::<ScenarioKind>().is_err());
}

#[test]
fn undisturbed_hover_is_held_by_every_variant() {
    with_context(|ctx| {
        let presets = ScenarioPresets::default();
        for v in Variant::ALL {
            let mut s = presets.build(ScenarioKind::Hover, v, 1);
            s.duration = 2.0;
            let log = run(&s, ctx).unwrap();
            assert!(log.summary.rmse <= 1e-3, "{v}: rmse {}", log.summary.rmse);
            assert!(log.summary.aborted.is_none());
        }
    });
}

#[test]
fn control_steps_are_uniform_and_replans_periodic() {
    with_context(|ctx| {
        let mut s = ScenarioPresets::default().build(ScenarioKind::Fig8, Variant::Nominal, 1);
        s.duration = 1.0;
        let log = run(&s, ctx).unwrap();
        assert_eq!(log.records.len(), 101);
        for (i, r) in log.records.iter().enumerate() {
            assert!((r.t - i as f64 * 0.01).abs() < 1e-12);
            assert_eq!(r.replanned, i % 20 == 0);
        }
        // nominal runs carry no certified bound
        assert!(log.records.iter().all(|r| r.e_bar.is_nan()));
        assert!(log.summary.bound_violation_fraction.is_none());
    });
}

#[test]
fn runs_are_deterministic() {
    with_context(|ctx| {
        let mut s = ScenarioPresets::default().build(ScenarioKind::Fig8, Variant::Full, 4);
        s.duration = 1.5;
        let a = run(&s, ctx).unwrap();
        let b = run(&s, ctx).unwrap();
        assert_eq!(
            a.summary.deterministic_part(),
            b.summary.deterministic_part()
        );
        let parallel = run_many(&[s.clone(), s], ctx, 2);
        let p: Vec<_> = parallel
            .into_iter()
            .map(|r| r.unwrap().summary.deterministic_part())
            .collect();
        assert_eq!(p[0], a.summary.deterministic_part());
        assert_eq!(p[1], a.summary.deterministic_part());
    });
}

#[test]
fn summary_is_recomputable_from_the_persisted_log() {
    with_context(|ctx| {
        let mut s = ScenarioPresets::default().build(ScenarioKind::Fig8, Variant::MpcPlusMlCbac, 2);
        s.duration = 1.0;
        let log = run(&s, ctx).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), &log, HASH).unwrap();
        let (art, records) = read_run(dir.path()).unwrap();
        assert_eq!(records.len(), log.records.len());

        // independent RMSE from the CSV positions
        let text = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        let mut sum = 0.0;
        let mut n = 0;
        for line in text.lines().skip(2) {
            let f: Vec<f64> = line
                .split(',')
                .take(28)
                .map(|v| v.parse().unwrap())
                .collect();
            let d = [f[1] - f[19], f[2] - f[20], f[3] - f[21]];
            sum += d.iter().map(|v| v * v).sum::<f64>();
            n += 1;
        }
        assert!(((sum / n as f64).sqrt() - art.payload.summary.rmse).abs() < 1e-12);

        let again = summarize(
            &art.payload.scenario,
            &records,
            art.payload.summary.aborted.clone(),
        )
        .unwrap();
        assert_eq!(again, art.payload.summary);
    });
}

#[test]
fn adaptive_variants_need_a_model() {
    let cfg = HarnessConfig::default();
    let params = VehicleParams::default();
    let ctx = RunContext {
        field: field(),
        model: None,
        envelope: None,
        params: &params,
        cfg: &cfg,
    };
    let s = ScenarioPresets::default().build(ScenarioKind::Hover, Variant::Full, 1);
    assert!(matches!(run(&s, &ctx), Err(Error::MissingArtifact(_))));
    let mut s = ScenarioPresets::default().build(ScenarioKind::Hover, Variant::Nominal, 1);
    s.duration = 0.1;
    assert!(run(&s, &ctx).is_ok());
}

#[test]
fn landing_stops_at_touchdown() {
    with_context(|ctx| {
        let mut s = ScenarioPresets::default().build(ScenarioKind::Landing, Variant::Nominal, 1);
        s.env.ground_effect_rho = 0.0;
        let log = run(&s, ctx).unwrap();
        let td = log.summary.touchdown.expect("lands without ground effect");
        assert!(td.t < s.duration);
        assert!(log.records.last().unwrap().x.p.z <= 0.02);
    });
}
