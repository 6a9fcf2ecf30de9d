use dampc::adaptation::EnvelopeBounds;
use dampc::artifacts::{
    decode, decode_metric_field, decode_model, encode, encode_dataset_csv, encode_model,
    encode_runlog_csv, parse_dataset_csv, parse_runlog_csv, read_dataset, run_dir, write_dataset,
    ArtifactKind, ModelRecord,
};
use dampc::ccm::{build_metric_field, Axis, MetricConfig};
use dampc::disturbance::{generate_meta_dataset, DatasetConfig, Sample};
use dampc::dynamics::{ReducedControl, ReducedState, VehicleParams};
use dampc::error::Error;
use dampc::harness::{LyapunovSample, MpcStats, StepRecord, Variant};
use dampc::mpc::PlanStatus;
use dampc::nn::{EpochStats, MetaModel, MlpBasis, TrainReport};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

const HASH: &str = "0123456789abcdef0123456789abcdef0123456789abcdef0123456789abcdef";

fn model() -> MetaModel {
    let basis = MlpBasis::new_random(3, 8, 2, 10.0, 3).unwrap();
    MetaModel {
        basis,
        coeffs: vec![
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
            DVector::from_vec(vec![1.0 / 3.0, 2.0, -1e-17]),
        ],
        a_prior: DVector::from_vec(vec![0.2, 0.9, 0.15]),
        p_meta: DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 3.0, 0.2, 0.1, 0.2, 1.5]),
        report: TrainReport {
            history: vec![EpochStats {
                epoch: 0,
                train_loss: 0.123456789,
                validation_loss: Some(0.2),
            }],
            validation_condition: Some(1),
            validation_baseline: Some(0.7),
            best_epoch: 0,
        },
    }
}

fn envelope() -> EnvelopeBounds {
    EnvelopeBounds {
        d_bar: 1.25,
        phi_bar: 1.5,
        b_bar: 1.1,
        eps_bar: 0.3,
    }
}

fn state(seed: f64) -> ReducedState {
    ReducedState {
        p: Vector3::new(seed, -seed, 0.5 * seed),
        v: Vector3::new(0.1, 0.2, seed / 7.0),
        eta: Vector3::new(0.01, -0.02, 0.03),
    }
}

fn record(t: f64, k: usize, replanned: bool) -> StepRecord {
    StepRecord {
        t,
        x: state(t),
        x_d: state(t + 0.01),
        x_r: state(t + 0.02),
        u: ReducedControl {
            f_u: 9.81,
            eta_u: Vector3::new(0.0, 0.1, -0.1),
        },
        a_hat: (0..k).map(|i| i as f64 * 0.3 - t).collect(),
        lambda_min_p: 0.5,
        e_bar: if k == 0 { f64::NAN } else { 2.0 },
        alpha_bar: 0.4,
        e_norm: 0.01,
        e_norm_m: 0.02,
        saturated: false,
        replanned,
        mpc: MpcStats {
            status: replanned.then_some(PlanStatus::Solved),
            iterations: 3,
            cost: 1.5,
            kkt_residual: 1e-9,
            max_defect: 1e-12,
            solve_ms: 2.5,
        },
        cbac_us: 12.0,
        lyapunov: (k > 0).then_some(LyapunovSample {
            v: 1.0,
            v_dot: -0.5,
            rhs: 0.1,
        }),
    }
}

#[test]
fn model_file_round_trips_byte_equal() {
    let text = encode_model(&model(), &envelope(), HASH).unwrap();
    let (back, env, hash) = decode_model(&text).unwrap();
    assert_eq!(hash, HASH);
    assert_eq!(back, model());
    assert_eq!(env, envelope());
    assert_eq!(encode_model(&back, &env, &hash).unwrap(), text);
}

#[test]
fn model_weights_are_stored_row_major() {
    let m = model();
    let rec = ModelRecord::from_model(&m, &envelope());
    let w = &m.basis.layers[0].weights;
    assert_eq!(rec.layers[0].weights[1], w[(0, 1)]);
    assert_eq!(rec.layers[0].weights[w.ncols()], w[(1, 0)]);
}

#[test]
fn corrupt_models_are_rejected() {
    let mut rec = ModelRecord::from_model(&model(), &envelope());
    rec.layers[1].weights.pop();
    assert!(rec.into_model().is_err());

    let mut rec = ModelRecord::from_model(&model(), &envelope());
    rec.p_meta = vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0];
    assert!(rec.into_model().is_err());

    let mut rec = ModelRecord::from_model(&model(), &envelope());
    rec.a_prior.push(0.0);
    assert!(rec.into_model().is_err());
}

#[test]
fn envelope_header_is_checked_first() {
    let text = encode(ArtifactKind::RunSummary, HASH, &42u32).unwrap();
    assert!(decode::<u32>(&text, ArtifactKind::RunSummary).is_ok());
    assert!(matches!(
        decode::<u32>(&text, ArtifactKind::Model),
        Err(Error::Malformed { .. })
    ));

    let future = text.replace("\"schema_version\": 1", "\"schema_version\": 2");
    assert!(matches!(
        decode::<u32>(&future, ArtifactKind::RunSummary),
        Err(Error::Schema {
            expected: 1,
            found: 2
        })
    ));
    let extra = text.replace("\"payload\"", "\"extra\": 0, \"payload\"");
    assert!(decode::<u32>(&extra, ArtifactKind::RunSummary).is_err());
    assert!(encode(ArtifactKind::Model, "not-a-hash", &0u32).is_err());
}

#[test]
fn metric_field_round_trips() {
    let cfg = MetricConfig {
        roll: Axis {
            min: -0.2,
            max: 0.2,
            count: 2,
        },
        pitch: Axis {
            min: -0.2,
            max: 0.2,
            count: 2,
        },
        thrust: Axis {
            min: 0.8,
            max: 1.2,
            count: 2,
        },
        ..Default::default()
    };
    let field = build_metric_field(&cfg, &VehicleParams::default()).unwrap();
    let text = encode(ArtifactKind::MetricField, HASH, &field).unwrap();
    let (back, hash) = decode_metric_field(&text).unwrap();
    assert_eq!(hash, HASH);
    assert_eq!(back.nodes, field.nodes);
    assert_eq!(back.alpha, field.alpha);

    let mut truncated = field.clone();
    truncated.nodes.pop();
    let text = encode(ArtifactKind::MetricField, HASH, &truncated).unwrap();
    assert!(decode_metric_field(&text).is_err());
}

#[test]
fn dataset_directory_round_trips_and_detects_tampering() {
    let cfg = DatasetConfig {
        conditions: 2,
        samples_per_condition: 120,
        ..Default::default()
    };
    let params = VehicleParams::default();
    let data = generate_meta_dataset(&cfg, &params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &data, &cfg, &params, HASH).unwrap();
    assert!(dir.path().join("condition_00.csv").exists());
    assert!(dir.path().join("condition_01.csv").exists());

    let (art, back) = read_dataset(&manifest).unwrap();
    assert_eq!(art.config_hash, HASH);
    assert_eq!(art.payload.conditions.len(), 2);
    assert_eq!(back, data);

    let path = dir.path().join("condition_01.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    let pos = text.rfind('1').unwrap();
    let mut tampered = text.clone();
    tampered.replace_range(pos..pos + 1, "2");
    std::fs::write(&path, tampered).unwrap();
    assert!(read_dataset(&manifest).is_err());
}

#[test]
fn dataset_csv_has_the_documented_columns() {
    let s = Sample {
        t: 0.5,
        x: state(1.0),
        u: ReducedControl::hover(&VehicleParams::default()),
        y: Vector3::new(0.1, -0.2, 0.3),
        x_r: state(2.0),
    };
    let text = encode_dataset_csv(std::slice::from_ref(&s), HASH).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("# dampc dataset schema_version=1 config_hash="));
    assert_eq!(lines.next().unwrap().split(',').count(), 1 + 9 + 4 + 3 + 9);
    let (header, samples) = parse_dataset_csv(&text).unwrap();
    assert_eq!(header.config_hash, HASH);
    assert_eq!(samples, vec![s]);
    assert!(parse_dataset_csv(&text.replace("dataset", "runlog")).is_err());
}

#[test]
fn runlog_round_trips_with_missing_values() {
    let records = vec![record(0.0, 0, true), record(0.01, 0, false)];
    let text = encode_runlog_csv(&records, HASH).unwrap();
    let (_, back) = parse_runlog_csv(&text).unwrap();
    assert_eq!(back.len(), 2);
    assert!(back[0].e_bar.is_nan());
    assert!(back[1].mpc.status.is_none());
    assert!(back[0].lyapunov.is_none());
    assert_eq!(back[1].x, records[1].x);
}

#[test]
fn runlog_rejects_ragged_rows() {
    let text = encode_runlog_csv(&[record(0.0, 3, true)], HASH).unwrap();
    let short = text.trim_end().rsplit_once(',').unwrap().0.to_owned() + "\n";
    assert!(parse_runlog_csv(&short).is_err());
    let bad_flag = text.replace(",0,1,solved,", ",0,7,solved,");
    assert!(parse_runlog_csv(&bad_flag).is_err());
}

#[test]
fn run_directories_follow_the_layout() {
    let dir = run_dir(std::path::Path::new("out"), "fig8", Variant::Full, 3).unwrap();
    assert_eq!(dir, std::path::Path::new("out/runs/fig8/full/3"));
    assert!(run_dir(std::path::Path::new("out"), "../etc", Variant::Full, 3).is_err());
}

proptest! {
    #[test]
    fn runlog_csv_round_trips(t in 0.0f64..100.0, k in 0usize..5, replanned in any::<bool>(), cost in -1e6f64..1e6) {
        let mut r = record(t, k, replanned);
        r.mpc.cost = cost;
        let text = encode_runlog_csv(std::slice::from_ref(&r), HASH).unwrap();
        let (_, back) = parse_runlog_csv(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        let mut b = back[0].clone();
        // NaN never compares equal; check it separately
        if k == 0 {
            prop_assert!(b.e_bar.is_nan());
            b.e_bar = 0.0;
            r.e_bar = 0.0;
        }
        prop_assert_eq!(b, r);
    }
}

#[test]
fn fuzz_corpus_seeds_still_decode() {
    let corpus = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let read =
        |target: &str, seed: &str| std::fs::read_to_string(corpus.join(target).join(seed)).unwrap();
    assert!(parse_dataset_csv(&read("dataset_csv", "small")).is_ok());
    assert!(parse_runlog_csv(&read("runlog_csv", "small")).is_ok());
    assert!(decode_model(&read("model_json", "tiny")).is_ok());
    assert!(decode_metric_field(&read("metric_json", "grid_2x2x2")).is_ok());
    assert!(dampc::artifacts::decode_run_summary(&read("run_summary_json", "fig8_full")).is_ok());
    assert!(decode::<dampc::artifacts::DatasetManifest>(
        &read("dataset_manifest_json", "two_conditions"),
        ArtifactKind::DatasetManifest
    )
    .is_ok());
    assert!(dampc::config::RunConfig::from_json(&read("run_config_json", "tiny")).is_ok());
}
