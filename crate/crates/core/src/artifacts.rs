//! On-disk artifacts: versioned JSON envelopes and CSV tables with a comment header.
//!
//! Every file records the schema version and the hash of the configuration
//! sections that produced it. Loads check the header before touching the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::de::{DeserializeOwned, IgnoredAny};
use serde::{Deserialize, Serialize};

use crate::adaptation::EnvelopeBounds;
use crate::ccm::MetricField;
use crate::config::digest_hex;
use crate::disturbance::{DatasetConfig, DomainDataset, EnvConditions, Sample};
use crate::dynamics::{ReducedControl, ReducedState, VehicleParams};
use crate::error::{Error, Result};
use crate::harness::{LyapunovSample, MpcStats, RunLog, RunSummary, Scenario, StepRecord, Variant};
use crate::mpc::PlanStatus;
use crate::nn::{DenseLayer, MetaModel, MlpBasis, TrainReport};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_LOG_FILE: &str = "log.csv";
pub const RUN_SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactKind {
    DatasetManifest,
    Model,
    MetricField,
    RunSummary,
}

impl ArtifactKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::DatasetManifest => "dataset-manifest",
            ArtifactKind::Model => "model",
            ArtifactKind::MetricField => "metric-field",
            ArtifactKind::RunSummary => "run-summary",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub payload: T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    kind: String,
    #[allow(dead_code)]
    config_hash: String,
    #[allow(dead_code)]
    payload: IgnoredAny,
}

fn malformed(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Malformed {
        what,
        reason: reason.into(),
    }
}

fn check_hash(hash: &str) -> Result<()> {
    if hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit()) {
        Ok(())
    } else {
        Err(malformed(
            "artifact header",
            format!("config hash {hash:?} is not a SHA-256 hex digest"),
        ))
    }
}

/// Serialize `payload` inside a versioned envelope.
pub fn encode<T: Serialize>(kind: ArtifactKind, config_hash: &str, payload: &T) -> Result<String> {
    check_hash(config_hash)?;
    let artifact = Artifact {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        kind: kind.as_str().to_owned(),
        config_hash: config_hash.to_owned(),
        payload,
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    Ok(text)
}

/// Parse an envelope of the expected kind; the header is checked before the payload.
pub fn decode<T: DeserializeOwned>(text: &str, kind: ArtifactKind) -> Result<Artifact<T>> {
    let header: Header = serde_json::from_str(text)?;
    if header.schema_version != ARTIFACT_SCHEMA_VERSION {
        return Err(Error::Schema {
            expected: ARTIFACT_SCHEMA_VERSION,
            found: header.schema_version,
        });
    }
    if header.kind != kind.as_str() {
        return Err(malformed(
            "artifact header",
            format!("expected kind {:?}, found {:?}", kind.as_str(), header.kind),
        ));
    }
    let artifact: Artifact<T> = serde_json::from_str(text)?;
    check_hash(&artifact.config_hash)?;
    Ok(artifact)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(
    path: &Path,
    kind: ArtifactKind,
    config_hash: &str,
    payload: &T,
) -> Result<()> {
    write_file(path, encode(kind, config_hash, payload)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path, kind: ArtifactKind) -> Result<Artifact<T>> {
    decode(&read_file(path)?, kind)
}

// ---------------------------------------------------------------------------
// model

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Portable form of a trained model and its envelope bounds; matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub k: usize,
    pub gamma: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub layers: Vec<LayerRecord>,
    /// Per-condition heads `a_i`.
    pub coeffs: Vec<Vec<f64>>,
    pub a_prior: Vec<f64>,
    /// `P_𝒟meta`, `k × k`, row-major.
    pub p_meta: Vec<f64>,
    pub report: TrainReport,
    pub envelope: EnvelopeBounds,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl ModelRecord {
    pub fn from_model(model: &MetaModel, envelope: &EnvelopeBounds) -> Self {
        let basis = &model.basis;
        Self {
            k: basis.k,
            gamma: basis.gamma,
            input_mean: basis.input_mean.as_slice().to_vec(),
            input_std: basis.input_std.as_slice().to_vec(),
            layers: basis
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: row_major(&l.weights),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
            coeffs: model.coeffs.iter().map(|a| a.as_slice().to_vec()).collect(),
            a_prior: model.a_prior.as_slice().to_vec(),
            p_meta: row_major(&model.p_meta),
            report: model.report.clone(),
            envelope: envelope.clone(),
        }
    }

    /// Rebuild the model, checking shapes and the covariance.
    pub fn into_model(self) -> Result<(MetaModel, EnvelopeBounds)> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            if l.rows.checked_mul(l.cols) != Some(l.weights.len()) || l.bias.len() != l.rows {
                return Err(malformed("model", "layer shape does not match its arrays"));
            }
            layers.push(DenseLayer {
                weights: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                bias: DVector::from_vec(l.bias),
            });
        }
        let k = self.k;
        let basis = MlpBasis {
            layers,
            k,
            gamma: self.gamma,
            input_mean: DVector::from_vec(self.input_mean),
            input_std: DVector::from_vec(self.input_std),
        };
        basis.validate()?;
        if self.a_prior.len() != k || self.coeffs.iter().any(|a| a.len() != k) {
            return Err(malformed("model", "coefficient vectors must have length k"));
        }
        if k.checked_mul(k) != Some(self.p_meta.len()) {
            return Err(malformed("model", "P_meta must be k × k"));
        }
        let p_meta = DMatrix::from_row_slice(k, k, &self.p_meta);
        let finite = self
            .a_prior
            .iter()
            .chain(self.coeffs.iter().flatten())
            .chain(&self.p_meta)
            .all(|v| v.is_finite());
        if !finite || (&p_meta - p_meta.transpose()).amax() > 1e-9 * (1.0 + p_meta.amax()) {
            return Err(malformed("model", "P_meta must be finite and symmetric"));
        }
        if p_meta.clone().cholesky().is_none() {
            return Err(malformed("model", "P_meta is not positive definite"));
        }
        let env = &self.envelope;
        if ![env.d_bar, env.phi_bar, env.b_bar, env.eps_bar]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return Err(malformed(
                "model",
                "envelope bounds must be finite and nonnegative",
            ));
        }
        let model = MetaModel {
            basis,
            coeffs: self.coeffs.into_iter().map(DVector::from_vec).collect(),
            a_prior: DVector::from_vec(self.a_prior),
            p_meta,
            report: self.report,
        };
        Ok((model, self.envelope))
    }
}

pub fn encode_model(
    model: &MetaModel,
    envelope: &EnvelopeBounds,
    config_hash: &str,
) -> Result<String> {
    encode(
        ArtifactKind::Model,
        config_hash,
        &ModelRecord::from_model(model, envelope),
    )
}

/// Parse a model file; returns the model, its envelope bounds and the config hash.
pub fn decode_model(text: &str) -> Result<(MetaModel, EnvelopeBounds, String)> {
    let artifact: Artifact<ModelRecord> = decode(text, ArtifactKind::Model)?;
    let (model, envelope) = artifact.payload.into_model()?;
    Ok((model, envelope, artifact.config_hash))
}

// ---------------------------------------------------------------------------
// metric field

/// Parse a metric-field file and check its grid shape.
pub fn decode_metric_field(text: &str) -> Result<(MetricField, String)> {
    let artifact: Artifact<MetricField> = decode(text, ArtifactKind::MetricField)?;
    artifact.payload.validate_shape()?;
    Ok((artifact.payload, artifact.config_hash))
}

// ---------------------------------------------------------------------------
// CSV tables

/// First line of every CSV table: `# dampc <table> schema_version=<n> config_hash=<hex>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableHeader {
    pub table: String,
    pub schema_version: u32,
    pub config_hash: String,
}

impl TableHeader {
    fn line(table: &str, config_hash: &str) -> String {
        format!(
            "# dampc {table} schema_version={ARTIFACT_SCHEMA_VERSION} config_hash={config_hash}\n"
        )
    }

    fn parse(line: &str, table: &str) -> Result<Self> {
        let what = "table header";
        let mut parts = line.trim_end().split(' ');
        if parts.next() != Some("#") || parts.next() != Some("dampc") {
            return Err(malformed(what, "missing `# dampc` comment line"));
        }
        let found = parts.next().unwrap_or_default();
        if found != table {
            return Err(malformed(
                what,
                format!("expected a {table} table, found {found:?}"),
            ));
        }
        let version = parts
            .next()
            .and_then(|p| p.strip_prefix("schema_version="))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| malformed(what, "missing schema_version"))?;
        if version != ARTIFACT_SCHEMA_VERSION {
            return Err(Error::Schema {
                expected: ARTIFACT_SCHEMA_VERSION,
                found: version,
            });
        }
        let hash = parts
            .next()
            .and_then(|p| p.strip_prefix("config_hash="))
            .ok_or_else(|| malformed(what, "missing config_hash"))?;
        check_hash(hash)?;
        if parts.next().is_some() {
            return Err(malformed(what, "trailing fields"));
        }
        Ok(Self {
            table: table.to_owned(),
            schema_version: version,
            config_hash: hash.to_owned(),
        })
    }
}

const STATE_FIELDS: [&str; 9] = ["px", "py", "pz", "vx", "vy", "vz", "roll", "pitch", "yaw"];
const CONTROL_FIELDS: [&str; 4] = ["f_u", "eta_u_roll", "eta_u_pitch", "eta_u_yaw"];

fn state_columns(prefix: &str) -> impl Iterator<Item = String> + '_ {
    STATE_FIELDS.iter().map(move |f| format!("{prefix}{f}"))
}

fn push_state(row: &mut Vec<String>, s: &ReducedState) {
    row.extend(s.to_vector().iter().map(f64::to_string));
}

fn push_control(row: &mut Vec<String>, u: &ReducedControl) {
    row.extend(u.to_vector().iter().map(f64::to_string));
}

/// Cursor over one CSV row with typed accessors.
struct Fields<'a> {
    record: &'a csv::StringRecord,
    at: usize,
    line: u64,
}

impl Fields<'_> {
    fn raw(&mut self) -> Result<&str> {
        let v = self
            .record
            .get(self.at)
            .ok_or_else(|| malformed("csv row", format!("line {}: too few fields", self.line)))?;
        self.at += 1;
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64> {
        let line = self.line;
        let raw = self.raw()?;
        raw.parse()
            .map_err(|_| malformed("csv row", format!("line {line}: {raw:?} is not a number")))
    }

    fn finite(&mut self) -> Result<f64> {
        let line = self.line;
        let v = self.f64()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(malformed(
                "csv row",
                format!("line {line}: non-finite value"),
            ))
        }
    }

    fn opt_f64(&mut self) -> Result<Option<f64>> {
        if self.record.get(self.at) == Some("") {
            self.at += 1;
            Ok(None)
        } else {
            self.f64().map(Some)
        }
    }

    fn usize(&mut self) -> Result<usize> {
        let line = self.line;
        let raw = self.raw()?;
        raw.parse()
            .map_err(|_| malformed("csv row", format!("line {line}: {raw:?} is not a count")))
    }

    fn flag(&mut self) -> Result<bool> {
        let line = self.line;
        match self.raw()? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(malformed(
                "csv row",
                format!("line {line}: flag {other:?} is not 0 or 1"),
            )),
        }
    }

    fn state(&mut self) -> Result<ReducedState> {
        let mut v = [0.0; 9];
        for slot in &mut v {
            *slot = self.finite()?;
        }
        Ok(ReducedState {
            p: Vector3::new(v[0], v[1], v[2]),
            v: Vector3::new(v[3], v[4], v[5]),
            eta: Vector3::new(v[6], v[7], v[8]),
        })
    }

    fn control(&mut self) -> Result<ReducedControl> {
        let f_u = self.finite()?;
        let eta_u = Vector3::new(self.finite()?, self.finite()?, self.finite()?);
        Ok(ReducedControl { f_u, eta_u })
    }

    fn end(&self) -> Result<()> {
        if self.at == self.record.len() {
            Ok(())
        } else {
            Err(malformed(
                "csv row",
                format!("line {}: too many fields", self.line),
            ))
        }
    }
}

/// Split off the comment header and return a CSV reader over the rest after
/// checking the column names.
fn open_table<'a>(
    text: &'a str,
    table: &str,
    columns: &dyn Fn(&csv::StringRecord) -> Result<Vec<String>>,
) -> Result<(TableHeader, csv::Reader<&'a [u8]>, Vec<String>)> {
    let (first, rest) = text
        .split_once('\n')
        .ok_or_else(|| malformed("table", "missing header line"))?;
    let header = TableHeader::parse(first, table)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(rest.as_bytes());
    let found = reader.headers()?.clone();
    let expected = columns(&found)?;
    if found.iter().ne(expected.iter().map(String::as_str)) {
        return Err(malformed(
            "table",
            format!("unexpected columns in {table} table"),
        ));
    }
    Ok((header, reader, expected))
}

fn write_rows(
    out: &mut String,
    header: &str,
    rows: impl Iterator<Item = Vec<String>>,
    columns: &[String],
) -> Result<()> {
    out.push_str(header);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(columns)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| malformed("csv writer", e.to_string()))?;
    out.push_str(std::str::from_utf8(&bytes).map_err(|e| malformed("csv writer", e.to_string()))?);
    Ok(())
}

// ---------------------------------------------------------------------------
// datasets

pub fn dataset_columns() -> Vec<String> {
    let mut c = vec!["t".to_owned()];
    c.extend(state_columns(""));
    c.extend(CONTROL_FIELDS.iter().map(|s| (*s).to_owned()));
    c.extend(["y_x", "y_y", "y_z"].iter().map(|s| (*s).to_owned()));
    c.extend(state_columns("r_"));
    c
}

pub fn encode_dataset_csv(samples: &[Sample], config_hash: &str) -> Result<String> {
    check_hash(config_hash)?;
    let mut out = String::new();
    let rows = samples.iter().map(|s| {
        let mut row = vec![s.t.to_string()];
        push_state(&mut row, &s.x);
        push_control(&mut row, &s.u);
        row.extend(s.y.iter().map(f64::to_string));
        push_state(&mut row, &s.x_r);
        row
    });
    write_rows(
        &mut out,
        &TableHeader::line("dataset", config_hash),
        rows,
        &dataset_columns(),
    )?;
    Ok(out)
}

pub fn parse_dataset_csv(text: &str) -> Result<(TableHeader, Vec<Sample>)> {
    let (header, mut reader, _) = open_table(text, "dataset", &|_| Ok(dataset_columns()))?;
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut f = Fields {
            record: &record,
            at: 0,
            line,
        };
        let t = f.finite()?;
        let x = f.state()?;
        let u = f.control()?;
        let y = Vector3::new(f.finite()?, f.finite()?, f.finite()?);
        let x_r = f.state()?;
        f.end()?;
        samples.push(Sample { t, x, u, y, x_r });
    }
    Ok((header, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEntry {
    pub file: String,
    pub condition: EnvConditions,
    pub samples: usize,
    /// SHA-256 of the file contents.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: DatasetConfig,
    pub vehicle: VehicleParams,
    pub conditions: Vec<ConditionEntry>,
}

fn plain_file_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"._-".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(malformed(
            "file name",
            format!("{name:?} is not a plain file name"),
        ))
    }
}

/// Write one CSV per condition plus the manifest; returns the manifest path.
pub fn write_dataset(
    dir: &Path,
    datasets: &[DomainDataset],
    cfg: &DatasetConfig,
    vehicle: &VehicleParams,
    config_hash: &str,
) -> Result<PathBuf> {
    let mut conditions = Vec::with_capacity(datasets.len());
    for (i, d) in datasets.iter().enumerate() {
        let file = format!("condition_{i:02}.csv");
        let text = encode_dataset_csv(&d.samples, config_hash)?;
        write_file(&dir.join(&file), text.as_bytes())?;
        conditions.push(ConditionEntry {
            file,
            condition: d.condition.clone(),
            samples: d.samples.len(),
            sha256: digest_hex(text.as_bytes()),
        });
    }
    let manifest = DatasetManifest {
        dataset: cfg.clone(),
        vehicle: vehicle.clone(),
        conditions,
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, ArtifactKind::DatasetManifest, config_hash, &manifest)?;
    Ok(path)
}

/// Load a dataset from its manifest, verifying digests, sample counts and config hashes.
pub fn read_dataset(
    manifest_path: &Path,
) -> Result<(Artifact<DatasetManifest>, Vec<DomainDataset>)> {
    let manifest: Artifact<DatasetManifest> =
        read_json(manifest_path, ArtifactKind::DatasetManifest)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut datasets = Vec::with_capacity(manifest.payload.conditions.len());
    for entry in &manifest.payload.conditions {
        plain_file_name(&entry.file)?;
        let path = dir.join(&entry.file);
        let text = read_file(&path)?;
        if digest_hex(text.as_bytes()) != entry.sha256 {
            return Err(malformed(
                "dataset",
                format!("{} does not match its manifest digest", path.display()),
            ));
        }
        let (header, samples) = parse_dataset_csv(&text)?;
        if header.config_hash != manifest.config_hash || samples.len() != entry.samples {
            return Err(malformed(
                "dataset",
                format!("{} disagrees with its manifest", path.display()),
            ));
        }
        datasets.push(DomainDataset {
            condition: entry.condition.clone(),
            samples,
        });
    }
    Ok((manifest, datasets))
}

// ---------------------------------------------------------------------------
// run logs

pub fn runlog_columns(k: usize) -> Vec<String> {
    let mut c = vec!["t".to_owned()];
    c.extend(state_columns(""));
    c.extend(state_columns("d_"));
    c.extend(state_columns("r_"));
    c.extend(CONTROL_FIELDS.iter().map(|s| (*s).to_owned()));
    c.extend((0..k).map(|i| format!("a_hat_{i}")));
    c.extend(
        [
            "lambda_min_p",
            "e_bar",
            "alpha_bar",
            "e_norm",
            "e_norm_m",
            "saturated",
            "replanned",
            "mpc_status",
            "mpc_iterations",
            "mpc_cost",
            "mpc_kkt_residual",
            "mpc_max_defect",
            "mpc_solve_ms",
            "cbac_us",
            "lyap_v",
            "lyap_v_dot",
            "lyap_rhs",
        ]
        .iter()
        .map(|s| (*s).to_owned()),
    );
    c
}

fn status_label(s: Option<PlanStatus>) -> &'static str {
    match s {
        None => "",
        Some(PlanStatus::Solved) => "solved",
        Some(PlanStatus::MaxIter) => "max_iter",
        Some(PlanStatus::InfeasibleRelaxed) => "infeasible_relaxed",
    }
}

fn parse_status(raw: &str, line: u64) -> Result<Option<PlanStatus>> {
    match raw {
        "" => Ok(None),
        "solved" => Ok(Some(PlanStatus::Solved)),
        "max_iter" => Ok(Some(PlanStatus::MaxIter)),
        "infeasible_relaxed" => Ok(Some(PlanStatus::InfeasibleRelaxed)),
        other => Err(malformed(
            "csv row",
            format!("line {line}: unknown plan status {other:?}"),
        )),
    }
}

pub fn encode_runlog_csv(records: &[StepRecord], config_hash: &str) -> Result<String> {
    check_hash(config_hash)?;
    let k = records.first().map_or(0, |r| r.a_hat.len());
    if records.iter().any(|r| r.a_hat.len() != k) {
        return Err(Error::invalid(
            "coefficient estimates change length within a run",
        ));
    }
    let rows = records.iter().map(|r| {
        let mut row = vec![r.t.to_string()];
        push_state(&mut row, &r.x);
        push_state(&mut row, &r.x_d);
        push_state(&mut row, &r.x_r);
        push_control(&mut row, &r.u);
        row.extend(r.a_hat.iter().map(f64::to_string));
        row.extend(
            [r.lambda_min_p, r.e_bar, r.alpha_bar, r.e_norm, r.e_norm_m].map(|v| v.to_string()),
        );
        row.push(u8::from(r.saturated).to_string());
        row.push(u8::from(r.replanned).to_string());
        row.push(status_label(r.mpc.status).to_owned());
        row.push(r.mpc.iterations.to_string());
        row.extend(
            [
                r.mpc.cost,
                r.mpc.kkt_residual,
                r.mpc.max_defect,
                r.mpc.solve_ms,
                r.cbac_us,
            ]
            .map(|v| v.to_string()),
        );
        match r.lyapunov {
            Some(l) => row.extend([l.v, l.v_dot, l.rhs].map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 3)),
        }
        row
    });
    let mut out = String::new();
    write_rows(
        &mut out,
        &TableHeader::line("runlog", config_hash),
        rows,
        &runlog_columns(k),
    )?;
    Ok(out)
}

pub fn parse_runlog_csv(text: &str) -> Result<(TableHeader, Vec<StepRecord>)> {
    let columns = |found: &csv::StringRecord| {
        let k = found.iter().filter(|c| c.starts_with("a_hat_")).count();
        Ok(runlog_columns(k))
    };
    let (header, mut reader, names) = open_table(text, "runlog", &columns)?;
    let k = names.iter().filter(|c| c.starts_with("a_hat_")).count();
    let mut records = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let mut f = Fields {
            record: &record,
            at: 0,
            line,
        };
        let t = f.finite()?;
        let x = f.state()?;
        let x_d = f.state()?;
        let x_r = f.state()?;
        let u = f.control()?;
        let a_hat = (0..k).map(|_| f.f64()).collect::<Result<Vec<_>>>()?;
        let lambda_min_p = f.f64()?;
        let e_bar = f.f64()?;
        let alpha_bar = f.f64()?;
        let e_norm = f.f64()?;
        let e_norm_m = f.f64()?;
        let saturated = f.flag()?;
        let replanned = f.flag()?;
        let status = parse_status(f.raw()?, line)?;
        let mpc = MpcStats {
            status,
            iterations: f.usize()?,
            cost: f.f64()?,
            kkt_residual: f.f64()?,
            max_defect: f.f64()?,
            solve_ms: f.f64()?,
        };
        let cbac_us = f.f64()?;
        let lyap = [f.opt_f64()?, f.opt_f64()?, f.opt_f64()?];
        let lyapunov = match lyap {
            [Some(v), Some(v_dot), Some(rhs)] => Some(LyapunovSample { v, v_dot, rhs }),
            [None, None, None] => None,
            _ => {
                return Err(malformed(
                    "csv row",
                    format!("line {line}: partial Lyapunov sample"),
                ))
            }
        };
        f.end()?;
        records.push(StepRecord {
            t,
            x,
            x_d,
            x_r,
            u,
            a_hat,
            lambda_min_p,
            e_bar,
            alpha_bar,
            e_norm,
            e_norm_m,
            saturated,
            replanned,
            mpc,
            cbac_us,
            lyapunov,
        });
    }
    Ok((header, records))
}

/// Contents of `summary.json`: the scenario, so the summary can be recomputed
/// from the CSV, and the summary itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub scenario: Scenario,
    pub summary: RunSummary,
}

pub fn decode_run_summary(text: &str) -> Result<Artifact<RunRecord>> {
    let artifact: Artifact<RunRecord> = decode(text, ArtifactKind::RunSummary)?;
    artifact.payload.scenario.validate()?;
    Ok(artifact)
}

/// `<root>/runs/<scenario>/<variant>/<seed>`
pub fn run_dir(root: &Path, scenario: &str, variant: Variant, seed: u64) -> Result<PathBuf> {
    plain_file_name(scenario)?;
    Ok(root
        .join("runs")
        .join(scenario)
        .join(variant.label())
        .join(seed.to_string()))
}

pub fn write_run(dir: &Path, log: &RunLog, config_hash: &str) -> Result<()> {
    let csv = encode_runlog_csv(&log.records, config_hash)?;
    write_file(&dir.join(RUN_LOG_FILE), csv.as_bytes())?;
    let record = RunRecord {
        scenario: log.scenario.clone(),
        summary: log.summary.clone(),
    };
    write_json(
        &dir.join(RUN_SUMMARY_FILE),
        ArtifactKind::RunSummary,
        config_hash,
        &record,
    )
}

pub fn read_run(dir: &Path) -> Result<(Artifact<RunRecord>, Vec<StepRecord>)> {
    let summary = decode_run_summary(&read_file(&dir.join(RUN_SUMMARY_FILE))?)?;
    let (header, records) = parse_runlog_csv(&read_file(&dir.join(RUN_LOG_FILE))?)?;
    if header.config_hash != summary.config_hash {
        return Err(malformed(
            "run",
            format!(
                "{} and its summary come from different configs",
                dir.display()
            ),
        ));
    }
    Ok((summary, records))
}

/// Comparison table over run summaries, one line per run.
pub fn comparison_table(summaries: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<16} {:>5} {:>9} {:>9} {:>9} {:>10}",
        "scenario", "variant", "seed", "rmse", "terminal", "height", "violation"
    );
    for s in summaries {
        let violation = s
            .bound_violation_fraction
            .map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        let _ = writeln!(
            out,
            "{:<12} {:<16} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>10}",
            s.scenario,
            s.variant.label(),
            s.seed,
            s.rmse,
            s.terminal_error,
            s.terminal_height_error,
            violation
        );
    }
    out
}
