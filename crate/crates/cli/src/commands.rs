use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dampc::adaptation::{estimate_envelope, EnvelopeBounds};
use dampc::artifacts::{
    comparison_table, decode_metric_field, decode_model, encode_model, read_dataset, read_run,
    run_dir, write_dataset, write_json, write_run, ArtifactKind, RUN_SUMMARY_FILE,
};
use dampc::ccm::{build_metric_field, MetricField};
use dampc::config::{RunConfig, Stage};
use dampc::disturbance::generate_meta_dataset;
use dampc::harness::{
    run_many, summarize, HarnessConfig, RunContext, RunSummary, ScenarioKind, Variant,
};
use dampc::nn::{train_meta, MetaModel};
use dampc::Error;

use crate::error::{CliError, CliResult};

/// Tolerance on the re-checked metric LMIs.
const CERTIFICATE_TOL: f64 = 1e-8;

pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Self { root }
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    fn manifest(&self) -> PathBuf {
        self.data_dir().join(dampc::artifacts::MANIFEST_FILE)
    }

    fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    fn metric(&self) -> PathBuf {
        self.root.join("metric.json")
    }

    fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn hash(cfg: &RunConfig, stage: Stage) -> CliResult<String> {
    cfg.stage_hash(stage).map_err(CliError::Config)
}

fn missing(path: &Path, reason: impl Into<String>, producer: &'static str) -> CliError {
    CliError::Missing {
        path: path.to_path_buf(),
        reason: reason.into(),
        producer,
    }
}

/// Read an input artifact, reporting absence with the command that produces it.
fn read_input(path: &Path, producer: &'static str) -> CliResult<String> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(missing(path, "not found", producer))
        }
        Err(e) => Err(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()),
    }
}

fn check_fresh(path: &Path, found: &str, expected: &str, producer: &'static str) -> CliResult<()> {
    if found == expected {
        Ok(())
    } else {
        Err(missing(
            path,
            "produced under a different configuration",
            producer,
        ))
    }
}

fn load_metric(cfg: &RunConfig, layout: &Layout) -> CliResult<MetricField> {
    let path = layout.metric();
    let (field, found) = decode_metric_field(&read_input(&path, "synth-metric")?)?;
    check_fresh(&path, &found, &hash(cfg, Stage::Metric)?, "synth-metric")?;
    Ok(field)
}

fn load_model(cfg: &RunConfig, layout: &Layout) -> CliResult<(MetaModel, EnvelopeBounds)> {
    let path = layout.model();
    let (model, envelope, found) = decode_model(&read_input(&path, "train")?)?;
    check_fresh(&path, &found, &hash(cfg, Stage::Model)?, "train")?;
    Ok((model, envelope))
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let started = Instant::now();
    let datasets = generate_meta_dataset(&cfg.dataset, &cfg.vehicle).map_err(CliError::Config)?;
    let manifest = write_dataset(
        &layout.data_dir(),
        &datasets,
        &cfg.dataset,
        &cfg.vehicle,
        &hash(cfg, Stage::Dataset)?,
    )?;
    let samples: usize = datasets.iter().map(|d| d.samples.len()).sum();
    println!(
        "wrote {} conditions ({samples} samples) to {} in {:.1} s",
        datasets.len(),
        manifest.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(missing(&path, "not found", "gen-data"));
    }
    let (manifest, datasets) = read_dataset(&path)?;
    check_fresh(
        &path,
        &manifest.config_hash,
        &hash(cfg, Stage::Dataset)?,
        "gen-data",
    )?;
    let started = Instant::now();
    let model = train_meta(&datasets, &cfg.train)?;
    let envelope = estimate_envelope(&model, &datasets, &cfg.envelope, &cfg.vehicle)?;
    let text = encode_model(&model, &envelope, &hash(cfg, Stage::Model)?)?;
    let out = layout.model();
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(&out, text).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let report = &model.report;
    let last = report.history.last();
    println!(
        "trained {} epochs in {:.1} s (best epoch {}); wrote {}",
        report.history.len(),
        started.elapsed().as_secs_f64(),
        report.best_epoch,
        out.display()
    );
    if let (Some(val), Some(base)) = (
        last.and_then(|e| e.validation_loss),
        report.validation_baseline,
    ) {
        println!("held-out loss {val:.4} against zero-model baseline {base:.4}");
    }
    println!(
        "envelope: d_bar {:.4}  phi_bar {:.4}  b_bar {:.4}  eps_bar {:.4}",
        envelope.d_bar, envelope.phi_bar, envelope.b_bar, envelope.eps_bar
    );
    Ok(())
}

pub fn synth_metric(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let started = Instant::now();
    let field = build_metric_field(&cfg.metric, &cfg.vehicle)?;
    let failing = field.verify(CERTIFICATE_TOL)?;
    let out = layout.metric();
    write_json(
        &out,
        ArtifactKind::MetricField,
        &hash(cfg, Stage::Metric)?,
        &field,
    )?;
    println!(
        "{} nodes, alpha {:.4}, max omega_chi {:.3}, built in {:.1} s; wrote {}",
        field.nodes.len(),
        field.alpha,
        field.omega_chi(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "nodes {failing:?} fail re-certification"
        )))
    }
}

pub fn run(
    cfg: &RunConfig,
    layout: &Layout,
    kind: ScenarioKind,
    variants: &[Variant],
    seeds: &[u64],
    duration: Option<f64>,
) -> CliResult<()> {
    let field = load_metric(cfg, layout)?;
    let learned = if variants.iter().any(|v| v.adaptive()) {
        Some(load_model(cfg, layout)?)
    } else {
        None
    };
    let mut scenarios = Vec::new();
    for &seed in seeds {
        for &v in variants {
            let mut s = cfg.scenarios.build(kind, v, seed);
            if let Some(d) = duration {
                s.duration = d;
            }
            s.validate().map_err(CliError::Config)?;
            scenarios.push(s);
        }
    }
    let harness: &HarnessConfig = &cfg.harness;
    let ctx = RunContext {
        field: &field,
        model: learned.as_ref().map(|(m, _)| m),
        envelope: learned.as_ref().map(|(_, e)| e),
        params: &cfg.vehicle,
        cfg: harness,
    };
    let run_hash = hash(cfg, Stage::Run)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut summaries = Vec::new();
    let mut aborted = Vec::new();
    for (scenario, result) in scenarios.iter().zip(run_many(&scenarios, &ctx, threads)) {
        let log = result?;
        let dir = run_dir(
            &layout.root,
            &scenario.name,
            scenario.variant,
            scenario.seed,
        )?;
        write_run(&dir, &log, &run_hash)?;
        if let Some(reason) = &log.summary.aborted {
            aborted.push(format!(
                "{} {} seed {}: {reason}",
                scenario.name, scenario.variant, scenario.seed
            ));
        }
        summaries.push(log.summary);
    }
    print!("{}", comparison_table(&summaries));
    if aborted.is_empty() {
        Ok(())
    } else {
        Err(CliError::Aborted(aborted.join("; ")))
    }
}

pub fn verify_certificates(cfg: &RunConfig, layout: &Layout) -> CliResult<()> {
    let field = load_metric(cfg, layout)?;
    let (model, _) = load_model(cfg, layout)?;
    let mut problems = Vec::new();
    let failing = field.verify(CERTIFICATE_TOL)?;
    if !failing.is_empty() {
        problems.push(format!("metric nodes {failing:?} fail re-certification"));
    }
    let budget = model.basis.layer_budget();
    for (i, norm) in model.basis.layer_spectral_norms().into_iter().enumerate() {
        if norm > budget * (1.0 + 1e-9) {
            problems.push(format!(
                "layer {i} spectral norm {norm:.6} exceeds budget {budget:.6}"
            ));
        }
    }
    let lip = model.basis.lipschitz_bound();
    if lip > model.basis.gamma * (1.0 + 1e-9) {
        problems.push(format!(
            "network Lipschitz bound {lip:.6} exceeds gamma {}",
            model.basis.gamma
        ));
    }
    println!(
        "{} metric nodes checked, network Lipschitz bound {lip:.4} (gamma {})",
        field.nodes.len(),
        model.basis.gamma
    );
    if problems.is_empty() {
        println!("all certificates hold");
        Ok(())
    } else {
        Err(CliError::Verification(problems.join("; ")))
    }
}

/// Run directories under `runs/`, sorted.
fn run_dirs(layout: &Layout) -> CliResult<Vec<PathBuf>> {
    let root = layout.runs();
    let mut dirs = Vec::new();
    let list = |p: &Path| -> CliResult<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    if !root.is_dir() {
        return Ok(dirs);
    }
    for scenario in list(&root)? {
        for variant in list(&scenario)? {
            for seed in list(&variant)? {
                if seed.join(RUN_SUMMARY_FILE).exists() {
                    dirs.push(seed);
                }
            }
        }
    }
    Ok(dirs)
}

fn require_runs(layout: &Layout) -> CliResult<Vec<PathBuf>> {
    let dirs = run_dirs(layout)?;
    if dirs.is_empty() {
        return Err(missing(&layout.runs(), "no runs found", "run"));
    }
    Ok(dirs)
}

pub fn verify_runs(layout: &Layout) -> CliResult<()> {
    let mut mismatched = Vec::new();
    let dirs = require_runs(layout)?;
    for dir in &dirs {
        let (art, records) = read_run(dir)?;
        let stored = &art.payload.summary;
        let again = summarize(&art.payload.scenario, &records, stored.aborted.clone())?;
        if &again != stored {
            mismatched.push(dir.display().to_string());
        }
    }
    println!("{} runs checked", dirs.len());
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "summaries disagree with their logs: {}",
            mismatched.join(", ")
        )))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn report(layout: &Layout) -> CliResult<()> {
    let dirs = require_runs(layout)?;
    let mut summaries: Vec<RunSummary> = Vec::with_capacity(dirs.len());
    let mut rows = String::from(
        "scenario,variant,seed,run_dir,rmse,terminal_error,terminal_height_error,bound_violation_fraction,\
         lyapunov_pass_fraction,touchdown_t,touchdown_v_z,saturation_fraction,cbac_median_us,mpc_median_ms,mpc_max_ms\n",
    );
    for dir in &dirs {
        let (art, _) = read_run(dir)?;
        let s = art.payload.summary;
        let rel = dir.strip_prefix(&layout.root).unwrap_or(dir);
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.scenario,
            s.variant,
            s.seed,
            rel.display(),
            s.rmse,
            s.terminal_error,
            s.terminal_height_error,
            opt(s.bound_violation_fraction),
            opt(s.lyapunov_pass_fraction),
            opt(s.touchdown.map(|t| t.t)),
            opt(s.touchdown.map(|t| t.v_z)),
            s.saturation_fraction,
            s.timing.cbac_median_us,
            s.timing.mpc_median_ms,
            s.timing.mpc_max_ms,
        ));
        summaries.push(s);
    }
    let dir = layout.report();
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let out = dir.join("summary.csv");
    fs::write(&out, rows).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    print!("{}", comparison_table(&summaries));
    println!("wrote {}", out.display());
    Ok(())
}
