use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dampc::config::RunConfig;
use dampc::harness::{ScenarioKind, Variant};

mod commands;
mod error;

use error::{CliError, CliResult};

/// Disturbance-aware quadrotor planning and control pipeline.
#[derive(Parser, Debug)]
#[command(name = "dampc", version)]
struct Cli {
    /// Pipeline configuration (JSON); omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the configured output directory.
    #[arg(long, global = true, env = "DAMPC_OUT")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the training conditions and write the residual dataset.
    GenData,
    /// Meta-train the residual basis and estimate its envelope bounds.
    Train,
    /// Synthesize and certify the contraction metric over the attitude-thrust grid.
    SynthMetric,
    /// Run closed-loop experiments.
    Run(RunArgs),
    /// Re-check stored artifacts.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
    },
    /// Collect run summaries into CSV tables.
    Report,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    #[arg(long, value_parser = parse_variant, conflicts_with = "all_variants")]
    variant: Option<Variant>,
    /// Run the nominal, mpc-plus-mlcbac and full variants.
    #[arg(long)]
    all_variants: bool,
    /// Seed; defaults to the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario duration, s.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    /// Metric LMIs and bounds at every node, and the network Lipschitz budget.
    Certificates,
    /// Recompute every persisted run summary from its log.
    Runs,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: dampc::Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: dampc::Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<(RunConfig, PathBuf)> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(CliError::Config)?,
        None => RunConfig::default(),
    };
    let root = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, root))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let (cfg, root) = load_config(cli)?;
    let layout = commands::Layout::new(root);
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &layout),
        Command::Train => commands::train(&cfg, &layout),
        Command::SynthMetric => commands::synth_metric(&cfg, &layout),
        Command::Run(args) => {
            let variants = match (args.variant, args.all_variants) {
                (Some(v), _) => vec![v],
                (None, true) => Variant::ALL.to_vec(),
                (None, false) => {
                    return Err(CliError::Config(dampc::Error::InvalidArgument(
                        "pass --variant or --all-variants".into(),
                    )))
                }
            };
            let seeds = args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            commands::run(
                &cfg,
                &layout,
                args.scenario,
                &variants,
                &seeds,
                args.duration,
            )
        }
        Command::Verify {
            suite: Suite::Certificates,
        } => commands::verify_certificates(&cfg, &layout),
        Command::Verify { suite: Suite::Runs } => commands::verify_runs(&layout),
        Command::Report => commands::report(&layout),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
