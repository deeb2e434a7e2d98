use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gpvae::missingness::Mechanism;
use gpvae_cli::config::{ModelKind, Overrides, RunConfig};
use gpvae_cli::run::{read_json, Runner};
use gpvae_cli::{CliError, Result};

/// Time-series imputation with GP-prior variational autoencoders and
/// classical baselines.
#[derive(Parser, Debug)]
#[command(name = "gpvae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build the dataset and its artificial mask under DIR/data.
    Generate,
    /// Train the selected model on the masked training split.
    Train,
    /// Impute every series with the selected model.
    Impute,
    /// Compute test-split metrics for the selected model.
    Evaluate,
    /// Collect metrics of all models into DIR/report.{csv,md}.
    Report,
    /// Generate, train, impute and evaluate every model, then report.
    Pipeline,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Impute => "impute",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
            Command::Pipeline => "pipeline",
            Command::ShowConfig => "show-config",
        }
    }
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Replay the configuration recorded in a run's manifest.json.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory (else config `output_dir`, else $GPVAE_OUTPUT_DIR, else ./gpvae-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model for train/impute/evaluate.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    /// Comma-separated models for pipeline/report.
    #[arg(long, global = true, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Replace the GP prior by a standard normal (network models only).
    #[arg(long, global = true)]
    no_gp_prior: bool,
    /// Diagonal posterior and likelihood over all entries, imputed ones included.
    #[arg(long, global = true)]
    full_elbo: bool,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    /// Target fraction of hidden entries.
    #[arg(long, global = true)]
    mask_rate: Option<f64>,
    /// mcar, spatial, temporal_pos, temporal_neg or mnar.
    #[arg(long, global = true, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    /// Number of synthetic series.
    #[arg(long, global = true)]
    n_series: Option<usize>,
    /// Recompute every stage instead of reusing up-to-date outputs.
    #[arg(long, global = true)]
    force: bool,
    /// More logging (-v info, -vv debug); RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

fn parse_mechanism(s: &str) -> std::result::Result<Mechanism, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!(
            "unknown mechanism {s:?} (expected mcar, spatial, temporal_pos, temporal_neg or mnar)"
        )
    })
}

#[derive(serde::Deserialize)]
struct RunManifest {
    config: RunConfig,
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match (&c.config, &c.manifest) {
        (Some(path), _) => RunConfig::from_toml_file(path)?,
        (None, Some(path)) => {
            read_json::<RunManifest>(path)
                .map_err(|e| CliError::Config(e.to_string()))?
                .config
        }
        (None, None) => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: c.seed,
        output_dir: c.out.clone(),
        model: c.model,
        models: c.models.clone(),
        no_gp_prior: c.no_gp_prior,
        full_elbo: c.full_elbo,
        epochs: c.epochs,
        learning_rate: c.learning_rate,
        batch_size: c.batch_size,
        beta: c.beta,
        latent_dim: c.latent_dim,
        mask_rate: c.mask_rate,
        mechanism: c.mechanism,
        n_series: c.n_series,
    });
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if let Command::ShowConfig = cli.command {
        cfg.validate()?;
        print!(
            "{}",
            toml::to_string(&cfg).map_err(|e| CliError::Config(e.to_string()))?
        );
        return Ok(());
    }
    let runner = Runner::new(cfg, cli.common.force)?;
    runner.write_run_manifest(cli.command.name())?;
    let kind = runner.config().model;
    match cli.command {
        Command::Generate => {
            runner.generate()?;
        }
        Command::Train => {
            let ds = runner.dataset()?;
            runner.train(&ds, kind)?;
        }
        Command::Impute => {
            let ds = runner.dataset()?;
            runner.impute(&ds, kind)?;
        }
        Command::Evaluate => {
            let ds = runner.dataset()?;
            for r in runner.evaluate(&ds, kind)? {
                println!("{kind}\t{}\t{}\t{}\t{}", r.metric, r.mean, r.std_error, r.n);
            }
        }
        Command::Report | Command::Pipeline => {
            let rows = if let Command::Pipeline = cli.command {
                runner.pipeline()?
            } else {
                runner.report(&runner.dataset()?)?
            };
            for (m, r) in rows {
                println!("{m}\t{}\t{}\t{}\t{}", r.metric, r.mean, r.std_error, r.n);
            }
        }
        Command::ShowConfig => unreachable!(),
    }
    log::info!("outputs in {}", runner.workspace().root().display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
