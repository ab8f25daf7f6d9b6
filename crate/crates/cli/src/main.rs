//! `cavlab`: runs one pipeline stage per invocation.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cavlab::lab::{Lab, LabConfig};
use cavlab::nn::LayerId;
use cavlab::Error;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "cavlab",
    version,
    about = "Concept activation vector experiments on synthetic Elements data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and consistency baselines.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact store directory.
    #[arg(long, global = true, default_value = "cavlab-out")]
    out: PathBuf,
    /// Comma-separated layers, e.g. `layers.2,layers.3` or `2,3`.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Comma-separated probe concepts, e.g. `red,striped@left`.
    #[arg(long, global = true, value_delimiter = ',')]
    concepts: Option<Vec<String>>,
    /// Comma-separated class names, e.g. `striped_triangle`.
    #[arg(long, global = true, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    /// Consistency perturbation scale.
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Random negative sets and CAVs per concept family.
    #[arg(long, global = true)]
    r: Option<usize>,
    /// Significance threshold for TCAV.
    #[arg(long = "p-threshold", global = true)]
    p_threshold: Option<f64>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training and validation scenes.
    Gen,
    /// Train the network on the generated scenes.
    Train,
    /// Capture probe activations at every probed layer.
    Capture,
    /// Train concept and random CAVs.
    Cav,
    /// Score TCAV for every class, concept and eligible layer.
    Tcav,
    /// Layer-consistency errors for one concept between two layers.
    Consistency,
    /// Cosine matrices and dot-product entanglement flags.
    Entangle,
    /// Spatial norm grids, dependence tests and the spatial TCAV suite.
    Spatial,
    /// Verify and index every analysis present for the configuration.
    Report,
    /// Check the linear, ReLU and sigmoid consistency cases numerically.
    VerifyTheory {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Capture => "capture",
            Command::Cav => "cav",
            Command::Tcav => "tcav",
            Command::Consistency => "consistency",
            Command::Entangle => "entangle",
            Command::Spatial => "spatial",
            Command::Report => "report",
            Command::VerifyTheory { .. } => "verify-theory",
        }
    }
}

fn parse_layers(items: &[String]) -> cavlab::Result<Vec<LayerId>> {
    items.iter().map(|s| s.parse()).collect()
}

fn build_config(cli: &Cli) -> anyhow::Result<LabConfig> {
    let mut config = match &cli.config {
        Some(path) => LabConfig::load(path)?,
        None => LabConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.dataset.seed = seed;
        config.training.seed = seed;
        config.consistency.seed = seed;
    }
    if let Some(layers) = &cli.layers {
        config.probes.layers = parse_layers(layers).map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(concepts) = &cli.concepts {
        config.probes.concepts = concepts.clone();
    }
    if let Some(classes) = &cli.classes {
        config.tcav.classes = classes.clone();
    }
    if let Some(gamma) = cli.gamma {
        config.consistency.gamma = gamma;
    }
    if let Some(r) = cli.r {
        config.probes.r = r;
    }
    if let Some(p) = cli.p_threshold {
        config.tcav.p_threshold = p;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> anyhow::Result<String> {
    cavlab::sys::configure_threads().map_err(Error::Config)?;
    let config = build_config(cli)?;
    let mut lab = Lab::new(config, &cli.out)?;
    lab.progress = !cli.quiet;
    let outcome = match &cli.command {
        Command::VerifyTheory { dim, trials } => lab.verify_theory(*dim, *trials),
        other => lab.run_stage(other.stage()),
    }
    .with_context(|| format!("stage `{}` failed", cli.command.stage()))?;
    Ok(outcome.line)
}

/// 2 for configuration errors, 3 for missing artifacts, 4 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(
            Error::Config(_)
            | Error::UnknownConcept(_)
            | Error::UnknownRegion(_)
            | Error::UnknownClass(_),
        ) => 2,
        Some(Error::InvalidLayer(_)) => 2,
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    cavlab::sys::tune_allocator();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
