use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use diffbias::experiments::{execute, Command, Context, ExperimentConfig};
use diffbias::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Diffusion on hierarchical sequence data: denoisers, bias metrics and sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the grammar as JSON.
    GenGrammar(Common),
    /// Write training and test datasets.
    GenData(Common),
    /// Divergence of filtered and configured denoisers from the exact one along reverse trajectories.
    Regimes(Common),
    /// Test loss, nearest-neighbor divergence and replication over the sharpness grid.
    EpsSweep(Common),
    /// Recovery of noised train, test and random starts relative to the exact denoiser.
    Uturn(Common),
    /// Disagreement between denoisers built on disjoint halves of the data.
    SampleSplit(Common),
    /// Excess and distillation loss terms on train and test draws.
    LossDecomp(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; unspecified fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    /// Comma-separated sharpness grid.
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long)]
    grammar_file: Option<PathBuf>,
    #[arg(long)]
    data_file: Option<PathBuf>,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    path: path.clone(),
                    msg: e.to_string(),
                })?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.threads {
            c.threads = Some(v);
        }
        if let Some(v) = self.steps {
            c.schedule.steps = v;
        }
        if let Some(v) = self.beta_start {
            c.schedule.beta_start = v;
        }
        if let Some(v) = self.beta_end {
            c.schedule.beta_end = v;
        }
        if let Some(v) = self.n_train {
            c.n_train = v;
        }
        if let Some(v) = self.eps {
            c.eps_grid = v;
        }
        if self.grammar_file.is_some() {
            c.grammar_file = self.grammar_file;
        }
        if self.data_file.is_some() {
            c.data_file = self.data_file;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    let (command, common) = match cli.command {
        Cmd::GenGrammar(c) => (Command::GenGrammar, c),
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::Regimes(c) => (Command::Regimes, c),
        Cmd::EpsSweep(c) => (Command::EpsSweep, c),
        Cmd::Uturn(c) => (Command::UTurn, c),
        Cmd::SampleSplit(c) => (Command::SampleSplit, c),
        Cmd::LossDecomp(c) => (Command::LossDecomp, c),
    };
    let config = common.resolve()?;
    if let Some(n) = config.threads {
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Invalid(e.to_string()))?;
        }
    }
    let ctx = Context::new(config)?;
    match execute(command, &ctx)? {
        Some(m) => eprintln!(
            "{}: wrote {} file(s) to {} in {:.1}s",
            command.name(),
            m.files.len(),
            ctx.config.out.display(),
            m.wall_clock_seconds
        ),
        None => eprintln!(
            "{}: outputs in {} are already complete",
            command.name(),
            ctx.config.out.display()
        ),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
