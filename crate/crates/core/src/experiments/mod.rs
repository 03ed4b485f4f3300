//! Deterministic experiment sweeps and their CSV outputs.
//!
//! Every random draw comes from a stream derived from the master seed and a
//! label path naming the task (see [`crate::rng`]); parallel work is gathered
//! in task order. Outputs are therefore byte-identical for a fixed
//! configuration whatever the number of worker threads.

mod config;
mod output;
mod runs;

pub use config::{
    ExperimentConfig, LossConfig, RegimesConfig, ScheduleConfig, SplitConfig, StartMode, SweepConfig, UTurnConfig,
};
pub use output::{read_csv, sha256_file, OutputDir, RunManifest, Status};
pub use runs::{
    run_epsilon_sweep, run_loss_decomposition, run_regimes, run_sample_split, run_uturn, EpsHistogram, EpsSweep,
    EpsSweepRow, HistogramRow, LossRow, RegimeRow, SplitRow, UTurnRow,
};

use std::time::Instant;

use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::grammar::{
    dataset_to_string, generate_grammar, grammar_to_json, read_dataset, read_grammar, Dataset, Grammar,
    SequenceSample,
};
use crate::rng::{derive_seed, tag};

/// Everything a run needs, resolved from a validated configuration.
#[derive(Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub grammar: Grammar,
    pub schedule: NoiseSchedule,
    pub train: Dataset,
}

impl Context {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let grammar = match &config.grammar_file {
            Some(p) => read_grammar(p)?,
            None => generate_grammar(&config.grammar)?,
        };
        let s = &config.schedule;
        let schedule = build_schedule(s.steps, s.beta_start, s.beta_end)?.with_variance(s.variance);
        let train = match &config.data_file {
            Some(p) => {
                let d = read_dataset(p)?;
                d.check_against(&grammar).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                if d.len() < 2 {
                    return Err(Error::config("training data needs at least two sequences"));
                }
                d
            }
            None => Dataset::generate(&grammar, config.n_train, derive_seed(config.seed, &[tag::DATA])),
        };
        Ok(Context {
            config,
            grammar,
            schedule,
            train,
        })
    }

    /// Fresh i.i.d. grammar samples, independent of the training data.
    pub fn fresh(&self, purpose: u64, n: usize) -> Vec<SequenceSample> {
        Dataset::generate(&self.grammar, n, derive_seed(self.config.seed, &[tag::TEST, purpose])).sequences
    }

    /// Time step closest to `frac * T`, at least 1.
    pub fn time_at(&self, frac: f64) -> usize {
        let steps = self.schedule.steps();
        ((frac * steps as f64).round() as usize).clamp(1, steps)
    }

    pub fn q(&self) -> usize {
        self.grammar.q()
    }

    fn output(&self) -> Result<OutputDir> {
        OutputDir::new(
            &self.config.out,
            &self.config.hash(),
            self.grammar.fingerprint(),
            self.config.seed,
        )
    }
}

/// CLI subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenGrammar,
    GenData,
    Regimes,
    EpsSweep,
    UTurn,
    SampleSplit,
    LossDecomp,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenGrammar => "gen-grammar",
            Command::GenData => "gen-data",
            Command::Regimes => "regimes",
            Command::EpsSweep => "eps-sweep",
            Command::UTurn => "uturn",
            Command::SampleSplit => "sample-split",
            Command::LossDecomp => "loss-decomp",
        }
    }

    /// The file whose presence marks the command as finished.
    pub fn primary_output(self) -> &'static str {
        match self {
            Command::GenGrammar => "grammar.json",
            Command::GenData => "train.txt",
            Command::Regimes => "regimes.csv",
            Command::EpsSweep => "eps_sweep.csv",
            Command::UTurn => "uturn.csv",
            Command::SampleSplit => "sample_split.csv",
            Command::LossDecomp => "loss_decomp.csv",
        }
    }
}

/// Sidecar name for the overlap histograms of one sharpness value.
pub fn histogram_file(eps: f64) -> String {
    format!("eps_sweep_hist_eps{eps}.csv")
}

/// Run `command`, writing its outputs and manifest into the configured
/// directory. Returns `None` when the outputs were already complete.
pub fn execute(command: Command, ctx: &Context) -> Result<Option<RunManifest>> {
    let start = Instant::now();
    let mut out = ctx.output()?;
    let primary = command.primary_output();
    let text_output = matches!(command, Command::GenGrammar | Command::GenData);
    if !text_output && out.status(primary)? == Status::Complete {
        return Ok(None);
    }
    match command {
        Command::GenGrammar => out.write_text(primary, &grammar_to_json(&ctx.grammar)?)?,
        Command::GenData => {
            let test = Dataset::generate(
                &ctx.grammar,
                ctx.config.n_test,
                derive_seed(ctx.config.seed, &[tag::TEST, u64::MAX]),
            );
            out.write_text("test.txt", &dataset_to_string(&test))?;
            out.write_text(primary, &dataset_to_string(&ctx.train))?;
        }
        Command::Regimes => out.write_csv(primary, &run_regimes(ctx)?)?,
        Command::EpsSweep => {
            let sweep = run_epsilon_sweep(ctx)?;
            for h in &sweep.histograms {
                out.write_csv(&histogram_file(h.eps), &h.rows())?;
            }
            out.write_csv(primary, &sweep.rows)?;
        }
        Command::UTurn => out.write_csv(primary, &run_uturn(ctx)?)?,
        Command::SampleSplit => out.write_csv(primary, &run_sample_split(ctx)?)?,
        Command::LossDecomp => out.write_csv(primary, &run_loss_decomposition(ctx)?)?,
    }
    out.write_manifest(
        command.name(),
        &ctx.config,
        ctx.grammar.fingerprint(),
        start.elapsed().as_secs_f64(),
    )
    .map(Some)
}
