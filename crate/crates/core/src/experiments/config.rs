use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoisers::DenoiserSpec;
use crate::diffusion::ReverseVariance;
use crate::error::{Error, Result};
use crate::grammar::GrammarSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance: ReverseVariance,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 500,
            beta_start: 2e-4,
            beta_end: 4e-2,
            variance: ReverseVariance::Beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimesConfig {
    /// Reverse trajectories driven by the exact denoiser.
    pub trajectories: usize,
    /// Record every `every`-th time step.
    pub every: usize,
    /// Denoisers compared in addition to every filtered level.
    pub denoisers: Vec<String>,
}

impl Default for RegimesConfig {
    fn default() -> Self {
        RegimesConfig {
            trajectories: 2000,
            every: 5,
            denoisers: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Clean test sequences for the loss and the fixed-time divergence.
    pub n_eval: usize,
    /// Noise draws per clean sequence.
    pub reps: usize,
    /// Generated sequences per replicate of the nearest-neighbor divergence.
    pub samples: usize,
    pub replicates: usize,
    /// Time of the divergence to the exact denoiser, as a fraction of T.
    pub t_frac: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_eval: 3000,
            reps: 5,
            samples: 5000,
            replicates: 5,
            t_frac: 0.15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    Train,
    Test,
    Random,
}

impl StartMode {
    pub fn as_str(self) -> &'static str {
        match self {
            StartMode::Train => "train",
            StartMode::Test => "test",
            StartMode::Random => "random",
        }
    }

    pub(crate) fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UTurnConfig {
    pub starts: usize,
    pub reps: usize,
    pub t_fracs: Vec<f64>,
    pub modes: Vec<StartMode>,
    pub denoisers: Vec<String>,
}

impl Default for UTurnConfig {
    fn default() -> Self {
        UTurnConfig {
            starts: 100,
            reps: 1000,
            t_fracs: vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.5],
            modes: vec![StartMode::Train, StartMode::Test, StartMode::Random],
            denoisers: ["eps:eps=1", "eps:eps=2", "eps:eps=3", "eps:eps=5", "eps:eps=50"]
                .map(String::from)
                .to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub t_fracs: Vec<f64>,
    pub n_eval: usize,
    pub reps: usize,
    /// Generated pairs sharing all of their noise.
    pub pairs: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            t_fracs: vec![0.15],
            n_eval: 3000,
            reps: 5,
            pairs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub t: usize,
    pub n_eval: usize,
    pub reps: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            t: 150,
            n_eval: 3000,
            reps: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grammar: GrammarSpec,
    /// Read the grammar from this file instead of generating it.
    pub grammar_file: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Read training data from this file instead of sampling it.
    pub data_file: Option<PathBuf>,
    pub eps_grid: Vec<f64>,
    pub regimes: RegimesConfig,
    pub eps_sweep: SweepConfig,
    pub uturn: UTurnConfig,
    pub sample_split: SplitConfig,
    pub loss_decomp: LossConfig,
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            grammar: GrammarSpec::default(),
            grammar_file: None,
            schedule: ScheduleConfig::default(),
            seed: 0,
            n_train: 5000,
            n_test: 5000,
            data_file: None,
            eps_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 7.0, 10.0, 20.0, 50.0],
            regimes: RegimesConfig::default(),
            eps_sweep: SweepConfig::default(),
            uturn: UTurnConfig::default(),
            sample_split: SplitConfig::default(),
            loss_decomp: LossConfig::default(),
            out: PathBuf::from("out"),
            threads: None,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(format!("{name} must be positive")));
    }
    Ok(())
}

fn fractions(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::config(format!("{name} must not be empty")));
    }
    if let Some(f) = v.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::config(format!("{name} entry {f} is not in (0, 1]")));
    }
    Ok(())
}

fn specs(name: &str, v: &[String]) -> Result<Vec<DenoiserSpec>> {
    v.iter()
        .map(|s| s.parse().map_err(|e: Error| Error::config(format!("{name}: {e}"))))
        .collect()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        for (what, path) in [("grammar_file", &self.grammar_file), ("data_file", &self.data_file)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(format!("{what} {} does not exist", p.display())));
                }
            }
        }
        let s = &self.schedule;
        positive("schedule.steps", s.steps)?;
        if !(s.beta_start > 0.0 && s.beta_end < 1.0 && s.beta_start <= s.beta_end) {
            return Err(Error::config("schedule needs 0 < beta_start <= beta_end < 1"));
        }
        if self.n_train < 2 {
            return Err(Error::config("n_train must be at least 2"));
        }
        positive("n_test", self.n_test)?;
        if self.eps_grid.is_empty() {
            return Err(Error::config("eps_grid must not be empty"));
        }
        if let Some(e) = self.eps_grid.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::config(format!("sharpness {e} must be finite and nonnegative")));
        }
        positive("regimes.trajectories", self.regimes.trajectories)?;
        positive("regimes.every", self.regimes.every)?;
        specs("regimes.denoisers", &self.regimes.denoisers)?;
        let w = &self.eps_sweep;
        for (name, v) in [
            ("eps_sweep.n_eval", w.n_eval),
            ("eps_sweep.reps", w.reps),
            ("eps_sweep.samples", w.samples),
            ("eps_sweep.replicates", w.replicates),
        ] {
            positive(name, v)?;
        }
        fractions("eps_sweep.t_frac", &[w.t_frac])?;
        let u = &self.uturn;
        positive("uturn.starts", u.starts)?;
        positive("uturn.reps", u.reps)?;
        fractions("uturn.t_fracs", &u.t_fracs)?;
        if u.modes.is_empty() {
            return Err(Error::config("uturn.modes must not be empty"));
        }
        if specs("uturn.denoisers", &u.denoisers)?.is_empty() {
            return Err(Error::config("uturn.denoisers must not be empty"));
        }
        let p = &self.sample_split;
        fractions("sample_split.t_fracs", &p.t_fracs)?;
        positive("sample_split.n_eval", p.n_eval)?;
        positive("sample_split.reps", p.reps)?;
        let l = &self.loss_decomp;
        positive("loss_decomp.n_eval", l.n_eval)?;
        positive("loss_decomp.reps", l.reps)?;
        if l.t == 0 || l.t > s.steps {
            return Err(Error::config(format!("loss_decomp.t = {} outside [1, {}]", l.t, s.steps)));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        Ok(())
    }

    /// SHA-256 of the configuration with the output directory and thread
    /// count cleared, since neither affects results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
