//! Divergences, losses and sample statistics used by the experiments.

mod overlap;

pub use overlap::{
    nn_divergence, nn_overlap_distribution, nn_overlap_packed, overlap, replication_flag, replication_rate,
    OverlapHistogram, PackedSequences, Replication, HISTOGRAM_PSEUDOCOUNT, REPLICATION_THRESHOLD,
};

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, PosteriorMarginals};
use crate::diffusion::{encode, forward_noise, u_turn, NoiseSchedule, OneHotState};
use crate::error::{Error, Result};
use crate::grammar::SequenceSample;
use crate::rng;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean with its standard error over independent draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Estimate {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, stderr, n }
    }
}

/// Log of a probability row after flooring and renormalization.
pub fn floored_log(row: ArrayView1<f64>) -> Vec<f64> {
    let z: f64 = row.iter().map(|&p| p.max(PROB_FLOOR)).sum();
    row.iter().map(|&p| (p.max(PROB_FLOOR) / z).ln()).collect()
}

/// Mean over positions of the per-position `KL(p_i || r_i)`.
pub fn kl_rows(p: ArrayView2<f64>, r: ArrayView2<f64>) -> Result<f64> {
    Error::check_dims(p.dim(), r.dim())?;
    let n = p.nrows();
    if n == 0 {
        return Err(Error::Invalid("divergence over zero positions".into()));
    }
    let total: f64 = p
        .rows()
        .into_iter()
        .zip(r.rows())
        .map(|(pr, rr)| {
            let lp = floored_log(pr);
            let lr = floored_log(rr);
            lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

pub fn kl_marginals(p: &PosteriorMarginals, r: &PosteriorMarginals) -> Result<f64> {
    kl_rows(p.rows().view(), r.rows().view())
}

/// Cross-entropy of `model` against the one-hot `x0`, averaged over positions.
pub fn cross_entropy(model: &PosteriorMarginals, x0: &SequenceSample) -> Result<f64> {
    Error::check_dims((x0.len(), model.shape().1), model.shape())?;
    let total: f64 = model
        .rows()
        .rows()
        .into_iter()
        .zip(&x0.symbols)
        .map(|(row, &s)| -floored_log(row)[s as usize])
        .sum();
    Ok(total / x0.len() as f64)
}

/// One evaluation point of the denoising objective.
#[derive(Clone, Debug)]
pub struct EvalDraw {
    pub x0: SequenceSample,
    pub x_t: OneHotState,
}

/// Noise each clean sequence at a time from `times` (uniform on `1..=T` when
/// `None`), `reps` times each. Draws are grouped by clean sequence.
pub fn draw_eval_states<R: Rng + ?Sized>(
    clean: &[SequenceSample],
    q: usize,
    times: Option<usize>,
    reps: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Vec<EvalDraw>>> {
    clean
        .iter()
        .map(|x0| {
            let hot = encode(x0, q);
            (0..reps)
                .map(|_| {
                    let t = times.unwrap_or_else(|| rng.random_range(1..=schedule.steps()));
                    Ok(EvalDraw {
                        x0: x0.clone(),
                        x_t: forward_noise(&hot, t, schedule, rng)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// Per-group mean of `f` over each group's draws, evaluated in parallel.
fn grouped<F>(groups: &[Vec<EvalDraw>], f: F) -> Result<Estimate>
where
    F: Fn(&EvalDraw) -> Result<f64> + Sync,
{
    let means: Vec<f64> = groups
        .par_iter()
        .map(|g| {
            let vals = g.iter().map(&f).collect::<Result<Vec<_>>>()?;
            Ok(vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&means))
}

/// Denoising loss: expected cross-entropy of the denoiser output against the
/// clean sequence, with standard error over independent clean sequences.
pub fn dsm_loss(denoiser: &dyn Denoiser, draws: &[Vec<EvalDraw>], schedule: &NoiseSchedule) -> Result<Estimate> {
    grouped(draws, |d| cross_entropy(&denoiser.denoise(&d.x_t, schedule)?, &d.x0))
}

/// Cross-entropy split into a distillation term against an oracle and the
/// excess (noise) term, so that `total = distillation - excess`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub distillation: f64,
    pub excess: f64,
    pub total: f64,
}

impl std::ops::AddAssign for LossTerms {
    fn add_assign(&mut self, o: LossTerms) {
        self.distillation += o.distillation;
        self.excess += o.excess;
        self.total += o.total;
    }
}

pub fn loss_decomposition(
    model: &PosteriorMarginals,
    oracle: &PosteriorMarginals,
    x0: &SequenceSample,
) -> Result<LossTerms> {
    Error::check_dims(model.shape(), oracle.shape())?;
    Error::check_dims((x0.len(), model.shape().1), model.shape())?;
    let mut terms = LossTerms::default();
    for ((m, o), &s) in model.rows().rows().into_iter().zip(oracle.rows().rows()).zip(&x0.symbols) {
        let lm = floored_log(m);
        let cross: f64 = o.iter().zip(&lm).map(|(p, l)| p * l).sum();
        terms.distillation -= cross;
        terms.excess += lm[s as usize] - cross;
        terms.total -= lm[s as usize];
    }
    let n = x0.len() as f64;
    terms.distillation /= n;
    terms.excess /= n;
    terms.total /= n;
    Ok(terms)
}

/// Mean loss terms over `draws`, each term with its own standard error.
pub fn mean_loss_decomposition(
    model: &dyn Denoiser,
    oracle: &dyn Denoiser,
    draws: &[Vec<EvalDraw>],
    schedule: &NoiseSchedule,
) -> Result<[Estimate; 3]> {
    let per_group: Vec<LossTerms> = draws
        .par_iter()
        .map(|g| {
            let mut acc = LossTerms::default();
            for d in g {
                let m = model.denoise(&d.x_t, schedule)?;
                let o = oracle.denoise(&d.x_t, schedule)?;
                acc += loss_decomposition(&m, &o, &d.x0)?;
            }
            let k = g.len() as f64;
            Ok(LossTerms {
                distillation: acc.distillation / k,
                excess: acc.excess / k,
                total: acc.total / k,
            })
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&LossTerms) -> f64| Estimate::from_samples(&per_group.iter().map(f).collect::<Vec<_>>());
    Ok([pick(|l| l.distillation), pick(|l| l.excess), pick(|l| l.total)])
}

/// Mean `KL(a(x_t) || b(x_t))` over evaluation states, with standard error
/// over independent clean sequences.
pub fn sample_split_divergence(
    a: &dyn Denoiser,
    b: &dyn Denoiser,
    draws: &[Vec<EvalDraw>],
    schedule: &NoiseSchedule,
) -> Result<Estimate> {
    grouped(draws, |d| {
        kl_marginals(&a.denoise(&d.x_t, schedule)?, &b.denoise(&d.x_t, schedule)?)
    })
}

/// Mean overlap between each start and its U-turn reconstruction at time `t`.
/// Repetition `r` of start `s` uses the stream derived from
/// `labels ++ [s, r]`, so two denoisers given the same arguments see
/// identical forward and reverse noise.
#[allow(clippy::too_many_arguments)]
pub fn mean_recovery(
    denoiser: &dyn Denoiser,
    starts: &[SequenceSample],
    q: usize,
    t: usize,
    reps: usize,
    schedule: &NoiseSchedule,
    master: u64,
    labels: &[u64],
) -> Result<Vec<f64>> {
    if reps == 0 {
        return Err(Error::Invalid("U-turn needs at least one repetition".into()));
    }
    starts
        .par_iter()
        .enumerate()
        .map(|(s, x0)| {
            let hot = encode(x0, q);
            let mut total = 0.0;
            for r in 0..reps {
                let mut key = labels.to_vec();
                key.extend([s as u64, r as u64]);
                let mut stream = rng::stream(master, &key);
                total += overlap(x0, &u_turn(denoiser, &hot, t, schedule, &mut stream)?)?;
            }
            Ok(total / reps as f64)
        })
        .collect()
}

/// Per-start ratios of model to oracle recovery.
#[derive(Clone, Debug, PartialEq)]
pub struct UTurnRatios {
    pub model: Vec<f64>,
    pub oracle: Vec<f64>,
    /// `None` where the oracle recovered nothing and the ratio is undefined.
    pub ratios: Vec<Option<f64>>,
    pub summary: Estimate,
}

impl UTurnRatios {
    pub fn from_recoveries(model: Vec<f64>, oracle: Vec<f64>) -> Result<Self> {
        if model.len() != oracle.len() {
            return Err(Error::Invalid("model and oracle recoveries differ in length".into()));
        }
        let ratios: Vec<Option<f64>> = model
            .iter()
            .zip(&oracle)
            .map(|(&m, &o)| (o > 0.0).then(|| m / o))
            .collect();
        let kept: Vec<f64> = ratios.iter().flatten().copied().collect();
        Ok(UTurnRatios {
            model,
            oracle,
            ratios,
            summary: Estimate::from_samples(&kept),
        })
    }

    pub fn excluded(&self) -> usize {
        self.ratios.iter().filter(|r| r.is_none()).count()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn u_turn_overlap_ratio(
    model: &dyn Denoiser,
    oracle: &dyn Denoiser,
    starts: &[SequenceSample],
    q: usize,
    t: usize,
    reps: usize,
    schedule: &NoiseSchedule,
    master: u64,
    labels: &[u64],
) -> Result<UTurnRatios> {
    let m = mean_recovery(model, starts, q, t, reps, schedule, master, labels)?;
    let o = mean_recovery(oracle, starts, q, t, reps, schedule, master, labels)?;
    UTurnRatios::from_recoveries(m, o)
}
