//! Gaussian DDPM over one-hot encodings.
//!
//! The forward process is `x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) xi`.
//! Every denoiser conditions on `x_t` only through the per-position field
//! `h_t = softmax(snr_t * x_t)`, `snr_t = sqrt(abar_t) / (1 - abar_t)`, which
//! is the exact Bayes factor of the Gaussian likelihood for one-hot rows.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoisers::{Denoiser, PosteriorMarginals};
use crate::error::{Error, Result};
use crate::grammar::SequenceSample;

/// Variance of the noise injected by a reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)`.
    Posterior,
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    variance: ReverseVariance,
}

/// Linear beta schedule, endpoints included.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
    }
    Ok(NoiseSchedule {
        beta,
        alpha_bar,
        variance: ReverseVariance::Beta,
    })
}

impl NoiseSchedule {
    pub fn with_variance(mut self, variance: ReverseVariance) -> Self {
        self.variance = variance;
        self
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn variance(&self) -> ReverseVariance {
        self.variance
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt() / (1.0 - self.alpha_bar[t])
    }

    pub fn sigma(&self, t: usize) -> f64 {
        match self.variance {
            ReverseVariance::Beta => self.beta(t).sqrt(),
            ReverseVariance::Posterior => {
                (self.beta(t) * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])).sqrt()
            }
        }
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::OutOfRange {
                name: "diffusion time",
                value: t as i64,
                lo: 1,
                hi: self.steps() as i64,
            });
        }
        Ok(())
    }
}

/// An `N x q` real state at diffusion time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotState {
    pub values: Array2<f64>,
    pub t: usize,
}

impl OneHotState {
    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

pub fn encode(seq: &SequenceSample, q: usize) -> OneHotState {
    let mut values = Array2::zeros((seq.len(), q));
    for (i, &s) in seq.symbols.iter().enumerate() {
        values[(i, s as usize)] = 1.0;
    }
    OneHotState { values, t: 0 }
}

/// Per-row argmax; ties go to the lowest index.
pub fn decode(values: ArrayView2<f64>) -> SequenceSample {
    let symbols = values
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (a, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = a;
                }
            }
            best as u8
        })
        .collect();
    SequenceSample::new(symbols)
}

pub fn forward_noise<R: Rng + ?Sized>(
    x0: &OneHotState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<OneHotState> {
    schedule.check_time(t)?;
    let signal = schedule.alpha_bar(t).sqrt();
    let noise = (1.0 - schedule.alpha_bar(t)).sqrt();
    let values = x0
        .values
        .mapv(|x| signal * x + noise * rng.sample::<f64, _>(StandardNormal));
    Ok(OneHotState { values, t })
}

/// Per-position conditioning on a noisy observation. Rows are stored both as
/// probabilities and as log-probabilities; the latter stay exact when
/// probabilities underflow at high signal-to-noise ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldPrior {
    probs: Array2<f64>,
    log_probs: Array2<f64>,
}

impl FieldPrior {
    /// Row-wise softmax of `logits`.
    pub fn from_logits(logits: ArrayView2<f64>) -> FieldPrior {
        let mut log_probs = logits.to_owned();
        for mut row in log_probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let probs = log_probs.mapv(f64::exp);
        FieldPrior { probs, log_probs }
    }

    /// Field with the given probability rows (renormalized).
    pub fn from_probs(probs: ArrayView2<f64>) -> Result<FieldPrior> {
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::Invalid("field entries must be finite and nonnegative".into()));
        }
        let mut probs = probs.to_owned();
        for mut row in probs.rows_mut() {
            let s = row.sum();
            if s <= 0.0 {
                return Err(Error::Invalid("field row with zero mass".into()));
            }
            row /= s;
        }
        let log_probs = probs.mapv(f64::ln);
        Ok(FieldPrior { probs, log_probs })
    }

    pub fn uniform(n: usize, q: usize) -> FieldPrior {
        FieldPrior {
            probs: Array2::from_elem((n, q), 1.0 / q as f64),
            log_probs: Array2::from_elem((n, q), -(q as f64).ln()),
        }
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    pub fn shape(&self) -> (usize, usize) {
        self.probs.dim()
    }
}

pub fn field_prior(x_t: &OneHotState, schedule: &NoiseSchedule) -> Result<FieldPrior> {
    schedule.check_time(x_t.t)?;
    let snr = schedule.snr(x_t.t);
    Ok(FieldPrior::from_logits(x_t.values.mapv(|v| snr * v).view()))
}

/// Noise prediction implied by a posterior mean.
pub fn predicted_noise(x_t: &OneHotState, xhat0: &PosteriorMarginals, schedule: &NoiseSchedule) -> Array2<f64> {
    let t = x_t.t;
    let signal = schedule.alpha_bar(t).sqrt();
    let noise = (1.0 - schedule.alpha_bar(t)).sqrt();
    Zip::from(&x_t.values)
        .and(xhat0.rows())
        .map_collect(|&x, &m| (x - signal * m) / noise)
}

/// One ancestral step `x_t -> x_{t-1}` driven by the posterior mean `xhat0`.
/// The last step (t = 1) adds no noise.
pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &OneHotState,
    xhat0: &PosteriorMarginals,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<OneHotState> {
    let t = x_t.t;
    schedule.check_time(t)?;
    Error::check_dims(x_t.shape(), xhat0.shape())?;
    let beta = schedule.beta(t);
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let signal = schedule.alpha_bar(t).sqrt();
    let noise = (1.0 - schedule.alpha_bar(t)).sqrt();
    let coef = beta / noise;
    let sigma = if t > 1 { schedule.sigma(t) } else { 0.0 };
    let mut values = Zip::from(&x_t.values)
        .and(xhat0.rows())
        .map_collect(|&x, &m| inv_sqrt_alpha * (x - coef * (x - signal * m) / noise));
    if sigma > 0.0 {
        values.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    Ok(OneHotState { values, t: t - 1 })
}

/// Run the reverse chain from `x_t` down to time 0. `observe` sees every
/// visited state together with the denoiser output computed on it.
pub fn reverse_from<R, F>(
    denoiser: &dyn Denoiser,
    mut x: OneHotState,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut observe: F,
) -> Result<OneHotState>
where
    R: Rng + ?Sized,
    F: FnMut(&OneHotState, &PosteriorMarginals),
{
    Error::check_dims(denoiser.shape(), x.shape())?;
    while x.t > 0 {
        let xhat0 = denoiser.denoise(&x, schedule)?;
        observe(&x, &xhat0);
        x = reverse_step(&x, &xhat0, schedule, rng)?;
    }
    Ok(x)
}

/// Sample `x_T ~ N(0, I)` and run the full reverse chain. Returns the decoded
/// sequence and snapshots of `x_t` for every `t` in `record_times`.
pub fn generate<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    rng: &mut R,
    record_times: &[usize],
) -> Result<(SequenceSample, Vec<OneHotState>)> {
    let (n, q) = denoiser.shape();
    let t_max = schedule.steps();
    let values = Array2::from_shape_simple_fn((n, q), || rng.sample::<f64, _>(StandardNormal));
    let mut snapshots = Vec::new();
    let x0 = reverse_from(
        denoiser,
        OneHotState { values, t: t_max },
        schedule,
        rng,
        |x, _| {
            if record_times.contains(&x.t) {
                snapshots.push(x.clone());
            }
        },
    )?;
    if record_times.contains(&0) {
        snapshots.push(x0.clone());
    }
    Ok((decode(x0.values.view()), snapshots))
}

/// Noise `x0` up to time `t`, then reverse back to 0 with `denoiser`.
pub fn u_turn<R: Rng + ?Sized>(
    denoiser: &dyn Denoiser,
    x0: &OneHotState,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<SequenceSample> {
    let x_t = forward_noise(x0, t, schedule, rng)?;
    let out = reverse_from(denoiser, x_t, schedule, rng, |_, _| {})?;
    Ok(decode(out.values.view()))
}
