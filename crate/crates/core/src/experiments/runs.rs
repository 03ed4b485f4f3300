use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Context, StartMode};
use crate::denoisers::{BpDenoiser, Denoiser, DenoiserSpec, EpsilonDenoiser, PosteriorMarginals};
use crate::diffusion::{field_prior, generate, reverse_from, OneHotState};
use crate::error::{Error, Result};
use crate::grammar::{Dataset, SequenceSample};
use crate::metrics::{
    draw_eval_states, dsm_loss, kl_marginals, mean_loss_decomposition, mean_recovery, nn_divergence,
    nn_overlap_packed, overlap, replication_rate, sample_split_divergence, Estimate, EvalDraw, OverlapHistogram,
    PackedSequences, UTurnRatios,
};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRow {
    pub t: usize,
    pub t_frac: f64,
    pub denoiser: String,
    pub kl_mean_nats: f64,
    pub kl_stderr_nats: f64,
    pub trajectories: usize,
}

fn eps_denoisers(ctx: &Context, specs: &[String]) -> Result<Vec<(String, Box<dyn Denoiser>)>> {
    specs
        .iter()
        .map(|s| {
            let spec: DenoiserSpec = s.parse()?;
            Ok((spec.to_string(), spec.build(&ctx.grammar, Some(&ctx.train))?))
        })
        .collect()
}

/// Divergence of every filtered level and configured denoiser from the exact
/// denoiser along reverse trajectories driven by the exact denoiser.
pub fn run_regimes(ctx: &Context) -> Result<Vec<RegimeRow>> {
    let cfg = &ctx.config.regimes;
    let exact = BpDenoiser::new(&ctx.grammar, 0)?;
    let mut others: Vec<(String, Box<dyn Denoiser>)> = Vec::new();
    for k in 1..=ctx.grammar.depth() {
        let d = BpDenoiser::new(&ctx.grammar, k)?;
        others.push((d.label(), Box::new(d)));
    }
    others.extend(eps_denoisers(ctx, &cfg.denoisers)?);
    let steps = ctx.schedule.steps();
    let times: Vec<usize> = (1..=steps).rev().filter(|t| t % cfg.every == 0).collect();
    let slot = |t: usize| times.iter().position(|&s| s == t);
    let (n, q) = exact.shape();

    let per_traj: Vec<Vec<f64>> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|m| {
            let mut stream = rng::stream(ctx.config.seed, &[tag::TRAJECTORY, m as u64]);
            let values = Array2::from_shape_simple_fn((n, q), || stream.sample(rand_distr::StandardNormal));
            let mut kls = vec![0.0; times.len() * others.len()];
            let mut failure = None;
            reverse_from(
                &exact,
                OneHotState { values, t: steps },
                &ctx.schedule,
                &mut stream,
                |x, xhat| {
                    let Some(i) = slot(x.t) else { return };
                    let result = field_prior(x, &ctx.schedule).and_then(|field| {
                        for (j, (_, d)) in others.iter().enumerate() {
                            kls[i * others.len() + j] = kl_marginals(xhat, &d.posterior(&field)?)?;
                        }
                        Ok(())
                    });
                    if let Err(e) = result {
                        failure.get_or_insert(e);
                    }
                },
            )?;
            failure.map_or(Ok(kls), Err)
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(times.len() * others.len());
    for (i, &t) in times.iter().enumerate() {
        for (j, (label, _)) in others.iter().enumerate() {
            let vals: Vec<f64> = per_traj.iter().map(|v| v[i * others.len() + j]).collect();
            let e = Estimate::from_samples(&vals);
            rows.push(RegimeRow {
                t,
                t_frac: t as f64 / steps as f64,
                denoiser: label.clone(),
                kl_mean_nats: e.mean,
                kl_stderr_nats: e.stderr,
                trajectories: cfg.trajectories,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsSweepRow {
    pub eps: f64,
    pub n_train: usize,
    pub dsm_loss_nats: f64,
    pub dsm_loss_stderr_nats: f64,
    pub nn_divergence_nats: f64,
    pub nn_divergence_stderr_nats: f64,
    pub mean_nn_overlap: f64,
    pub reference_mean_nn_overlap: f64,
    pub replication_rate: f64,
    pub t_kl: usize,
    pub kl_to_exact_nats: f64,
    pub kl_to_exact_stderr_nats: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsHistogram {
    pub eps: f64,
    /// Nearest-neighbor overlaps of generated samples, pooled over replicates.
    pub generated: OverlapHistogram,
    /// The same for fresh grammar samples.
    pub reference: OverlapHistogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin: usize,
    pub overlap: f64,
    pub count: u64,
    pub reference_count: u64,
}

impl EpsHistogram {
    pub fn rows(&self) -> Vec<HistogramRow> {
        let n = self.generated.seq_len();
        (0..=n)
            .map(|m| HistogramRow {
                bin: m,
                overlap: m as f64 / n as f64,
                count: self.generated.counts[m],
                reference_count: self.reference.counts[m],
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpsSweep {
    pub rows: Vec<EpsSweepRow>,
    pub histograms: Vec<EpsHistogram>,
}

fn pool(hists: &[OverlapHistogram]) -> OverlapHistogram {
    let mut out = OverlapHistogram::new(hists[0].seq_len());
    for h in hists {
        for (a, b) in out.counts.iter_mut().zip(&h.counts) {
            *a += b;
        }
    }
    out
}

fn exact_outputs(exact: &dyn Denoiser, draws: &[Vec<EvalDraw>], ctx: &Context) -> Result<Vec<Vec<PosteriorMarginals>>> {
    draws
        .par_iter()
        .map(|g| g.iter().map(|d| exact.denoise(&d.x_t, &ctx.schedule)).collect())
        .collect()
}

/// Test loss, sample-level bias and score-level distance to the exact
/// denoiser as functions of the sharpness.
pub fn run_epsilon_sweep(ctx: &Context) -> Result<EpsSweep> {
    let cfg = &ctx.config.eps_sweep;
    let seed = ctx.config.seed;
    let q = ctx.q();
    let schedule = &ctx.schedule;
    let train = PackedSequences::new(&ctx.train.sequences, q)?;

    let loss_draws = draw_eval_states(
        &ctx.fresh(1, cfg.n_eval),
        q,
        None,
        cfg.reps,
        schedule,
        &mut rng::stream(seed, &[tag::EVAL, 0]),
    )?;
    let t_kl = ctx.time_at(cfg.t_frac);
    let kl_draws = draw_eval_states(
        &ctx.fresh(2, cfg.n_eval),
        q,
        Some(t_kl),
        cfg.reps,
        schedule,
        &mut rng::stream(seed, &[tag::EVAL, 1]),
    )?;
    let exact = BpDenoiser::new(&ctx.grammar, 0)?;
    let exact_out = exact_outputs(&exact, &kl_draws, ctx)?;

    let references: Vec<OverlapHistogram> = (0..cfg.replicates)
        .map(|r| {
            let fresh = Dataset::generate(
                &ctx.grammar,
                cfg.samples,
                rng::derive_seed(seed, &[tag::REFERENCE, r as u64]),
            );
            nn_overlap_packed(&PackedSequences::new(&fresh.sequences, q)?, &train)
        })
        .collect::<Result<_>>()?;
    let reference = pool(&references);

    let mut rows = Vec::new();
    let mut histograms = Vec::new();
    for &eps in &ctx.config.eps_grid {
        let d = EpsilonDenoiser::new(&ctx.train.sequences, q, eps)?;
        let loss = dsm_loss(&d, &loss_draws, schedule)?;
        let kl_groups: Vec<f64> = kl_draws
            .par_iter()
            .zip(&exact_out)
            .map(|(g, ex)| {
                let mut s = 0.0;
                for (draw, e) in g.iter().zip(ex) {
                    s += kl_marginals(e, &d.denoise(&draw.x_t, schedule)?)?;
                }
                Ok(s / g.len() as f64)
            })
            .collect::<Result<_>>()?;
        let kl = Estimate::from_samples(&kl_groups);

        let mut generated = Vec::with_capacity(cfg.replicates);
        let mut divergences = Vec::with_capacity(cfg.replicates);
        let mut replicated = 0.0;
        for (r, reference) in references.iter().enumerate() {
            // Common random numbers across the grid.
            let mut stream = rng::stream(seed, &[tag::SAMPLE, r as u64]);
            let samples: Vec<SequenceSample> = (0..cfg.samples).map(|_| d.sample(&mut stream)).collect();
            let packed = PackedSequences::new(&samples, q)?;
            let hist = nn_overlap_packed(&packed, &train)?;
            divergences.push(nn_divergence(&hist, reference)?);
            replicated += replication_rate(&packed, &train)?;
            generated.push(hist);
        }
        let nn = Estimate::from_samples(&divergences);
        let generated = pool(&generated);
        rows.push(EpsSweepRow {
            eps,
            n_train: ctx.train.len(),
            dsm_loss_nats: loss.mean,
            dsm_loss_stderr_nats: loss.stderr,
            nn_divergence_nats: nn.mean,
            nn_divergence_stderr_nats: nn.stderr,
            mean_nn_overlap: generated.mean_overlap(),
            reference_mean_nn_overlap: reference.mean_overlap(),
            replication_rate: replicated / cfg.replicates as f64,
            t_kl,
            kl_to_exact_nats: kl.mean,
            kl_to_exact_stderr_nats: kl.stderr,
        });
        histograms.push(EpsHistogram {
            eps,
            generated,
            reference: reference.clone(),
        });
    }
    Ok(EpsSweep { rows, histograms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UTurnRow {
    pub denoiser: String,
    pub t: usize,
    pub t_frac: f64,
    pub start_mode: String,
    pub ratio_mean: f64,
    pub ratio_stderr: f64,
    pub model_overlap_mean: f64,
    pub exact_overlap_mean: f64,
    pub n_starts: usize,
    pub excluded_starts: usize,
    pub reps: usize,
}

fn starts_for(ctx: &Context, mode: StartMode, count: usize) -> Vec<SequenceSample> {
    let mut stream = rng::stream(ctx.config.seed, &[tag::START, mode.index()]);
    match mode {
        StartMode::Train => index::sample(&mut stream, ctx.train.len(), count.min(ctx.train.len()))
            .into_iter()
            .map(|i| ctx.train.sequences[i].clone())
            .collect(),
        StartMode::Test => ctx.fresh(3, count),
        StartMode::Random => (0..count)
            .map(|_| {
                SequenceSample::new(
                    (0..ctx.grammar.seq_len())
                        .map(|_| stream.random_range(0..ctx.q()) as u8)
                        .collect(),
                )
            })
            .collect(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Recovery of noised starts by each model relative to the exact denoiser,
/// with forward and reverse noise shared between them.
pub fn run_uturn(ctx: &Context) -> Result<Vec<UTurnRow>> {
    let cfg = &ctx.config.uturn;
    let models = eps_denoisers(ctx, &cfg.denoisers)?;
    let exact = BpDenoiser::new(&ctx.grammar, 0)?;
    let steps = ctx.schedule.steps();
    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        let starts = starts_for(ctx, mode, cfg.starts);
        for &frac in &cfg.t_fracs {
            let t = ctx.time_at(frac);
            let labels = [tag::UTURN, mode.index(), t as u64];
            let recover = |d: &dyn Denoiser| {
                mean_recovery(d, &starts, ctx.q(), t, cfg.reps, &ctx.schedule, ctx.config.seed, &labels)
            };
            let oracle = recover(&exact)?;
            for (label, model) in &models {
                let r = UTurnRatios::from_recoveries(recover(model.as_ref())?, oracle.clone())?;
                rows.push(UTurnRow {
                    denoiser: label.clone(),
                    t,
                    t_frac: t as f64 / steps as f64,
                    start_mode: mode.as_str().to_string(),
                    ratio_mean: r.summary.mean,
                    ratio_stderr: r.summary.stderr,
                    model_overlap_mean: mean(&r.model),
                    exact_overlap_mean: mean(&r.oracle),
                    n_starts: starts.len(),
                    excluded_starts: r.excluded(),
                    reps: cfg.reps,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub eps: f64,
    pub t: usize,
    pub t_frac: f64,
    pub score_div_nats: f64,
    pub score_div_stderr_nats: f64,
    pub gen_overlap: f64,
    pub gen_overlap_stderr: f64,
    pub pairs: usize,
}

/// Disagreement between denoisers built on disjoint halves of the training
/// data, at the score level and for generations sharing all noise.
pub fn run_sample_split(ctx: &Context) -> Result<Vec<SplitRow>> {
    let cfg = &ctx.config.sample_split;
    let (a, b) = ctx.train.split_at(ctx.train.len() / 2);
    if a.is_empty() || b.is_empty() {
        return Err(Error::config("training data too small to split"));
    }
    let q = ctx.q();
    let steps = ctx.schedule.steps();
    let clean = ctx.fresh(4, cfg.n_eval);
    let draws: Vec<(usize, Vec<Vec<EvalDraw>>)> = cfg
        .t_fracs
        .iter()
        .map(|&f| {
            let t = ctx.time_at(f);
            let mut stream = rng::stream(ctx.config.seed, &[tag::SPLIT, t as u64]);
            Ok((t, draw_eval_states(&clean, q, Some(t), cfg.reps, &ctx.schedule, &mut stream)?))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for &eps in &ctx.config.eps_grid {
        let da = EpsilonDenoiser::new(&a.sequences, q, eps)?;
        let db = EpsilonDenoiser::new(&b.sequences, q, eps)?;
        let overlaps: Vec<f64> = (0..cfg.pairs)
            .into_par_iter()
            .map(|p| {
                let stream = rng::stream(ctx.config.seed, &[tag::PAIR, p as u64]);
                let (xa, _) = generate(&da, &ctx.schedule, &mut stream.clone(), &[])?;
                let (xb, _) = generate(&db, &ctx.schedule, &mut stream.clone(), &[])?;
                overlap(&xa, &xb)
            })
            .collect::<Result<_>>()?;
        let gen = Estimate::from_samples(&overlaps);
        for (t, d) in &draws {
            let div = sample_split_divergence(&da, &db, d, &ctx.schedule)?;
            rows.push(SplitRow {
                eps,
                t: *t,
                t_frac: *t as f64 / steps as f64,
                score_div_nats: div.mean,
                score_div_stderr_nats: div.stderr,
                gen_overlap: gen.mean,
                gen_overlap_stderr: gen.stderr,
                pairs: cfg.pairs,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub eps: f64,
    pub split: String,
    pub t: usize,
    pub excess_mean_nats: f64,
    pub excess_stderr_nats: f64,
    pub distill_mean_nats: f64,
    pub distill_stderr_nats: f64,
    pub total_mean_nats: f64,
    pub total_stderr_nats: f64,
    pub n_eval: usize,
}

/// Excess and distillation terms of the loss at a fixed time, on training
/// and on fresh sequences.
pub fn run_loss_decomposition(ctx: &Context) -> Result<Vec<LossRow>> {
    let cfg = &ctx.config.loss_decomp;
    let q = ctx.q();
    let exact = BpDenoiser::new(&ctx.grammar, 0)?;
    let mut stream = rng::stream(ctx.config.seed, &[tag::START, 10]);
    let train_starts: Vec<SequenceSample> =
        index::sample(&mut stream, ctx.train.len(), cfg.n_eval.min(ctx.train.len()))
            .into_iter()
            .map(|i| ctx.train.sequences[i].clone())
            .collect();
    let splits = [("train", train_starts), ("test", ctx.fresh(5, cfg.n_eval))];
    let draws: Vec<(&str, Vec<Vec<EvalDraw>>)> = splits
        .iter()
        .enumerate()
        .map(|(i, (name, clean))| {
            let mut stream = rng::stream(ctx.config.seed, &[tag::EVAL, 10 + i as u64]);
            Ok((*name, draw_eval_states(clean, q, Some(cfg.t), cfg.reps, &ctx.schedule, &mut stream)?))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &eps in &ctx.config.eps_grid {
        let model = EpsilonDenoiser::new(&ctx.train.sequences, q, eps)?;
        for (name, d) in &draws {
            let [distill, excess, total] = mean_loss_decomposition(&model, &exact, d, &ctx.schedule)?;
            rows.push(LossRow {
                eps,
                split: name.to_string(),
                t: cfg.t,
                excess_mean_nats: excess.mean,
                excess_stderr_nats: excess.stderr,
                distill_mean_nats: distill.mean,
                distill_stderr_nats: distill.stderr,
                total_mean_nats: total.mean,
                total_stderr_nats: total.stderr,
                n_eval: d.len(),
            });
        }
    }
    Ok(rows)
}
