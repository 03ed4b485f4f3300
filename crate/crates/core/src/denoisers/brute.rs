//! Exact posteriors by summing over the enumerated support. Used as the
//! reference for belief propagation on small grammars.

use ndarray::Array2;

use super::{Denoiser, PosteriorMarginals};
use crate::diffusion::{FieldPrior, NoiseSchedule, OneHotState};
use crate::error::{Error, Result};
use crate::grammar::{enumerate_support, Grammar};

#[derive(Clone, Debug)]
pub struct EnumerationDenoiser {
    q: usize,
    len: usize,
    k: usize,
    support: Vec<(Vec<u8>, f64)>,
}

impl EnumerationDenoiser {
    pub fn new(grammar: &Grammar, k: usize) -> Result<Self> {
        let support = enumerate_support(grammar, k)?
            .into_iter()
            .map(|(s, p)| (s.symbols, p.ln()))
            .collect();
        Ok(EnumerationDenoiser {
            q: grammar.q(),
            len: grammar.seq_len(),
            k,
            support,
        })
    }

    pub fn support_size(&self) -> usize {
        self.support.len()
    }

    fn marginals_from_scores(&self, scores: &[f64]) -> PosteriorMarginals {
        let max = scores.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut out = Array2::zeros((self.len, self.q));
        let mut total = 0.0;
        for ((seq, _), &s) in self.support.iter().zip(scores) {
            let w = (s - max).exp();
            total += w;
            for (i, &x) in seq.iter().enumerate() {
                out[(i, x as usize)] += w;
            }
        }
        out /= total;
        PosteriorMarginals::new_unchecked(out)
    }

    /// Posterior computed from the raw Gaussian likelihood of `x_t`, without
    /// going through the field.
    pub fn gaussian_posterior(&self, x_t: &OneHotState, schedule: &NoiseSchedule) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), x_t.shape())?;
        let abar = schedule.alpha_bar(x_t.t);
        let signal = abar.sqrt();
        let var = 1.0 - abar;
        let scores: Vec<f64> = self
            .support
            .iter()
            .map(|(seq, lp)| {
                let mut sq = 0.0;
                for (i, &x) in seq.iter().enumerate() {
                    for a in 0..self.q {
                        let mean = if a == x as usize { signal } else { 0.0 };
                        let d = x_t.values[(i, a)] - mean;
                        sq += d * d;
                    }
                }
                lp - sq / (2.0 * var)
            })
            .collect();
        Ok(self.marginals_from_scores(&scores))
    }
}

impl Denoiser for EnumerationDenoiser {
    fn shape(&self) -> (usize, usize) {
        (self.len, self.q)
    }

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), field.shape())?;
        let logs = field.log_probs();
        let scores: Vec<f64> = self
            .support
            .iter()
            .map(|(seq, lp)| lp + seq.iter().enumerate().map(|(i, &x)| logs[(i, x as usize)]).sum::<f64>())
            .collect();
        Ok(self.marginals_from_scores(&scores))
    }

    fn label(&self) -> String {
        format!("enum:k={}", self.k)
    }
}

/// `P_k(s | field) ∝ P_k(s) prod_i field_i(s_i)`, marginalized per position.
pub fn brute_force_posterior(grammar: &Grammar, k: usize, field: &FieldPrior) -> Result<PosteriorMarginals> {
    EnumerationDenoiser::new(grammar, k)?.posterior(field)
}
