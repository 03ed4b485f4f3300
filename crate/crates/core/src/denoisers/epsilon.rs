//! Smoothed empirical denoiser.
//!
//! The prior is a mixture of `n` product kernels, one per training sequence,
//! with per-position weight 1 on the training symbol and `e^{-eps}` on every
//! other symbol. Under a field `f`, component `mu` has mass
//! `w_mu = prod_i m_i(s_i^mu)` with `m_i(b) = (1 - e^{-eps}) f_i(b) + e^{-eps}`,
//! and its position posterior is `kappa(a; s_i^mu) f_i(a) / m_i(s_i^mu)`.
//!
//! Positions are grouped into chunks of `c` sites so that `w_mu` costs one
//! table lookup per chunk, and per-site masses `G_i(b) = sum_{mu: s_i^mu = b} w_mu`
//! are read off per-chunk histograms. The result is the exact mixture
//! posterior in `O(n N / c + (N / c) q^c)` time.

use ndarray::Array2;
use rand::Rng;

use super::{Denoiser, PosteriorMarginals};
use crate::diffusion::FieldPrior;
use crate::error::{Error, Result};
use crate::grammar::SequenceSample;

/// Component weights below this trigger the log-domain path.
const LINEAR_FLOOR: f64 = 1e-200;
const MAX_TABLE: usize = 4096;

#[derive(Clone, Debug)]
struct Chunk {
    start: usize,
    len: usize,
    size: usize,
}

#[derive(Clone, Debug)]
pub struct EpsilonDenoiser {
    q: usize,
    len: usize,
    eps: f64,
    /// Row-major `n x N` training symbols.
    train: Vec<u8>,
    chunks: Vec<Chunk>,
    /// Chunk-major codes: `codes[k][mu]` indexes chunk `k` of sequence `mu`.
    codes: Vec<Vec<u16>>,
}

impl EpsilonDenoiser {
    pub fn new(train: &[SequenceSample], q: usize, eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::config(format!("sharpness must be finite and >= 0, got {eps}")));
        }
        let first = train
            .first()
            .ok_or_else(|| Error::config("smoothed empirical denoiser needs at least one training sequence"))?;
        let len = first.len();
        let mut flat = Vec::with_capacity(train.len() * len);
        for s in train {
            if s.len() != len || s.symbols.iter().any(|&x| x as usize >= q) {
                return Err(Error::Invalid("training sequences must share length and alphabet".into()));
            }
            flat.extend_from_slice(&s.symbols);
        }

        let budget = (train.len() / 2).clamp(q, MAX_TABLE);
        let mut width = 1;
        while width < len && q.pow(width as u32 + 1) <= budget {
            width += 1;
        }
        let chunks: Vec<Chunk> = (0..len)
            .step_by(width)
            .map(|start| {
                let len = width.min(len - start);
                Chunk {
                    start,
                    len,
                    size: q.pow(len as u32),
                }
            })
            .collect();
        let codes = chunks
            .iter()
            .map(|c| {
                flat.chunks_exact(len)
                    .map(|row| {
                        row[c.start..c.start + c.len]
                            .iter()
                            .rev()
                            .fold(0u16, |acc, &x| acc * q as u16 + x as u16)
                    })
                    .collect()
            })
            .collect();
        Ok(EpsilonDenoiser {
            q,
            len,
            eps,
            train: flat,
            chunks,
            codes,
        })
    }

    pub fn sharpness(&self) -> f64 {
        self.eps
    }

    pub fn n_train(&self) -> usize {
        self.train.len() / self.len
    }

    pub fn training_sequence(&self, mu: usize) -> &[u8] {
        &self.train[mu * self.len..(mu + 1) * self.len]
    }

    /// Probability that a sampled position keeps its training symbol.
    pub fn match_probability(&self) -> f64 {
        1.0 / (1.0 + (self.q - 1) as f64 * (-self.eps).exp())
    }

    /// Draw from the smoothed empirical distribution: a uniform component,
    /// then independent per-position kernels around it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SequenceSample {
        let mu = rng.random_range(0..self.n_train());
        let p_match = self.match_probability();
        let symbols = self
            .training_sequence(mu)
            .iter()
            .map(|&s| {
                if rng.random::<f64>() < p_match {
                    s
                } else {
                    let other = rng.random_range(0..self.q - 1) as u8;
                    if other >= s {
                        other + 1
                    } else {
                        other
                    }
                }
            })
            .collect();
        SequenceSample::new(symbols)
    }

    /// Per-chunk tables of `prod_{i in chunk} r_i(digit_i)` for per-site factors `r`.
    fn tables(&self, site: &[f64], combine: impl Fn(f64, f64) -> f64, unit: f64) -> Vec<Vec<f64>> {
        let q = self.q;
        self.chunks
            .iter()
            .map(|c| {
                let mut table = Vec::with_capacity(c.size);
                table.push(unit);
                for p in 0..c.len {
                    let row = &site[(c.start + p) * q..(c.start + p + 1) * q];
                    let prev = table.len();
                    table.resize(prev * q, unit);
                    for d in (0..q).rev() {
                        for idx in 0..prev {
                            table[d * prev + idx] = combine(table[idx], row[d]);
                        }
                    }
                }
                table
            })
            .collect()
    }

    /// Per-chunk histograms of the relative component weights, with the
    /// largest weight scaled to 1.
    fn weight_histograms(&self, site: &[f64]) -> Vec<Vec<f64>> {
        let tables = self.tables(site, |a, b| a * b, 1.0);
        let mut weights = vec![1.0; self.n_train()];
        for (codes, table) in self.codes.iter().zip(&tables) {
            for (w, &c) in weights.iter_mut().zip(codes) {
                *w *= table[c as usize];
            }
        }
        let max = weights.iter().fold(0.0f64, |m, &w| m.max(w));
        if max < LINEAR_FLOOR {
            let logs: Vec<f64> = site.iter().map(|v| v.ln()).collect();
            let tables = self.tables(&logs, |a, b| a + b, 0.0);
            weights.fill(0.0);
            for (codes, table) in self.codes.iter().zip(&tables) {
                for (w, &c) in weights.iter_mut().zip(codes) {
                    *w += table[c as usize];
                }
            }
            let max = weights.iter().fold(f64::NEG_INFINITY, |m, &w| m.max(w));
            weights.iter_mut().for_each(|w| *w = (*w - max).exp());
        }
        self.codes
            .iter()
            .zip(&self.chunks)
            .map(|(codes, c)| {
                let mut hist = vec![0.0; c.size];
                for (&w, &code) in weights.iter().zip(codes) {
                    hist[code as usize] += w;
                }
                hist
            })
            .collect()
    }
}

impl Denoiser for EpsilonDenoiser {
    fn shape(&self) -> (usize, usize) {
        (self.len, self.q)
    }

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), field.shape())?;
        let (q, len) = (self.q, self.len);
        let probs = field.probs();
        let off = (-self.eps).exp();
        let on = -(-self.eps).exp_m1();

        // Site masses m_i(b), scaled so each position's largest is 1.
        let mut site = vec![0.0; len * q];
        for i in 0..len {
            let row = &mut site[i * q..(i + 1) * q];
            for (b, m) in row.iter_mut().enumerate() {
                *m = on * probs[(i, b)] + off;
            }
            let max = row.iter().fold(0.0f64, |m, &v| m.max(v));
            row.iter_mut().for_each(|m| *m /= max);
        }
        let hists = self.weight_histograms(&site);

        // G_i(b): marginals of the chunk histograms, digit p at stride q^p.
        let mut mass = vec![0.0; len * q];
        for (c, hist) in self.chunks.iter().zip(&hists) {
            let mut stride = 1;
            for p in 0..c.len {
                let g = &mut mass[(c.start + p) * q..(c.start + p + 1) * q];
                for block in hist.chunks_exact(stride * q) {
                    for (d, digit) in block.chunks_exact(stride).enumerate() {
                        g[d] += digit.iter().sum::<f64>();
                    }
                }
                stride *= q;
            }
        }

        let mut out = Array2::zeros((len, q));
        for i in 0..len {
            let g = &mass[i * q..(i + 1) * q];
            let m = &site[i * q..(i + 1) * q];
            let spread: f64 = g.iter().zip(m).filter(|(_, &m)| m > 0.0).map(|(g, m)| g / m).sum();
            let mut row = out.row_mut(i);
            for a in 0..q {
                let own = if m[a] > 0.0 { g[a] / m[a] } else { 0.0 };
                row[a] = probs[(i, a)] * (off * spread + on * own);
            }
            let s = row.sum();
            row /= s;
        }
        Ok(PosteriorMarginals::new_unchecked(out))
    }

    fn label(&self) -> String {
        format!("eps:eps={}", self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n N q) evaluation of the mixture posterior in log space.
    fn naive(train: &[SequenceSample], q: usize, eps: f64, field: &FieldPrior) -> Array2<f64> {
        let len = train[0].len();
        let f = field.probs();
        let off = (-eps).exp();
        let log_w: Vec<f64> = train
            .iter()
            .map(|s| {
                s.symbols
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| ((1.0 - off) * f[(i, x as usize)] + off).ln())
                    .sum()
            })
            .collect();
        let max = log_w.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let z: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
        let mut out = Array2::zeros((len, q));
        for (s, lw) in train.iter().zip(&log_w) {
            let w = (lw - max).exp() / z;
            for i in 0..len {
                let x = s.symbols[i] as usize;
                let norm = (1.0 - off) * f[(i, x)] + off;
                for a in 0..q {
                    let kappa = if a == x { 1.0 } else { off };
                    out[(i, a)] += w * kappa * f[(i, a)] / norm;
                }
            }
        }
        out
    }

    fn random_train(rng: &mut ChaCha8Rng, n: usize, len: usize, q: usize) -> Vec<SequenceSample> {
        (0..n)
            .map(|_| SequenceSample::new((0..len).map(|_| rng.random_range(0..q as u8)).collect()))
            .collect()
    }

    #[test]
    fn chunked_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(n, len, q) in &[(1, 4, 3), (7, 5, 2), (300, 16, 6), (5000, 16, 6), (40, 9, 4)] {
            let train = random_train(&mut rng, n, len, q);
            for &eps in &[0.0, 0.7, 2.0, 5.0, 50.0] {
                let d = EpsilonDenoiser::new(&train, q, eps).unwrap();
                let logits = Array2::from_shape_simple_fn((len, q), || 3.0 * rng.random::<f64>());
                let f = FieldPrior::from_logits(logits.view());
                let fast = d.posterior(&f).unwrap();
                let slow = naive(&train, q, eps, &f);
                for (a, b) in fast.rows().iter().zip(slow.iter()) {
                    assert!((a - b).abs() < 1e-10, "n={n} eps={eps}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn log_path_handles_sharp_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = random_train(&mut rng, 50, 16, 6);
        let d = EpsilonDenoiser::new(&train, 6, 50.0).unwrap();
        let logits = Array2::from_shape_simple_fn((16, 6), || 60.0 * rng.random::<f64>());
        let f = FieldPrior::from_logits(logits.view());
        let fast = d.posterior(&f).unwrap();
        let slow = naive(&train, 6, 50.0, &f);
        for (a, b) in fast.rows().iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_sharpness_returns_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let train = random_train(&mut rng, 100, 8, 5);
        let d = EpsilonDenoiser::new(&train, 5, 0.0).unwrap();
        let logits = Array2::from_shape_simple_fn((8, 5), || 4.0 * rng.random::<f64>() - 2.0);
        let f = FieldPrior::from_logits(logits.view());
        let out = d.posterior(&f).unwrap();
        for (a, b) in out.rows().iter().zip(f.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_state_hand_example() {
        let train = vec![SequenceSample::new(vec![0]), SequenceSample::new(vec![1])];
        let d = EpsilonDenoiser::new(&train, 2, std::f64::consts::LN_2).unwrap();
        let out = d.posterior(&FieldPrior::uniform(1, 2)).unwrap();
        assert!((out.rows()[(0, 0)] - 0.5).abs() < 1e-15);
        // The per-component posteriors of the same example.
        let f = FieldPrior::from_probs(array![[0.5, 0.5]].view()).unwrap();
        let single = EpsilonDenoiser::new(&train[..1], 2, std::f64::consts::LN_2).unwrap();
        let p = single.posterior(&f).unwrap();
        assert!((p.rows()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let train = vec![SequenceSample::new(vec![0, 1])];
        assert!(EpsilonDenoiser::new(&train, 2, -1.0).is_err());
        assert!(EpsilonDenoiser::new(&train, 2, f64::NAN).is_err());
        assert!(EpsilonDenoiser::new(&[], 2, 1.0).is_err());
        let d = EpsilonDenoiser::new(&train, 2, 1.0).unwrap();
        assert!(d.posterior(&FieldPrior::uniform(3, 2)).is_err());
    }

    #[test]
    fn sampler_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let train = random_train(&mut rng, 20, 8, 4);
        let sharp = EpsilonDenoiser::new(&train, 4, 50.0).unwrap();
        for _ in 0..1000 {
            let s = sharp.sample(&mut rng);
            assert!(train.contains(&s));
        }
        let flat = EpsilonDenoiser::new(&train, 4, 0.0).unwrap();
        assert_eq!(flat.match_probability(), 0.25);
    }
}
