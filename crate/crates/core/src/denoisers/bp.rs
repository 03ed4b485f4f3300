//! Exact belief propagation on the (optionally filtered) generation tree.
//!
//! Filter level `k` keeps the branching factors below depth `k` and links
//! each depth-`k` node directly to the root through `P(x_j | x_0)`. `k = 0`
//! is the full tree and `k = depth` the naive-Bayes model; both run through
//! the same upward/downward pass.
//!
//! Messages are computed in the linear domain and renormalized after every
//! update. When a field is so sharp that a message underflows, the pass is
//! rerun in the log domain from the field's log-probabilities.

use ndarray::Array2;

use super::{Denoiser, PosteriorMarginals};
use crate::diffusion::FieldPrior;
use crate::error::{Error, Result};
use crate::grammar::Grammar;

/// Unnormalized messages whose largest entry falls below this are treated
/// as underflowed.
const LINEAR_FLOOR: f64 = 1e-250;

#[derive(Clone, Copy, Debug)]
struct FlatRule {
    parent: usize,
    left: usize,
    right: usize,
    weight: f64,
    log_weight: f64,
}

#[derive(Clone, Debug)]
pub struct BpDenoiser {
    q: usize,
    depth: usize,
    k: usize,
    rules: Vec<FlatRule>,
    /// `2^k` row-stochastic `q x q` matrices, flattened.
    paths: Vec<f64>,
    log_paths: Vec<f64>,
}

impl BpDenoiser {
    pub fn new(grammar: &Grammar, k: usize) -> Result<Self> {
        if k > grammar.depth() {
            return Err(Error::OutOfRange {
                name: "filter level",
                value: k as i64,
                lo: 0,
                hi: grammar.depth() as i64,
            });
        }
        let rules = grammar
            .rules()
            .iter()
            .map(|r| FlatRule {
                parent: r.parent as usize,
                left: r.left as usize,
                right: r.right as usize,
                weight: r.weight,
                log_weight: r.weight.ln(),
            })
            .collect();
        let mut paths = Vec::new();
        for j in 0..1usize << k {
            paths.extend(grammar.path_conditional(j, k)?.iter().copied());
        }
        let log_paths = paths.iter().map(|p: &f64| p.ln()).collect();
        Ok(BpDenoiser {
            q: grammar.q(),
            depth: grammar.depth(),
            k,
            rules,
            paths,
            log_paths,
        })
    }

    pub fn filter_level(&self) -> usize {
        self.k
    }

    fn run<D: Domain>(&self, field: &FieldPrior) -> Option<Array2<f64>> {
        let q = self.q;
        let (depth, k) = (self.depth, self.k);
        let n = 1usize << depth;
        let (probs, logs) = (field.probs(), field.log_probs());

        // up[d]: upward message of each depth-d node, d in k..=depth.
        let mut up: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut leaves = vec![0.0; n * q];
        for i in 0..n {
            let row = &mut leaves[i * q..(i + 1) * q];
            for (a, v) in row.iter_mut().enumerate() {
                *v = D::leaf(probs[(i, a)], logs[(i, a)]);
            }
            if !D::normalize(row) {
                return None;
            }
        }
        up[depth] = leaves;
        for d in (k..depth).rev() {
            let children = &up[d + 1];
            let mut level = vec![D::ZERO; (1 << d) * q];
            for j in 0..1usize << d {
                let (l, r) = (&children[2 * j * q..], &children[(2 * j + 1) * q..]);
                let msg = &mut level[j * q..(j + 1) * q];
                for rule in &self.rules {
                    let term = D::mul(
                        D::weight(rule.weight, rule.log_weight),
                        D::mul(l[rule.left], r[rule.right]),
                    );
                    msg[rule.parent] = D::add(msg[rule.parent], term);
                }
                if !D::normalize(msg) {
                    return None;
                }
            }
            up[d] = level;
        }

        // Root level: messages from each depth-k node through P(x_j | x_0).
        let width = 1usize << k;
        let mut to_root = vec![D::ZERO; width * q];
        for j in 0..width {
            let path = &self.paths[j * q * q..(j + 1) * q * q];
            let log_path = &self.log_paths[j * q * q..(j + 1) * q * q];
            let msg = &mut to_root[j * q..(j + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    let p = D::weight(path[a * q + b], log_path[a * q + b]);
                    msg[a] = D::add(msg[a], D::mul(p, up[k][j * q + b]));
                }
            }
            if !D::normalize(msg) {
                return None;
            }
        }
        // Cavities by prefix/suffix products; the uniform root prior drops out.
        let mut prefix = vec![D::ONE; (width + 1) * q];
        for j in 0..width {
            for a in 0..q {
                prefix[(j + 1) * q + a] = D::mul(prefix[j * q + a], to_root[j * q + a]);
            }
            if !D::normalize(&mut prefix[(j + 1) * q..(j + 2) * q]) {
                return None;
            }
        }
        let mut suffix = vec![D::ONE; (width + 1) * q];
        for j in (0..width).rev() {
            for a in 0..q {
                suffix[j * q + a] = D::mul(suffix[(j + 1) * q + a], to_root[j * q + a]);
            }
            if !D::normalize(&mut suffix[j * q..(j + 1) * q]) {
                return None;
            }
        }
        let mut down: Vec<Vec<f64>> = vec![Vec::new(); depth + 1];
        let mut top = vec![D::ZERO; width * q];
        let mut cavity = vec![D::ZERO; q];
        for j in 0..width {
            for a in 0..q {
                cavity[a] = D::mul(prefix[j * q + a], suffix[(j + 1) * q + a]);
            }
            if !D::normalize(&mut cavity) {
                return None;
            }
            let path = &self.paths[j * q * q..(j + 1) * q * q];
            let log_path = &self.log_paths[j * q * q..(j + 1) * q * q];
            let msg = &mut top[j * q..(j + 1) * q];
            for a in 0..q {
                for b in 0..q {
                    let p = D::weight(path[a * q + b], log_path[a * q + b]);
                    msg[b] = D::add(msg[b], D::mul(cavity[a], p));
                }
            }
            if !D::normalize(msg) {
                return None;
            }
        }
        down[k] = top;

        // Downward through the branching factors.
        for d in k..depth {
            let children = &up[d + 1];
            let mut level = vec![D::ZERO; (1 << (d + 1)) * q];
            for j in 0..1usize << d {
                let outside = &down[d][j * q..(j + 1) * q];
                let (l, r) = (&children[2 * j * q..], &children[(2 * j + 1) * q..]);
                let (left_msg, right_msg) = level[2 * j * q..(2 * j + 2) * q].split_at_mut(q);
                for rule in &self.rules {
                    let base = D::mul(outside[rule.parent], D::weight(rule.weight, rule.log_weight));
                    left_msg[rule.left] = D::add(left_msg[rule.left], D::mul(base, r[rule.right]));
                    right_msg[rule.right] = D::add(right_msg[rule.right], D::mul(base, l[rule.left]));
                }
                if !D::normalize(left_msg) || !D::normalize(right_msg) {
                    return None;
                }
            }
            down[d + 1] = level;
        }

        let mut out = Array2::zeros((n, q));
        let mut belief = vec![D::ZERO; q];
        for i in 0..n {
            for a in 0..q {
                belief[a] = D::mul(up[depth][i * q + a], down[depth][i * q + a]);
            }
            if !D::normalize(&mut belief) {
                return None;
            }
            for a in 0..q {
                out[(i, a)] = D::to_prob(belief[a]);
            }
            let mut row = out.row_mut(i);
            let s = row.sum();
            row /= s;
        }
        Some(out)
    }
}

impl Denoiser for BpDenoiser {
    fn shape(&self) -> (usize, usize) {
        (1 << self.depth, self.q)
    }

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), field.shape())?;
        self.run::<Linear>(field)
            .or_else(|| self.run::<Log>(field))
            .map(PosteriorMarginals::new_unchecked)
            .ok_or_else(|| Error::Invalid("belief propagation hit a zero-probability field".into()))
    }

    fn label(&self) -> String {
        format!("bp:k={}", self.k)
    }
}

/// Arithmetic of one message representation.
trait Domain {
    const ZERO: f64;
    const ONE: f64;
    fn mul(a: f64, b: f64) -> f64;
    fn add(a: f64, b: f64) -> f64;
    fn weight(w: f64, log_w: f64) -> f64;
    fn leaf(p: f64, log_p: f64) -> f64;
    /// Rescale to a canonical representative; `false` if the message is degenerate.
    fn normalize(v: &mut [f64]) -> bool;
    fn to_prob(v: f64) -> f64;
}

struct Linear;

impl Domain for Linear {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;

    #[inline(always)]
    fn mul(a: f64, b: f64) -> f64 {
        a * b
    }

    #[inline(always)]
    fn add(a: f64, b: f64) -> f64 {
        a + b
    }

    #[inline(always)]
    fn weight(w: f64, _: f64) -> f64 {
        w
    }

    #[inline(always)]
    fn leaf(p: f64, _: f64) -> f64 {
        p
    }

    #[inline(always)]
    fn normalize(v: &mut [f64]) -> bool {
        let mut sum = 0.0;
        let mut max = 0.0f64;
        for &x in v.iter() {
            sum += x;
            max = max.max(x);
        }
        if !(max >= LINEAR_FLOOR && sum.is_finite()) {
            return false;
        }
        let inv = 1.0 / sum;
        v.iter_mut().for_each(|x| *x *= inv);
        true
    }

    #[inline(always)]
    fn to_prob(v: f64) -> f64 {
        v
    }
}

struct Log;

impl Domain for Log {
    const ZERO: f64 = f64::NEG_INFINITY;
    const ONE: f64 = 0.0;

    fn mul(a: f64, b: f64) -> f64 {
        a + b
    }

    fn add(a: f64, b: f64) -> f64 {
        if a == f64::NEG_INFINITY {
            return b;
        }
        if b == f64::NEG_INFINITY {
            return a;
        }
        let (hi, lo) = if a > b { (a, b) } else { (b, a) };
        hi + (lo - hi).exp().ln_1p()
    }

    fn weight(_: f64, log_w: f64) -> f64 {
        log_w
    }

    fn leaf(_: f64, log_p: f64) -> f64 {
        log_p
    }

    fn normalize(v: &mut [f64]) -> bool {
        let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        if !max.is_finite() {
            return false;
        }
        let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        v.iter_mut().for_each(|x| *x -= lse);
        true
    }

    fn to_prob(v: f64) -> f64 {
        v.exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::brute_force_posterior;
    use crate::grammar::{generate_grammar, GrammarSpec};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> Grammar {
        generate_grammar(&GrammarSpec {
            q: 3,
            q_eff: 2,
            depth: 2,
            log_scale: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, n: usize, q: usize, scale: f64) -> FieldPrior {
        let logits = Array2::from_shape_simple_fn((n, q), || scale * rng.random::<f64>());
        FieldPrior::from_logits(logits.view())
    }

    #[test]
    fn uniform_field_gives_leaf_marginals_at_every_level() {
        let g = generate_grammar(&GrammarSpec::default()).unwrap();
        let m = g.leaf_marginals();
        for k in 0..=4 {
            let out = BpDenoiser::new(&g, k)
                .unwrap()
                .posterior(&FieldPrior::uniform(16, 6))
                .unwrap();
            for (a, b) in out.rows().iter().zip(m.iter()) {
                assert!((a - b).abs() < 1e-9, "k = {k}");
            }
        }
    }

    #[test]
    fn matches_enumeration_on_small_grammar() {
        let g = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 0..=2 {
            let bp = BpDenoiser::new(&g, k).unwrap();
            for _ in 0..20 {
                let f = random_field(&mut rng, 4, 3, 4.0);
                let a = bp.posterior(&f).unwrap();
                let b = brute_force_posterior(&g, k, &f).unwrap();
                for (x, y) in a.rows().iter().zip(b.rows()) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn log_domain_agrees_with_linear() {
        let g = generate_grammar(&GrammarSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..=4 {
            let bp = BpDenoiser::new(&g, k).unwrap();
            let f = random_field(&mut rng, 16, 6, 6.0);
            let lin = bp.run::<Linear>(&f).unwrap();
            let log = bp.run::<Log>(&f).unwrap();
            for (x, y) in lin.iter().zip(log.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn extreme_field_falls_back_to_log_domain() {
        let g = small();
        let bp = BpDenoiser::new(&g, 0).unwrap();
        // Pin every leaf to symbol 0 with enormous confidence; this is usually
        // outside the support, so linear messages underflow.
        let logits = array![[3000.0, 0.0, 0.0], [3000.0, 0.0, 0.0], [3000.0, 0.0, 0.0], [3000.0, 0.0, 0.0]];
        let f = FieldPrior::from_logits(logits.view());
        let out = bp.posterior(&f).unwrap();
        for row in out.rows().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_level_and_shape() {
        let g = small();
        assert!(BpDenoiser::new(&g, 3).is_err());
        let bp = BpDenoiser::new(&g, 1).unwrap();
        assert!(bp.posterior(&FieldPrior::uniform(5, 3)).is_err());
        assert_eq!(bp.label(), "bp:k=1");
    }
}
