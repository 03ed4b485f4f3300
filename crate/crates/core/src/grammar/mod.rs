//! Unambiguous binary-tree grammars and the sequence data they generate.
//!
//! A grammar is a sparse tensor `M[a][b][c]` of production weights `a -> bc`.
//! Every parent has exactly `q_eff` rules and no child pair belongs to two
//! parents, so the latent tree of an in-support sequence is recovered by a
//! deterministic bottom-up parse.

mod enumerate;
mod io;

pub use enumerate::{enumerate_support, enumerate_support_with_cap, DEFAULT_ENUMERATION_CAP};
pub use io::{
    dataset_from_str, dataset_to_string, grammar_from_json, grammar_to_json, read_dataset,
    read_grammar, write_dataset, write_grammar,
};

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Largest supported sequence depth (N = 2^20 leaves).
pub const MAX_DEPTH: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarSpec {
    /// Alphabet size.
    pub q: usize,
    /// Nonzero rules per parent symbol.
    pub q_eff: usize,
    /// Tree depth; sequences have `2^depth` symbols.
    pub depth: usize,
    /// Log-scale of the log-normal rule weights.
    pub log_scale: f64,
    pub seed: u64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        GrammarSpec {
            q: 6,
            q_eff: 4,
            depth: 4,
            log_scale: 1.0,
            seed: 0,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 || self.q > 256 {
            return Err(Error::config(format!("q = {} must lie in [2, 256]", self.q)));
        }
        if self.q_eff == 0 || self.q_eff >= self.q {
            return Err(Error::config(format!(
                "q_eff < q violated: need 1 <= q_eff < q, got q_eff = {}, q = {}",
                self.q_eff, self.q
            )));
        }
        if self.q * self.q_eff > self.q * self.q {
            return Err(Error::config(format!(
                "q * q_eff <= q^2 violated: {} child pairs requested from {}",
                self.q * self.q_eff,
                self.q * self.q
            )));
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(Error::config(format!(
                "depth = {} must lie in [1, {MAX_DEPTH}]",
                self.depth
            )));
        }
        if !(self.log_scale.is_finite() && self.log_scale >= 0.0) {
            return Err(Error::config(format!(
                "log_scale = {} must be finite and nonnegative",
                self.log_scale
            )));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        1 << self.depth
    }
}

/// One production `parent -> left right`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rule {
    pub parent: u8,
    pub left: u8,
    pub right: u8,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Grammar {
    spec: GrammarSpec,
    dense: Vec<f64>,
    rules: Vec<Rule>,
    /// `rules[offsets[a]..offsets[a + 1]]` are the rules of parent `a`.
    offsets: Vec<usize>,
    parent_of: Vec<Option<u8>>,
    fingerprint: u64,
}

/// A sequence of `2^depth` symbols in `0..q`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceSample {
    pub symbols: Vec<u8>,
}

impl SequenceSample {
    pub fn new(symbols: Vec<u8>) -> Self {
        SequenceSample { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

impl From<Vec<u8>> for SequenceSample {
    fn from(symbols: Vec<u8>) -> Self {
        SequenceSample { symbols }
    }
}

/// Internal nodes of a generation tree; `levels[d]` holds the `2^d` symbols at depth `d`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentTree {
    pub levels: Vec<Vec<u8>>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<SequenceSample>,
    pub fingerprint: u64,
    pub seed: u64,
}

impl Dataset {
    /// Draw `n` i.i.d. sequences from a single stream seeded by `seed`.
    pub fn generate(grammar: &Grammar, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..n).map(|_| grammar.sample(&mut rng)).collect();
        Dataset {
            sequences,
            fingerprint: grammar.fingerprint(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Split into the first `at` sequences and the rest.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let part = |seqs: &[SequenceSample]| Dataset {
            sequences: seqs.to_vec(),
            fingerprint: self.fingerprint,
            seed: self.seed,
        };
        (part(&self.sequences[..at]), part(&self.sequences[at..]))
    }

    /// Checks length, alphabet and support of every sequence against `grammar`.
    pub fn check_against(&self, grammar: &Grammar) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() != grammar.seq_len() {
                return Err(Error::Invalid(format!(
                    "sequence {i} has length {}, grammar expects {}",
                    s.len(),
                    grammar.seq_len()
                )));
            }
            if s.symbols.iter().any(|&x| x as usize >= grammar.q()) {
                return Err(Error::Invalid(format!("sequence {i} uses a symbol outside the alphabet")));
            }
            if grammar.log_prob(s) == f64::NEG_INFINITY {
                return Err(Error::Invalid(format!("sequence {i} is outside the grammar support")));
            }
        }
        Ok(())
    }
}

/// Draw a random grammar: disjoint child-pair sets chosen uniformly without
/// replacement from the q^2 grid, log-normal weights normalized per parent.
pub fn generate_grammar(spec: &GrammarSpec) -> Result<Grammar> {
    spec.validate()?;
    let (q, q_eff) = (spec.q, spec.q_eff);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = index::sample(&mut rng, q * q, q * q_eff).into_vec();
    let lognormal = LogNormal::new(0.0, spec.log_scale)
        .map_err(|e| Error::config(format!("log-normal weights: {e}")))?;

    let mut dense = vec![0.0; q * q * q];
    for a in 0..q {
        let chunk = &pairs[a * q_eff..(a + 1) * q_eff];
        let weights: Vec<f64> = chunk.iter().map(|_| lognormal.sample(&mut rng)).collect();
        let total: f64 = weights.iter().sum();
        for (&pair, w) in chunk.iter().zip(weights) {
            dense[a * q * q + pair] = w / total;
        }
    }
    Grammar::from_dense(spec.clone(), dense)
}

impl Grammar {
    /// Build a grammar from a dense `q*q*q` tensor, checking normalization,
    /// sparsity and unambiguity.
    pub fn from_dense(spec: GrammarSpec, dense: Vec<f64>) -> Result<Grammar> {
        spec.validate()?;
        let q = spec.q;
        if dense.len() != q * q * q {
            return Err(Error::Invalid(format!(
                "rule tensor has {} entries, expected {}",
                dense.len(),
                q * q * q
            )));
        }
        let mut rules = Vec::with_capacity(q * spec.q_eff);
        let mut offsets = Vec::with_capacity(q + 1);
        let mut parent_of: Vec<Option<u8>> = vec![None; q * q];
        for a in 0..q {
            offsets.push(rules.len());
            let slice = &dense[a * q * q..(a + 1) * q * q];
            let mut total = 0.0;
            let mut nonzero = 0;
            for (pair, &w) in slice.iter().enumerate() {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::Invalid(format!("rule weight M[{a}] entry {pair} = {w}")));
                }
                if w == 0.0 {
                    continue;
                }
                nonzero += 1;
                total += w;
                if let Some(other) = parent_of[pair] {
                    return Err(Error::Invalid(format!(
                        "ambiguous grammar: child pair ({}, {}) has parents {other} and {a}",
                        pair / q,
                        pair % q,
                    )));
                }
                parent_of[pair] = Some(a as u8);
                rules.push(Rule {
                    parent: a as u8,
                    left: (pair / q) as u8,
                    right: (pair % q) as u8,
                    weight: w,
                });
            }
            if nonzero != spec.q_eff {
                return Err(Error::Invalid(format!(
                    "parent {a} has {nonzero} rules, expected {}",
                    spec.q_eff
                )));
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::Invalid(format!("rules of parent {a} sum to {total}")));
            }
        }
        offsets.push(rules.len());
        let fingerprint = fingerprint_of(&dense);
        Ok(Grammar {
            spec,
            dense,
            rules,
            offsets,
            parent_of,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn q(&self) -> usize {
        self.spec.q
    }

    pub fn depth(&self) -> usize {
        self.spec.depth
    }

    pub fn seq_len(&self) -> usize {
        self.spec.seq_len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn dense(&self) -> &[f64] {
        &self.dense
    }

    pub fn weight(&self, a: usize, b: usize, c: usize) -> f64 {
        let q = self.q();
        self.dense[(a * q + b) * q + c]
    }

    /// All rules, grouped by parent.
    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rules_of(&self, parent: usize) -> &[Rule] {
        &self.rules[self.offsets[parent]..self.offsets[parent + 1]]
    }

    pub fn parent_of(&self, left: u8, right: u8) -> Option<u8> {
        self.parent_of[left as usize * self.q() + right as usize]
    }

    /// Expand one parent symbol by drawing a rule with probability `M[a][b][c]`.
    pub fn expand<R: Rng + ?Sized>(&self, parent: u8, rng: &mut R) -> (u8, u8) {
        let rules = self.rules_of(parent as usize);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for r in rules {
            acc += r.weight;
            if u < acc {
                return (r.left, r.right);
            }
        }
        let last = rules[rules.len() - 1];
        (last.left, last.right)
    }

    /// Draw a sequence from the full model with a uniform root.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SequenceSample {
        self.sample_with_tree(rng).0
    }

    pub fn sample_with_tree<R: Rng + ?Sized>(&self, rng: &mut R) -> (SequenceSample, LatentTree) {
        let root = rng.random_range(0..self.q()) as u8;
        let mut levels = vec![vec![root]];
        for _ in 0..self.depth() {
            let above = levels.last().unwrap();
            let mut below = Vec::with_capacity(above.len() * 2);
            for &a in above {
                let (b, c) = self.expand(a, rng);
                below.push(b);
                below.push(c);
            }
            levels.push(below);
        }
        let leaves = levels.pop().unwrap();
        (SequenceSample::new(leaves), LatentTree { levels })
    }

    /// Deterministic bottom-up parse; `None` when some adjacent pair has no parent.
    pub fn parse(&self, seq: &SequenceSample) -> Option<LatentTree> {
        if seq.len() != self.seq_len() {
            return None;
        }
        let mut levels = Vec::with_capacity(self.depth());
        let mut current = seq.symbols.clone();
        while current.len() > 1 {
            let up: Option<Vec<u8>> = current
                .chunks_exact(2)
                .map(|p| self.parent_of(p[0], p[1]))
                .collect();
            current = up?;
            levels.push(current.clone());
        }
        levels.reverse();
        Some(LatentTree { levels })
    }

    /// `log(1/q) + sum of log rule weights`, or `-inf` outside the support.
    pub fn log_prob(&self, seq: &SequenceSample) -> f64 {
        let tree = match self.parse(seq) {
            Some(t) => t,
            None => return f64::NEG_INFINITY,
        };
        let mut lp = -(self.q() as f64).ln();
        let mut children: &[u8] = &seq.symbols;
        for level in tree.levels.iter().rev() {
            for (j, &a) in level.iter().enumerate() {
                let (b, c) = (children[2 * j] as usize, children[2 * j + 1] as usize);
                lp += self.weight(a as usize, b, c).ln();
            }
            children = level;
        }
        lp
    }

    /// Child marginals `(M_L)[a][b] = sum_c M[a][b][c]`, `(M_R)[a][c] = sum_b M[a][b][c]`.
    pub fn effective_matrices(&self) -> (Array2<f64>, Array2<f64>) {
        let q = self.q();
        let mut left = Array2::zeros((q, q));
        let mut right = Array2::zeros((q, q));
        for r in &self.rules {
            left[(r.parent as usize, r.left as usize)] += r.weight;
            right[(r.parent as usize, r.right as usize)] += r.weight;
        }
        (left, right)
    }

    /// `P(x_j = b | root = a)` for the depth-`k` node with index `node`
    /// (0-based, left to right): the product of `M_L`/`M_R` along the branch.
    pub fn path_conditional(&self, node: usize, k: usize) -> Result<Array2<f64>> {
        if k > self.depth() {
            return Err(Error::OutOfRange {
                name: "filter level",
                value: k as i64,
                lo: 0,
                hi: self.depth() as i64,
            });
        }
        if node >= 1 << k {
            return Err(Error::OutOfRange {
                name: "node index",
                value: node as i64,
                lo: 0,
                hi: (1i64 << k) - 1,
            });
        }
        let (left, right) = self.effective_matrices();
        let mut out = Array2::eye(self.q());
        for level in 0..k {
            let goes_right = (node >> (k - 1 - level)) & 1 == 1;
            out = out.dot(if goes_right { &right } else { &left });
        }
        Ok(out)
    }

    /// Unconditional per-position symbol marginals, shape `N x q`.
    pub fn leaf_marginals(&self) -> Array2<f64> {
        let q = self.q();
        let n = self.seq_len();
        let (left, right) = self.effective_matrices();
        let mut level = vec![vec![1.0 / q as f64; q]];
        for _ in 0..self.depth() {
            let mut next = Vec::with_capacity(level.len() * 2);
            for v in &level {
                let v = ndarray::ArrayView1::from(v.as_slice());
                next.push(v.dot(&left).to_vec());
                next.push(v.dot(&right).to_vec());
            }
            level = next;
        }
        let mut out = Array2::zeros((n, q));
        for (i, row) in level.iter().enumerate() {
            for (a, &p) in row.iter().enumerate() {
                out[(i, a)] = p;
            }
        }
        out
    }
}

fn fingerprint_of(dense: &[f64]) -> u64 {
    let mut h = Sha256::new();
    for w in dense {
        h.update(w.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().unwrap())
}

/// Formats a fingerprint as 16 hex digits.
pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}
