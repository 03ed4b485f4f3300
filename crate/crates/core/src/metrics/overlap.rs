//! Overlaps, nearest-neighbor statistics and the replication criterion.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grammar::SequenceSample;

/// Pseudocount added to every histogram bin before comparing distributions.
pub const HISTOGRAM_PSEUDOCOUNT: f64 = 0.5;

/// Nearest/second-nearest distance ratio below which a sample replicates.
pub const REPLICATION_THRESHOLD: f64 = 1.0 / 3.0;

/// Fraction of positions where `a` and `b` agree.
pub fn overlap(a: &SequenceSample, b: &SequenceSample) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "overlap needs equal nonempty lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let same = a.symbols.iter().zip(&b.symbols).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len() as f64)
}

/// Sequences bit-packed for fast Hamming distances: each symbol occupies a
/// power-of-two bit field, so a word XOR folded within fields counts mismatches.
#[derive(Clone, Debug)]
pub struct PackedSequences {
    bits: u32,
    len: usize,
    words: usize,
    low_bits: u64,
    data: Vec<u64>,
}

impl PackedSequences {
    pub fn new(seqs: &[SequenceSample], q: usize) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.len());
        let bits = match q {
            0..=2 => 1,
            3..=4 => 2,
            5..=16 => 4,
            _ => 8,
        };
        let per_word = (64 / bits) as usize;
        let words = len.div_ceil(per_word);
        let mut low_bits = 0u64;
        for f in 0..per_word {
            low_bits |= 1 << (f as u32 * bits);
        }
        let mut data = vec![0u64; seqs.len() * words];
        for (n, s) in seqs.iter().enumerate() {
            if s.len() != len {
                return Err(Error::Invalid("sequences must share one length".into()));
            }
            for (i, &x) in s.symbols.iter().enumerate() {
                data[n * words + i / per_word] |= (x as u64) << ((i % per_word) as u32 * bits);
            }
        }
        Ok(PackedSequences {
            bits,
            len,
            words,
            low_bits,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.words).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    #[inline]
    fn mismatches(&self, a: &[u64], b: &[u64]) -> u32 {
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                let mut d = x ^ y;
                if self.bits >= 2 {
                    d |= d >> 1;
                }
                if self.bits >= 4 {
                    d |= d >> 2;
                }
                if self.bits >= 8 {
                    d |= d >> 4;
                }
                (d & self.low_bits).count_ones()
            })
            .sum()
    }

    /// Hamming distance between row `i` of `self` and row `j` of `other`.
    pub fn distance(&self, i: usize, other: &PackedSequences, j: usize) -> u32 {
        self.mismatches(self.row(i), other.row(j))
    }

    /// Smallest and second-smallest Hamming distance from `row` of `query`
    /// to distinct entries of `self`.
    pub fn two_nearest(&self, query: &PackedSequences, row: usize) -> (u32, u32) {
        let q = query.row(row);
        let mut best = (u32::MAX, u32::MAX);
        for j in 0..self.len() {
            let d = self.mismatches(q, self.row(j));
            if d < best.0 {
                best = (d, best.0);
            } else if d < best.1 {
                best.1 = d;
            }
            if best.1 == 0 {
                break;
            }
        }
        best
    }

    /// Smallest Hamming distance from `row` of `query` to any entry of `self`.
    pub fn nearest(&self, query: &PackedSequences, row: usize) -> u32 {
        let q = query.row(row);
        let mut best = u32::MAX;
        for j in 0..self.len() {
            best = best.min(self.mismatches(q, self.row(j)));
            if best == 0 {
                break;
            }
        }
        best
    }
}

/// Counts of nearest-neighbor overlaps `m / N`, indexed by `m` in `0..=N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OverlapHistogram {
    pub counts: Vec<u64>,
}

impl OverlapHistogram {
    pub fn new(seq_len: usize) -> Self {
        OverlapHistogram {
            counts: vec![0; seq_len + 1],
        }
    }

    pub fn seq_len(&self) -> usize {
        self.counts.len() - 1
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn record(&mut self, matches: usize) {
        self.counts[matches] += 1;
    }

    pub fn mean_overlap(&self) -> f64 {
        let n = self.seq_len() as f64;
        let weighted: f64 = self.counts.iter().enumerate().map(|(m, &c)| m as f64 * c as f64).sum();
        weighted / (n * self.total() as f64)
    }
}

/// For each sample, the best overlap with any training sequence.
pub fn nn_overlap_distribution(samples: &[SequenceSample], train: &[SequenceSample], q: usize) -> Result<OverlapHistogram> {
    if samples.is_empty() || train.is_empty() {
        return Err(Error::Invalid("nearest-neighbor overlaps need nonempty samples and training set".into()));
    }
    let train = PackedSequences::new(train, q)?;
    let query = PackedSequences::new(samples, q)?;
    nn_overlap_packed(&query, &train)
}

pub fn nn_overlap_packed(query: &PackedSequences, train: &PackedSequences) -> Result<OverlapHistogram> {
    if query.seq_len() != train.seq_len() {
        return Err(Error::Invalid("samples and training set differ in length".into()));
    }
    let n = train.seq_len();
    let best: Vec<u32> = (0..query.len())
        .into_par_iter()
        .map(|i| train.nearest(query, i))
        .collect();
    let mut hist = OverlapHistogram::new(n);
    for d in best {
        hist.record(n - d as usize);
    }
    Ok(hist)
}

/// `KL(gen || ref)` between overlap histograms after adding
/// [`HISTOGRAM_PSEUDOCOUNT`] to every bin.
pub fn nn_divergence(gen: &OverlapHistogram, reference: &OverlapHistogram) -> Result<f64> {
    if gen.counts.len() != reference.counts.len() {
        return Err(Error::Invalid(format!(
            "histograms over different lengths: {} vs {}",
            gen.seq_len(),
            reference.seq_len()
        )));
    }
    let bins = gen.counts.len() as f64;
    let zg = gen.total() as f64 + HISTOGRAM_PSEUDOCOUNT * bins;
    let zr = reference.total() as f64 + HISTOGRAM_PSEUDOCOUNT * bins;
    Ok(gen
        .counts
        .iter()
        .zip(&reference.counts)
        .map(|(&g, &r)| {
            let p = (g as f64 + HISTOGRAM_PSEUDOCOUNT) / zg;
            let s = (r as f64 + HISTOGRAM_PSEUDOCOUNT) / zr;
            p * (p / s).ln()
        })
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replication {
    /// Nearest over second-nearest Euclidean distance between one-hot encodings.
    pub ratio: f64,
    pub replicating: bool,
}

impl Replication {
    /// From Hamming distances; one-hot Euclidean distance is `sqrt(2 * hamming)`.
    pub fn from_hamming(nearest: u32, second: u32) -> Self {
        let ratio = if nearest == 0 {
            0.0
        } else {
            (nearest as f64 / second as f64).sqrt()
        };
        Replication {
            ratio,
            replicating: ratio < REPLICATION_THRESHOLD,
        }
    }
}

pub fn replication_flag(sample: &SequenceSample, train: &[SequenceSample], q: usize) -> Result<Replication> {
    if train.len() < 2 {
        return Err(Error::Invalid("replication criterion needs at least two training points".into()));
    }
    let packed = PackedSequences::new(train, q)?;
    let query = PackedSequences::new(std::slice::from_ref(sample), q)?;
    if query.seq_len() != packed.seq_len() {
        return Err(Error::Invalid("sample and training set differ in length".into()));
    }
    let (d1, d2) = packed.two_nearest(&query, 0);
    Ok(Replication::from_hamming(d1, d2))
}

/// Fraction of `samples` flagged as replicating a training point.
pub fn replication_rate(query: &PackedSequences, train: &PackedSequences) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::Invalid("replication criterion needs at least two training points".into()));
    }
    let flagged: usize = (0..query.len())
        .into_par_iter()
        .map(|i| {
            let (d1, d2) = train.two_nearest(query, i);
            Replication::from_hamming(d1, d2).replicating as usize
        })
        .sum();
    Ok(flagged as f64 / query.len() as f64)
}
