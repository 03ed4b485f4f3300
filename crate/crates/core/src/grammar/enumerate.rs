//! Exhaustive enumeration of the (possibly filtered) sequence distribution.
//!
//! Under filter level `k` the depth-`k` nodes are drawn independently given
//! the root, with `P(x_j | x_0)` from [`Grammar::path_conditional`], and the
//! ordinary branching process runs below them. Enumeration is only meant
//! for small instances, where it serves as an exact reference.

use ndarray::Array2;

use super::{Grammar, SequenceSample};
use crate::error::{Error, Result};

pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

pub fn enumerate_support(grammar: &Grammar, k: usize) -> Result<Vec<(SequenceSample, f64)>> {
    enumerate_support_with_cap(grammar, k, DEFAULT_ENUMERATION_CAP)
}

/// Every sequence with positive probability under filter level `k`, with its
/// probability. Fails when `q^N` exceeds `cap`.
pub fn enumerate_support_with_cap(
    grammar: &Grammar,
    k: usize,
    cap: usize,
) -> Result<Vec<(SequenceSample, f64)>> {
    let depth = grammar.depth();
    if k > depth {
        return Err(Error::OutOfRange {
            name: "filter level",
            value: k as i64,
            lo: 0,
            hi: depth as i64,
        });
    }
    let q = grammar.q();
    let states = (q as u64).checked_pow(grammar.seq_len() as u32);
    if states.is_none_or(|s| s > cap as u64) {
        return Err(Error::ResourceCap {
            what: "support enumeration",
            cap,
        });
    }

    // Subtree leaf blocks below a depth-k node, tagged with their top symbol.
    let height = depth - k;
    let mut blocks: Vec<(Vec<u8>, u8, f64)> = Vec::new();
    for top in 0..q as u8 {
        for (leaves, p) in expand(grammar, top, height) {
            blocks.push((leaves, top, p));
        }
    }
    let paths: Vec<Array2<f64>> = (0..1usize << k)
        .map(|j| grammar.path_conditional(j, k))
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    let mut prefix = Vec::with_capacity(grammar.seq_len());
    let carry = vec![1.0 / q as f64; q];
    descend(&blocks, &paths, 0, &carry, &mut prefix, &mut out);
    Ok(out)
}

fn expand(grammar: &Grammar, top: u8, height: usize) -> Vec<(Vec<u8>, f64)> {
    if height == 0 {
        return vec![(vec![top], 1.0)];
    }
    let mut out = Vec::new();
    for r in grammar.rules_of(top as usize) {
        let lefts = expand(grammar, r.left, height - 1);
        let rights = expand(grammar, r.right, height - 1);
        for (l, pl) in &lefts {
            for (rr, pr) in &rights {
                let mut leaves = l.clone();
                leaves.extend_from_slice(rr);
                out.push((leaves, r.weight * pl * pr));
            }
        }
    }
    out
}

/// `carry[a]` is `P(root = a) * prod_{j' < j} P(block_j' | root = a)`.
fn descend(
    blocks: &[(Vec<u8>, u8, f64)],
    paths: &[Array2<f64>],
    j: usize,
    carry: &[f64],
    prefix: &mut Vec<u8>,
    out: &mut Vec<(SequenceSample, f64)>,
) {
    if j == paths.len() {
        let p: f64 = carry.iter().sum();
        if p > 0.0 {
            out.push((SequenceSample::new(prefix.clone()), p));
        }
        return;
    }
    let path = &paths[j];
    let mut next = vec![0.0; carry.len()];
    for (leaves, top, p) in blocks {
        let mut alive = false;
        for (a, n) in next.iter_mut().enumerate() {
            *n = carry[a] * path[(a, *top as usize)] * p;
            alive |= *n > 0.0;
        }
        if !alive {
            continue;
        }
        let len = prefix.len();
        prefix.extend_from_slice(leaves);
        descend(blocks, paths, j + 1, &next, prefix, out);
        prefix.truncate(len);
    }
}
