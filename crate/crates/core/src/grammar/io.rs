//! Grammar JSON and the plain-text dataset format.
//!
//! Datasets are one sequence per line, space separated, with 1-based
//! symbols, preceded by a `# grammar=<fingerprint> seed=<seed>` comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fingerprint_hex, Dataset, Grammar, GrammarSpec, SequenceSample};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct GrammarFile {
    spec: GrammarSpec,
    rules: Vec<Vec<Vec<f64>>>,
    fingerprint: String,
}

pub fn grammar_to_json(grammar: &Grammar) -> Result<String> {
    let q = grammar.q();
    let rules = (0..q)
        .map(|a| {
            (0..q)
                .map(|b| (0..q).map(|c| grammar.weight(a, b, c)).collect())
                .collect()
        })
        .collect();
    let file = GrammarFile {
        spec: grammar.spec().clone(),
        rules,
        fingerprint: fingerprint_hex(grammar.fingerprint()),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn grammar_from_json(text: &str) -> Result<Grammar> {
    let file: GrammarFile = serde_json::from_str(text)?;
    let q = file.spec.q;
    let shape_ok = file.rules.len() == q
        && file
            .rules
            .iter()
            .all(|m| m.len() == q && m.iter().all(|row| row.len() == q));
    if !shape_ok {
        return Err(Error::Invalid(format!("rule tensor is not {q}x{q}x{q}")));
    }
    let dense = file.rules.into_iter().flatten().flatten().collect();
    let grammar = Grammar::from_dense(file.spec, dense)?;
    let fp = fingerprint_hex(grammar.fingerprint());
    if fp != file.fingerprint {
        return Err(Error::Invalid(format!(
            "fingerprint mismatch: file says {}, rules hash to {fp}",
            file.fingerprint
        )));
    }
    Ok(grammar)
}

pub fn write_grammar(path: &Path, grammar: &Grammar) -> Result<()> {
    fs::write(path, grammar_to_json(grammar)? + "\n")?;
    Ok(())
}

pub fn read_grammar(path: &Path) -> Result<Grammar> {
    let text = fs::read_to_string(path)?;
    grammar_from_json(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        msg: e.to_string(),
    })
}

pub fn dataset_to_string(dataset: &Dataset) -> String {
    let mut out = format!(
        "# grammar={} seed={}\n",
        fingerprint_hex(dataset.fingerprint),
        dataset.seed
    );
    for s in &dataset.sequences {
        let mut first = true;
        for &x in &s.symbols {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{}", x as u32 + 1).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_str(text: &str) -> std::result::Result<Dataset, String> {
    let mut fingerprint = 0;
    let mut seed = 0;
    let mut sequences = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            for kv in header.split_whitespace() {
                match kv.split_once('=') {
                    Some(("grammar", v)) => {
                        fingerprint = u64::from_str_radix(v, 16)
                            .map_err(|e| format!("line {}: bad fingerprint: {e}", lineno + 1))?
                    }
                    Some(("seed", v)) => {
                        seed = v
                            .parse()
                            .map_err(|e| format!("line {}: bad seed: {e}", lineno + 1))?
                    }
                    _ => {}
                }
            }
            continue;
        }
        let symbols = line
            .split_whitespace()
            .map(|tok| match tok.parse::<u32>() {
                Ok(v) if (1..=256).contains(&v) => Ok((v - 1) as u8),
                _ => Err(format!("line {}: bad symbol {tok:?}", lineno + 1)),
            })
            .collect::<std::result::Result<Vec<u8>, String>>()?;
        if let Some(first) = sequences.first() {
            let first: &SequenceSample = first;
            if first.len() != symbols.len() {
                return Err(format!("line {}: ragged sequence length", lineno + 1));
            }
        }
        sequences.push(SequenceSample::new(symbols));
    }
    Ok(Dataset {
        sequences,
        fingerprint,
        seed,
    })
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, dataset_to_string(dataset))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    dataset_from_str(&text).map_err(|msg| Error::Parse {
        path: path.to_owned(),
        msg,
    })
}
