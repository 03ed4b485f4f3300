//! Textual denoiser selection: `bp:k=K`, `eps:eps=E[:data=PATH]`, `field`.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::{BpDenoiser, Denoiser, EpsilonDenoiser, FieldOnly};
use crate::error::{Error, Result};
use crate::grammar::{read_dataset, Dataset, Grammar};

#[derive(Clone, Debug, PartialEq)]
pub enum DenoiserSpec {
    Bp { k: usize },
    Eps { eps: f64, data: Option<PathBuf> },
    Field,
}

impl FromStr for DenoiserSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind = parts.next().unwrap_or_default();
        let mut k = None;
        let mut eps = None;
        let mut data = None;
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("denoiser option {part:?} in {s:?} is not key=value")))?;
            match (kind, key) {
                ("bp", "k") => {
                    k = Some(value.parse().map_err(|_| Error::config(format!("bad filter level in {s:?}")))?)
                }
                ("eps", "eps") => {
                    eps = Some(value.parse().map_err(|_| Error::config(format!("bad sharpness in {s:?}")))?)
                }
                ("eps", "data") => data = Some(PathBuf::from(value)),
                _ => return Err(Error::config(format!("unknown option {key:?} for denoiser {kind:?}"))),
            }
        }
        match kind {
            "bp" => Ok(DenoiserSpec::Bp {
                k: k.ok_or_else(|| Error::config(format!("{s:?} needs k=LEVEL")))?,
            }),
            "eps" => Ok(DenoiserSpec::Eps {
                eps: eps.ok_or_else(|| Error::config(format!("{s:?} needs eps=VALUE")))?,
                data,
            }),
            "field" => Ok(DenoiserSpec::Field),
            _ => Err(Error::config(format!("unknown denoiser {s:?}; expected bp, eps or field"))),
        }
    }
}

impl fmt::Display for DenoiserSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenoiserSpec::Bp { k } => write!(f, "bp:k={k}"),
            DenoiserSpec::Eps { eps, data: None } => write!(f, "eps:eps={eps}"),
            DenoiserSpec::Eps { eps, data: Some(p) } => write!(f, "eps:eps={eps}:data={}", p.display()),
            DenoiserSpec::Field => write!(f, "field"),
        }
    }
}

impl DenoiserSpec {
    /// Instantiate for `grammar`. Smoothed empirical denoisers read their
    /// `data` file, or fall back to `default_data`.
    pub fn build(&self, grammar: &Grammar, default_data: Option<&Dataset>) -> Result<Box<dyn Denoiser>> {
        match self {
            DenoiserSpec::Bp { k } => Ok(Box::new(BpDenoiser::new(grammar, *k)?)),
            DenoiserSpec::Field => Ok(Box::new(FieldOnly {
                len: grammar.seq_len(),
                q: grammar.q(),
            })),
            DenoiserSpec::Eps { eps, data } => {
                let loaded;
                let dataset = match (data, default_data) {
                    (Some(path), _) => {
                        loaded = read_dataset(path)?;
                        &loaded
                    }
                    (None, Some(d)) => d,
                    (None, None) => return Err(Error::config(format!("{self} needs data=PATH"))),
                };
                dataset.check_against(grammar).map_err(|e| Error::config(e.to_string()))?;
                Ok(Box::new(EpsilonDenoiser::new(&dataset.sequences, grammar.q(), *eps)?))
            }
        }
    }
}
