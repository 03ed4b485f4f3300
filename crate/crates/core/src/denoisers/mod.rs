//! Posterior-mean estimators for one-hot diffusion.
//!
//! Every denoiser maps a [`FieldPrior`] to per-position marginals; the
//! noisy state and time enter only through the field.

mod bp;
mod brute;
mod epsilon;
mod spec;

pub use bp::BpDenoiser;
pub use brute::{brute_force_posterior, EnumerationDenoiser};
pub use epsilon::EpsilonDenoiser;
pub use spec::DenoiserSpec;

use ndarray::Array2;

use crate::diffusion::{field_prior, FieldPrior, NoiseSchedule, OneHotState};
use crate::error::{Error, Result};

/// Tolerance on row sums of posterior marginals.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// `N x q` matrix of per-position marginals; each row on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginals {
    rows: Array2<f64>,
}

impl PosteriorMarginals {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
                return Err(Error::Invalid(format!("marginal row {i} has invalid entries")));
            }
            let s = row.sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::Invalid(format!("marginal row {i} sums to {s}")));
            }
        }
        Ok(PosteriorMarginals { rows })
    }

    /// Wraps `rows` without validation.
    pub fn new_unchecked(rows: Array2<f64>) -> Self {
        PosteriorMarginals { rows }
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.rows
    }

    pub fn shape(&self) -> (usize, usize) {
        self.rows.dim()
    }
}

pub trait Denoiser: Send + Sync {
    /// `(N, q)` of the states this denoiser accepts.
    fn shape(&self) -> (usize, usize);

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals>;

    fn label(&self) -> String;

    fn denoise(&self, x_t: &OneHotState, schedule: &NoiseSchedule) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), x_t.shape())?;
        self.posterior(&field_prior(x_t, schedule)?)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn shape(&self) -> (usize, usize) {
        (**self).shape()
    }

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals> {
        (**self).posterior(field)
    }

    fn label(&self) -> String {
        (**self).label()
    }
}

/// Returns the field itself: a flat prior over sequences.
#[derive(Clone, Copy, Debug)]
pub struct FieldOnly {
    pub len: usize,
    pub q: usize,
}

pub fn field_only_posterior(field: &FieldPrior) -> PosteriorMarginals {
    PosteriorMarginals::new_unchecked(field.probs().clone())
}

impl Denoiser for FieldOnly {
    fn shape(&self) -> (usize, usize) {
        (self.len, self.q)
    }

    fn posterior(&self, field: &FieldPrior) -> Result<PosteriorMarginals> {
        Error::check_dims(self.shape(), field.shape())?;
        Ok(field_only_posterior(field))
    }

    fn label(&self) -> String {
        "field".into()
    }
}
