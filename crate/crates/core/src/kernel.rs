//! Squared-exponential ARD kernel and the parameter-free mean functions
//! shared by the measurement GP and the transition GP.
//!
//! Inputs are stored row-wise: an `N × D` matrix holds `N` points of
//! dimension `D`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

/// Hyperparameters of one scalar output of an SE-ARD kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeArdHyper {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl SeArdHyper {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let h = Self {
            signal_variance,
            lengthscales,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(NavError::InvalidArguments(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if self.lengthscales.is_empty() {
            return Err(NavError::InvalidArguments(
                "at least one lengthscale is required".into(),
            ));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(NavError::InvalidArguments(format!(
                "lengthscales must be positive, got {l}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `[log σ², log ℓ₁, …, log ℓ_D]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log_params(p: &[f64]) -> Self {
        Self {
            signal_variance: p[0].exp(),
            lengthscales: p[1..].iter().map(|v| v.exp()).collect(),
        }
    }

    /// Kernel value without dimension checks; callers guarantee the lengths.
    #[inline]
    pub fn eval_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((x, y), l) in a.iter().zip(b).zip(&self.lengthscales) {
            let r = (x - y) / l;
            s += r * r;
        }
        self.signal_variance * (-0.5 * s).exp()
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(NavError::InputShape(format!(
                "input has dimension {got}, kernel expects {}",
                self.dim()
            )));
        }
        Ok(())
    }
}

pub fn se_ard_eval(a: &[f64], b: &[f64], hyper: &SeArdHyper) -> Result<f64> {
    hyper.check_dim(a.len())?;
    hyper.check_dim(b.len())?;
    Ok(hyper.eval_unchecked(a, b))
}

/// Cross-covariance matrix between two row-wise point sets.
pub fn kernel_matrix(rows: &DMatrix<f64>, cols: &DMatrix<f64>, hyper: &SeArdHyper) -> Result<DMatrix<f64>> {
    hyper.check_dim(rows.ncols())?;
    hyper.check_dim(cols.ncols())?;
    let mut sq = DMatrix::<f64>::zeros(rows.nrows(), cols.nrows());
    for (d, l) in hyper.lengthscales.iter().enumerate() {
        let rc = rows.column(d);
        let cc = cols.column(d);
        for j in 0..cols.nrows() {
            let cj = cc[j];
            let mut col = sq.column_mut(j);
            for i in 0..rows.nrows() {
                let r = (rc[i] - cj) / l;
                col[i] += r * r;
            }
        }
    }
    sq.apply(|v| *v = hyper.signal_variance * (-0.5 * *v).exp());
    Ok(sq)
}

/// Covariances between a single point and every row of `cols`.
pub fn kernel_vector(x: &[f64], cols: &DMatrix<f64>, hyper: &SeArdHyper) -> Result<DVector<f64>> {
    hyper.check_dim(x.len())?;
    hyper.check_dim(cols.ncols())?;
    Ok(kernel_vector_unchecked(x, cols, hyper))
}

pub(crate) fn kernel_vector_unchecked(x: &[f64], cols: &DMatrix<f64>, hyper: &SeArdHyper) -> DVector<f64> {
    let n = cols.nrows();
    let mut out = DVector::<f64>::zeros(n);
    for (d, l) in hyper.lengthscales.iter().enumerate() {
        let c = cols.column(d);
        let inv = 1.0 / l;
        for i in 0..n {
            let r = (x[d] - c[i]) * inv;
            out[i] += r * r;
        }
    }
    out.apply(|v| *v = hyper.signal_variance * (-0.5 * *v).exp());
    out
}

/// Parameter-free mean functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanSpec {
    /// `x ↦ x`, the measurement-model mean.
    LinearIdentity,
    /// `(x, u) ↦ x + u`, dead reckoning as the transition mean.
    PdrAdditive,
    Zero,
}

pub fn mean_eval(spec: MeanSpec, x: &[f64], u: Option<&[f64]>) -> Result<DVector<f64>> {
    match spec {
        MeanSpec::LinearIdentity => Ok(DVector::from_column_slice(x)),
        MeanSpec::Zero => Ok(DVector::zeros(x.len())),
        MeanSpec::PdrAdditive => {
            let u = u.ok_or_else(|| {
                NavError::InvalidArguments("pdr-additive mean needs a control input".into())
            })?;
            if u.len() != x.len() {
                return Err(NavError::InvalidArguments(format!(
                    "control has dimension {}, state has {}",
                    u.len(),
                    x.len()
                )));
            }
            Ok(DVector::from_iterator(
                x.len(),
                x.iter().zip(u).map(|(a, b)| a + b),
            ))
        }
    }
}

/// Component `d` of the mean at `(x, u)` without allocating; `u` must match
/// `x` in length for [`MeanSpec::PdrAdditive`].
#[inline]
pub(crate) fn mean_component(spec: MeanSpec, x: &[f64], u: &[f64], d: usize) -> f64 {
    match spec {
        MeanSpec::LinearIdentity => x[d],
        MeanSpec::PdrAdditive => x[d] + u[d],
        MeanSpec::Zero => 0.0,
    }
}
