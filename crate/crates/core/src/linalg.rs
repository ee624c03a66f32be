//! Dense linear-algebra helpers shared by the GP and filtering code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

/// First diagonal jitter tried, relative to the kernel's signal variance.
pub const JITTER_START: f64 = 1e-9;
/// Largest relative jitter before giving up with a conditioning error.
pub const JITTER_MAX: f64 = 1e-3;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Cholesky factor together with the diagonal jitter that made it succeed.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// Returns `L⁻¹ v`, so that `‖L⁻¹ v‖² = vᵀ K⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("cholesky diagonal is strictly positive")
    }
}

fn try_factor(mat: &DMatrix<f64>, jitter: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = mat.clone();
    if jitter > 0.0 {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
    }
    let chol = Cholesky::new(m)?;
    // nalgebra accepts tiny positive pivots; reject factors that lost all precision.
    if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(chol)
    } else {
        None
    }
}

/// Factorizes a noise-free kernel matrix. Jitter starts at `1e-9·scale` and
/// grows tenfold up to `1e-3·scale`.
pub fn cholesky_jittered(mat: &DMatrix<f64>, scale: f64) -> Result<Factor> {
    check_square(mat)?;
    let mut rel = JITTER_START;
    loop {
        let jitter = rel * scale;
        if let Some(chol) = try_factor(mat, jitter) {
            return Ok(Factor { chol, jitter });
        }
        rel *= 10.0;
        if rel > JITTER_MAX * (1.0 + 1e-12) {
            return Err(NavError::Conditioning { jitter: JITTER_MAX * scale });
        }
    }
}

/// Factorizes a covariance that already carries observation noise on its
/// diagonal. The plain matrix is tried first; the jitter schedule of
/// [`cholesky_jittered`] is the fallback.
pub fn cholesky_noisy(mat: &DMatrix<f64>, scale: f64) -> Result<Factor> {
    check_square(mat)?;
    if let Some(chol) = try_factor(mat, 0.0) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    cholesky_jittered(mat, scale)
}

fn check_square(mat: &DMatrix<f64>) -> Result<()> {
    if mat.nrows() != mat.ncols() {
        return Err(NavError::InputShape(format!(
            "expected a square matrix, got {}x{}",
            mat.nrows(),
            mat.ncols()
        )));
    }
    if mat.iter().any(|v| !v.is_finite()) {
        return Err(NavError::Conditioning { jitter: 0.0 });
    }
    Ok(())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

#[inline]
pub fn log_normal_1d(x: f64, mean: f64, var: f64) -> f64 {
    let r = x - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// A multivariate normal distribution in moment form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    #[serde(with = "serde_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(NavError::InputShape(format!(
                "mean has {} entries but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: DMatrix::identity(n, n) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        let factor = cholesky_noisy(&self.cov, self.cov.diagonal().max().max(1.0))?;
        Ok(log_pdf_factored(x, &self.mean, &factor))
    }
}

/// Log-density of `N(x | mean, K)` given a factor of `K`.
pub fn log_pdf_factored(x: &DVector<f64>, mean: &DVector<f64>, factor: &Factor) -> f64 {
    let r = x - mean;
    let w = factor.whiten(&r);
    -0.5 * (r.len() as f64 * LN_2PI + factor.log_det() + w.norm_squared())
}

/// Serializes a dense matrix as an array of rows.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(D::Error::custom)
    }
}

pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        Ok(DVector::from_vec(v))
    }
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err("ragged matrix rows".to_string());
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
