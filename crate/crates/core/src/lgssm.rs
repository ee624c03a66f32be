//! Linear-Gaussian state-space baseline.
//!
//! ```text
//! x_0 ~ N(m_0, P_0)
//! x_t = F x_{t-1} + G u_t + q_t,   q_t ~ N(0, Q)
//! y_t = H x_t + r_t,               r_t ~ N(0, R),   t = 1..T
//! ```
//!
//! Kalman filtering with Joseph-form updates, Rauch–Tung–Striebel smoothing
//! with lag-one cross covariances, and EM for the noise covariances (and
//! optionally the matrices).

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::linalg::{cholesky_noisy, log_pdf_factored, serde_matrix, symmetrize, Factor, Gaussian};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LgssmParams {
    #[serde(with = "serde_matrix")]
    pub transition_matrix: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub control_matrix: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub transition_noise: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub measurement_matrix: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub measurement_noise: DMatrix<f64>,
    pub initial: Gaussian,
}

impl LgssmParams {
    /// `x_t = x_{t-1} + u_t + q`, `y_t = x_t + r` with isotropic noises.
    pub fn random_walk(dim: usize, q: f64, r: f64, initial: Gaussian) -> Result<Self> {
        let eye = DMatrix::identity(dim, dim);
        let p = Self {
            transition_matrix: eye.clone(),
            control_matrix: eye.clone(),
            transition_noise: &eye * q,
            measurement_matrix: eye.clone(),
            measurement_noise: &eye * r,
            initial,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.transition_matrix.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.control_matrix.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.measurement_matrix.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.obs_dim();
        let shape = |name: &str, mat: &DMatrix<f64>, r: usize, c: usize| {
            if mat.nrows() != r || mat.ncols() != c {
                Err(NavError::InputShape(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    mat.nrows(),
                    mat.ncols()
                )))
            } else {
                Ok(())
            }
        };
        shape("transition_matrix", &self.transition_matrix, n, n)?;
        shape("control_matrix", &self.control_matrix, n, self.control_dim())?;
        shape("transition_noise", &self.transition_noise, n, n)?;
        shape("measurement_matrix", &self.measurement_matrix, m, n)?;
        shape("measurement_noise", &self.measurement_noise, m, m)?;
        shape("initial covariance", &self.initial.cov, n, n)?;
        if self.initial.dim() != n {
            return Err(NavError::InputShape(format!("initial mean has {} entries, expected {n}", self.initial.dim())));
        }
        for (name, mat) in [
            ("transition_noise", &self.transition_noise),
            ("measurement_noise", &self.measurement_noise),
            ("initial covariance", &self.initial.cov),
        ] {
            check_covariance(name, mat)?;
        }
        Ok(())
    }
}

fn check_covariance(name: &str, mat: &DMatrix<f64>) -> Result<()> {
    let asym = (mat - mat.transpose()).abs().max();
    let scale = mat.abs().max().max(1e-300);
    if asym > 1e-9 * scale {
        return Err(NavError::InvalidArguments(format!("{name} is not symmetric")));
    }
    if mat.diagonal().iter().any(|d| !(*d > 0.0)) {
        return Err(NavError::InvalidArguments(format!("{name} needs a positive diagonal")));
    }
    if mat.symmetric_eigenvalues().min() < -1e-9 * scale {
        return Err(NavError::InvalidArguments(format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// One-step predictions `p(x_t | y_{1:t-1})` for `t = 1..T` (index `t - 1`).
    pub predicted: Vec<Gaussian>,
    /// Filtered `p(x_t | y_{1:t})` for `t = 0..T`; index 0 is the prior.
    pub filtered: Vec<Gaussian>,
    pub log_likelihood: f64,
}

#[derive(Clone, Debug)]
pub struct SmootherOutput {
    /// Smoothed marginals for `t = 0..T`.
    pub smoothed: Vec<Gaussian>,
    /// `Cov(x_t, x_{t-1} | y_{1:T})` for `t = 1..T` (index `t - 1`).
    pub cross_cov: Vec<DMatrix<f64>>,
}

fn check_series(params: &LgssmParams, ys: &[DVector<f64>], us: &[DVector<f64>]) -> Result<()> {
    params.validate()?;
    if ys.len() != us.len() {
        return Err(NavError::InputShape(format!("{} measurements but {} controls", ys.len(), us.len())));
    }
    if let Some(y) = ys.iter().find(|y| y.len() != params.obs_dim()) {
        return Err(NavError::InputShape(format!("measurement of length {}, expected {}", y.len(), params.obs_dim())));
    }
    if let Some(u) = us.iter().find(|u| u.len() != params.control_dim()) {
        return Err(NavError::InputShape(format!("control of length {}, expected {}", u.len(), params.control_dim())));
    }
    Ok(())
}

pub fn kalman_filter(params: &LgssmParams, ys: &[DVector<f64>], us: &[DVector<f64>]) -> Result<FilterOutput> {
    check_series(params, ys, us)?;
    let offsets: Vec<DVector<f64>> = us.iter().map(|u| &params.control_matrix * u).collect();
    filter_with_offsets(params, ys, &offsets)
}

/// Filter with the control term replaced by explicit per-step offsets `b_t`
/// in `x_t = F x_{t-1} + b_t + q_t`.
pub fn filter_with_offsets(params: &LgssmParams, ys: &[DVector<f64>], offsets: &[DVector<f64>]) -> Result<FilterOutput> {
    params.validate()?;
    if ys.len() != offsets.len() {
        return Err(NavError::InputShape(format!("{} measurements but {} offsets", ys.len(), offsets.len())));
    }
    let n = params.state_dim();
    let f = &params.transition_matrix;
    let h = &params.measurement_matrix;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut filtered = Vec::with_capacity(ys.len() + 1);
    let mut predicted = Vec::with_capacity(ys.len());
    filtered.push(params.initial.clone());
    let mut ll = 0.0;

    for (y, b) in ys.iter().zip(offsets) {
        let prev = filtered.last().expect("prior pushed above");
        let m_pred = f * &prev.mean + b;
        let mut p_pred = f * &prev.cov * f.transpose() + &params.transition_noise;
        symmetrize(&mut p_pred);

        let mut s = h * &p_pred * h.transpose() + &params.measurement_noise;
        symmetrize(&mut s);
        let s_factor = factor_cov(&s)?;
        let innovation = y - h * &m_pred;
        ll += log_pdf_factored(&innovation, &DVector::zeros(innovation.len()), &s_factor);

        let ph_t = &p_pred * h.transpose();
        let gain = s_factor.solve_mat(&ph_t.transpose()).transpose();
        let m = &m_pred + &gain * innovation;
        let a = &eye - &gain * h;
        let mut p = &a * &p_pred * a.transpose() + &gain * &params.measurement_noise * gain.transpose();
        symmetrize(&mut p);

        predicted.push(Gaussian { mean: m_pred, cov: p_pred });
        filtered.push(Gaussian { mean: m, cov: p });
    }

    Ok(FilterOutput {
        predicted,
        filtered,
        log_likelihood: ll,
    })
}

fn factor_cov(s: &DMatrix<f64>) -> Result<Factor> {
    cholesky_noisy(s, s.diagonal().max().max(1e-12))
}

pub fn rts_smoother(params: &LgssmParams, filter: &FilterOutput) -> Result<SmootherOutput> {
    let steps = filter.predicted.len();
    if filter.filtered.len() != steps + 1 {
        return Err(NavError::InputShape(format!(
            "filter output has {} filtered and {} predicted marginals",
            filter.filtered.len(),
            steps
        )));
    }
    let f = &params.transition_matrix;
    let mut smoothed = filter.filtered.clone();
    let mut cross_cov = vec![DMatrix::zeros(0, 0); steps];
    for t in (0..steps).rev() {
        // smoothed[t + 1] is final; combine it with filtered[t].
        let filt = &filter.filtered[t];
        let pred = &filter.predicted[t];
        let pred_factor = factor_cov(&pred.cov)?;
        let gain = pred_factor.solve_mat(&(f * &filt.cov)).transpose();
        let next = &smoothed[t + 1];
        let mean = &filt.mean + &gain * (&next.mean - &pred.mean);
        let mut cov = &filt.cov + &gain * (&next.cov - &pred.cov) * gain.transpose();
        symmetrize(&mut cov);
        cross_cov[t] = &next.cov * gain.transpose();
        smoothed[t] = Gaussian { mean, cov };
    }
    Ok(SmootherOutput { smoothed, cross_cov })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub iterations: usize,
    pub learn_transition_noise: bool,
    pub learn_measurement_noise: bool,
    /// Re-estimate `F` and `G` jointly.
    pub learn_dynamics: bool,
    pub learn_measurement_matrix: bool,
    pub learn_initial: bool,
    /// Fail with an internal-consistency error when the log-likelihood drops
    /// by more than this between iterations; `None` disables the check.
    pub monotonicity_tol: Option<f64>,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            iterations: 50,
            learn_transition_noise: true,
            learn_measurement_noise: true,
            learn_dynamics: false,
            learn_measurement_matrix: false,
            learn_initial: false,
            monotonicity_tol: Some(1e-8),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub params: LgssmParams,
    /// Log-likelihood of the initial parameters followed by the value after
    /// every iteration (`iterations + 1` entries).
    pub log_likelihood: Vec<f64>,
}

pub fn em_fit(ys: &[DVector<f64>], us: &[DVector<f64>], init: &LgssmParams, opts: &EmOptions) -> Result<EmOutcome> {
    if opts.iterations == 0 {
        return Err(NavError::InvalidArguments("EM needs at least one iteration".into()));
    }
    check_series(init, ys, us)?;
    if ys.is_empty() {
        return Err(NavError::NoData);
    }
    let mut params = init.clone();
    let mut trace = Vec::with_capacity(opts.iterations + 1);
    for _ in 0..opts.iterations {
        let filter = kalman_filter(&params, ys, us)?;
        push_checked(&mut trace, filter.log_likelihood, opts)?;
        let smooth = rts_smoother(&params, &filter)?;
        params = m_step(&params, ys, us, &smooth, opts);
    }
    let last = kalman_filter(&params, ys, us)?;
    push_checked(&mut trace, last.log_likelihood, opts)?;
    Ok(EmOutcome {
        params,
        log_likelihood: trace,
    })
}

fn push_checked(trace: &mut Vec<f64>, ll: f64, opts: &EmOptions) -> Result<()> {
    if let (Some(prev), Some(tol)) = (trace.last(), opts.monotonicity_tol) {
        if ll < prev - tol {
            return Err(NavError::InternalConsistency(format!(
                "EM log-likelihood decreased from {prev} to {ll} at iteration {}",
                trace.len()
            )));
        }
    }
    trace.push(ll);
    Ok(())
}

/// Closed-form M-step from smoothed moments.
pub fn m_step(
    params: &LgssmParams,
    ys: &[DVector<f64>],
    us: &[DVector<f64>],
    smooth: &SmootherOutput,
    opts: &EmOptions,
) -> LgssmParams {
    let steps = ys.len() as f64;
    let n = params.state_dim();
    let k = params.control_dim();
    let mut out = params.clone();
    let xs = &smooth.smoothed;

    // Second moments E[x_t x_tᵀ] and E[x_t x_{t-1}ᵀ].
    let second = |t: usize| &xs[t].cov + &xs[t].mean * xs[t].mean.transpose();
    let lag = |t: usize| &smooth.cross_cov[t - 1] + &xs[t].mean * xs[t - 1].mean.transpose();

    if opts.learn_dynamics {
        // Regress x_t on z_t = (x_{t-1}, u_t).
        let mut szz = DMatrix::<f64>::zeros(n + k, n + k);
        let mut sxz = DMatrix::<f64>::zeros(n, n + k);
        for t in 1..xs.len() {
            let u = &us[t - 1];
            let prev = &xs[t - 1].mean;
            szz.view_mut((0, 0), (n, n)).add_assign(&second(t - 1));
            let pu = prev * u.transpose();
            szz.view_mut((0, n), (n, k)).add_assign(&pu);
            szz.view_mut((n, 0), (k, n)).add_assign(&pu.transpose());
            szz.view_mut((n, n), (k, k)).add_assign(&(u * u.transpose()));
            sxz.view_mut((0, 0), (n, n)).add_assign(&lag(t));
            sxz.view_mut((0, n), (n, k)).add_assign(&(&xs[t].mean * u.transpose()));
        }
        if let Some(inv) = szz.clone().try_inverse() {
            let fg = sxz * inv;
            out.transition_matrix = fg.columns(0, n).into_owned();
            out.control_matrix = fg.columns(n, k).into_owned();
        }
    }

    if opts.learn_transition_noise {
        let f = &out.transition_matrix;
        let mut q = DMatrix::<f64>::zeros(n, n);
        for t in 1..xs.len() {
            let b = &out.control_matrix * &us[t - 1];
            let c = &smooth.cross_cov[t - 1];
            let r = &xs[t].mean - f * &xs[t - 1].mean - b;
            q += &r * r.transpose() + &xs[t].cov - f * c.transpose() - c * f.transpose() + f * &xs[t - 1].cov * f.transpose();
        }
        q /= steps;
        symmetrize(&mut q);
        out.transition_noise = q;
    }

    if opts.learn_measurement_matrix {
        let m = params.obs_dim();
        let mut syx = DMatrix::<f64>::zeros(m, n);
        let mut sxx = DMatrix::<f64>::zeros(n, n);
        for t in 1..xs.len() {
            syx += &ys[t - 1] * xs[t].mean.transpose();
            sxx += second(t);
        }
        if let Some(inv) = sxx.try_inverse() {
            out.measurement_matrix = syx * inv;
        }
    }

    if opts.learn_measurement_noise {
        let h = &out.measurement_matrix;
        let m = params.obs_dim();
        let mut r = DMatrix::<f64>::zeros(m, m);
        for t in 1..xs.len() {
            let e = &ys[t - 1] - h * &xs[t].mean;
            r += &e * e.transpose() + h * &xs[t].cov * h.transpose();
        }
        r /= steps;
        symmetrize(&mut r);
        out.measurement_noise = r;
    }

    if opts.learn_initial {
        out.initial = xs[0].clone();
    }
    out
}
