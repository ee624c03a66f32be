use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::measurement::MeasurementLikelihood;
use super::model::{GpssmModel, Sequence, TransitionCache};
use crate::error::{NavError, Result};
use crate::linalg::cholesky_noisy;

/// Joint trajectory samples `x_{0:T}` with normalized log-weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub dim: usize,
    /// Each trajectory is `(T+1)·dim` values, time-major.
    pub trajectories: Vec<Vec<f64>>,
    pub log_weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(dim: usize, trajectories: Vec<Vec<f64>>, log_weights: Vec<f64>) -> Result<Self> {
        if trajectories.is_empty() || trajectories.len() != log_weights.len() {
            return Err(NavError::InputShape(format!(
                "{} trajectories with {} weights",
                trajectories.len(),
                log_weights.len()
            )));
        }
        let len = trajectories[0].len();
        if dim == 0 || len % dim != 0 || trajectories.iter().any(|t| t.len() != len) {
            return Err(NavError::InputShape("trajectories must share a length divisible by the state dimension".into()));
        }
        let mut lw = log_weights;
        normalize_log_weights(&mut lw).ok_or(NavError::DegenerateLikelihood { step: 0 })?;
        Ok(Self {
            dim,
            trajectories,
            log_weights: lw,
        })
    }

    /// Equally weighted trajectories.
    pub fn uniform(dim: usize, trajectories: Vec<Vec<f64>>) -> Result<Self> {
        let n = trajectories.len();
        Self::new(dim, trajectories, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of time points `T + 1`.
    pub fn horizon(&self) -> usize {
        self.trajectories[0].len() / self.dim
    }

    pub fn state(&self, particle: usize, t: usize) -> &[f64] {
        &self.trajectories[particle][t * self.dim..(t + 1) * self.dim]
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    /// Weighted mean and covariance at every time point.
    pub fn moments(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let w = self.weights();
        let n = self.dim;
        (0..self.horizon())
            .map(|t| {
                let mut mean = vec![0.0; n];
                for (p, wp) in w.iter().enumerate() {
                    for (m, x) in mean.iter_mut().zip(self.state(p, t)) {
                        *m += wp * x;
                    }
                }
                let mut cov = vec![0.0; n * n];
                for (p, wp) in w.iter().enumerate() {
                    let x = self.state(p, t);
                    for i in 0..n {
                        for j in 0..n {
                            cov[i * n + j] += wp * (x[i] - mean[i]) * (x[j] - mean[j]);
                        }
                    }
                }
                (mean, cov)
            })
            .collect()
    }
}

/// Subtracts the log-sum-exp; `None` if no weight is finite.
pub(crate) fn normalize_log_weights(lw: &mut [f64]) -> Option<()> {
    let max = lw.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let sum: f64 = lw.iter().map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() }).sum();
    let lse = max + sum.ln();
    for v in lw.iter_mut() {
        *v = if v.is_nan() { f64::NEG_INFINITY } else { *v - lse };
    }
    Some(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    pub particles: usize,
    pub backward: usize,
    /// Resample when the effective sample size drops below this fraction.
    pub ess_threshold: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            particles: 500,
            backward: 50,
            ess_threshold: 0.5,
        }
    }
}

fn systematic_resample<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

fn sample_index<R: Rng>(log_w: &[f64], rng: &mut R) -> Option<usize> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let w: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return Some(i);
        }
        u -= wi;
    }
    w.iter().rposition(|v| *v > 0.0)
}

/// Bootstrap particle filter on the auxiliary state-space model followed by
/// backward simulation of `config.backward` joint trajectories.
pub fn particle_smoother<R: Rng>(
    model: &GpssmModel,
    seq: &Sequence,
    meas: &dyn MeasurementLikelihood,
    config: &SmootherConfig,
    rng: &mut R,
) -> Result<ParticleCloud> {
    let cache = TransitionCache::new(model)?;
    smooth_with_cache(&cache, model, seq, meas, config, rng)
}

pub(crate) fn smooth_with_cache<R: Rng>(
    cache: &TransitionCache,
    model: &GpssmModel,
    seq: &Sequence,
    meas: &dyn MeasurementLikelihood,
    config: &SmootherConfig,
    rng: &mut R,
) -> Result<ParticleCloud> {
    let n = model.state_dim();
    let du = model.control_dim();
    let s = config.particles;
    let steps = seq.len();
    if steps == 0 {
        return Err(NavError::InvalidArguments("smoothing needs at least one step".into()));
    }
    if s < 2 || config.backward == 0 {
        return Err(NavError::InvalidArguments("need at least two particles and one backward trajectory".into()));
    }
    if seq.initial.dim() != n
        || seq.controls.iter().any(|u| u.len() != du)
        || seq.measurements.iter().any(|y| y.is_empty())
    {
        return Err(NavError::InputShape("sequence dimensions do not match the model".into()));
    }
    let q_sd: Vec<f64> = model.process_noise.iter().map(|q| q.sqrt()).collect();
    let init = cholesky_noisy(&seq.initial.cov, seq.initial.cov.diagonal().max().max(1e-300))?;
    let l0 = init.chol.l();

    // particles[t]: s·n, log_w[t]: normalized filter weights at t.
    let mut particles: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    let mut log_w: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
    // Transition means and log-corrections computed from particles[t].
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut log_c: Vec<Vec<f64>> = Vec::with_capacity(steps);

    let mut x0 = vec![0.0; s * n];
    let mut eps = vec![0.0; n];
    for j in 0..s {
        for e in eps.iter_mut() {
            *e = StandardNormal.sample(rng);
        }
        for i in 0..n {
            let mut v = seq.initial.mean[i];
            for k in 0..=i {
                v += l0[(i, k)] * eps[k];
            }
            x0[j * n + i] = v;
        }
    }
    particles.push(x0);
    log_w.push(vec![-(s as f64).ln(); s]);

    let mut xhat = vec![0.0; n + du];
    for t in 1..=steps {
        let prev = &particles[t - 1];
        let u = &seq.controls[t - 1];
        let mut m_t = vec![0.0; s * n];
        let mut c_t = vec![0.0; s];
        for j in 0..s {
            xhat[..n].copy_from_slice(&prev[j * n..(j + 1) * n]);
            xhat[n..].copy_from_slice(u);
            c_t[j] = cache.transition(&xhat, &mut m_t[j * n..(j + 1) * n]);
        }

        let w_prev: Vec<f64> = log_w[t - 1].iter().map(|v| v.exp()).collect();
        let ess = 1.0 / w_prev.iter().map(|w| w * w).sum::<f64>();
        let (ancestors, base): (Vec<usize>, Vec<f64>) = if ess < config.ess_threshold * s as f64 {
            (systematic_resample(&w_prev, rng), vec![-(s as f64).ln(); s])
        } else {
            ((0..s).collect(), log_w[t - 1].clone())
        };

        let y = &seq.measurements[t - 1];
        let mut next = vec![0.0; s * n];
        let mut lw = vec![0.0; s];
        for j in 0..s {
            let a = ancestors[j];
            for i in 0..n {
                let z: f64 = StandardNormal.sample(rng);
                next[j * n + i] = m_t[a * n + i] + q_sd[i] * z;
            }
            lw[j] = base[j] + c_t[a] + meas.log_likelihood(&next[j * n..(j + 1) * n], y);
        }
        normalize_log_weights(&mut lw).ok_or(NavError::DegenerateLikelihood { step: t })?;
        particles.push(next);
        log_w.push(lw);
        means.push(m_t);
        log_c.push(c_t);
    }

    // Backward simulation.
    let mut trajectories = Vec::with_capacity(config.backward);
    let mut bw = vec![0.0; s];
    for _ in 0..config.backward {
        let mut traj = vec![0.0; (steps + 1) * n];
        let j = sample_index(&log_w[steps], rng).ok_or(NavError::DegenerateLikelihood { step: steps })?;
        traj[steps * n..].copy_from_slice(&particles[steps][j * n..(j + 1) * n]);
        for t in (0..steps).rev() {
            let (head, tail) = traj.split_at_mut((t + 1) * n);
            let next = &tail[..n];
            for i in 0..s {
                let mut lp = log_w[t][i] + log_c[t][i];
                for d in 0..n {
                    let r = next[d] - means[t][i * n + d];
                    lp -= 0.5 * r * r / model.process_noise[d];
                }
                bw[i] = lp;
            }
            let k = sample_index(&bw, rng).ok_or(NavError::DegenerateLikelihood { step: t })?;
            head[t * n..].copy_from_slice(&particles[t][k * n..(k + 1) * n]);
        }
        trajectories.push(traj);
    }
    ParticleCloud::uniform(n, trajectories)
}
