//! Fixed-cloud surrogate objective, the optimal inducing-posterior update and
//! hyperparameter gradients.
//!
//! Every expectation over `q(x_{0:T})` is a weighted average over the
//! trajectories of a [`ParticleCloud`]. Data terms are multiplied by `scale`
//! (number of sequences over minibatch size); the KL term is not.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::measurement::MeasurementLikelihood;
use super::model::{GpssmModel, NaturalParams, OutputCache, Sequence, TransitionCache};
use super::smoother::ParticleCloud;
use crate::error::{NavError, Result};
use crate::kernel::{MeanSpec, SeArdHyper};
use crate::linalg::{cholesky_noisy, log_normal_1d, symmetrize};

/// A sequence paired with samples from its smoothing distribution.
pub type CloudData<'a> = (&'a Sequence, &'a ParticleCloud);

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `−KL(q(v) ‖ p(v))`.
    pub neg_kl: f64,
    /// `E[log p(x_0)]`.
    pub initial: f64,
    /// `Σ_t E[E_{p(f|v)}[log p(x_t | f_t)]]`.
    pub transition: f64,
    /// `Σ_t E[log p(y_t | x_t)]`.
    pub measurement: f64,
}

impl ElboTerms {
    /// Surrogate objective: every term except the entropy of `q(x_{0:T})`.
    pub fn total(&self) -> f64 {
        self.neg_kl + self.initial + self.transition + self.measurement
    }
}

fn check_data(model: &GpssmModel, data: &[CloudData]) -> Result<()> {
    for (seq, cloud) in data {
        if cloud.dim != model.state_dim() || cloud.horizon() != seq.len() + 1 {
            return Err(NavError::InputShape(format!(
                "cloud covers {} time points of dimension {}; sequence has {} steps",
                cloud.horizon(),
                cloud.dim,
                seq.len()
            )));
        }
        if seq.controls.iter().any(|u| u.len() != model.control_dim()) {
            return Err(NavError::InputShape("control dimension does not match the model".into()));
        }
    }
    Ok(())
}

fn augmented(cloud: &ParticleCloud, p: usize, t: usize, u: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(cloud.state(p, t - 1));
    out.extend_from_slice(u);
}

/// `KL(N(μ,Σ) ‖ N(m_Z, K))` for one output from whitened moments.
fn whitened_kl(o: &OutputCache) -> Result<f64> {
    let m = o.mu_white.len() as f64;
    let f = cholesky_noisy(&o.sigma_white, o.sigma_white.diagonal().max().max(1e-300))?;
    Ok(0.5 * (o.sigma_white.trace() + o.mu_white.norm_squared() - m - f.log_det()))
}

pub fn elbo_terms(model: &GpssmModel, data: &[CloudData], meas: &dyn MeasurementLikelihood, scale: f64) -> Result<ElboTerms> {
    let cache = TransitionCache::new(model)?;
    elbo_with_cache(&cache, model, data, meas, scale)
}

pub(crate) fn elbo_with_cache(
    cache: &TransitionCache,
    model: &GpssmModel,
    data: &[CloudData],
    meas: &dyn MeasurementLikelihood,
    scale: f64,
) -> Result<ElboTerms> {
    check_data(model, data)?;
    let n = model.state_dim();
    let mut terms = ElboTerms::default();
    for o in &cache.outputs {
        terms.neg_kl -= whitened_kl(o)?;
    }
    let mut xhat = Vec::with_capacity(model.input_dim());
    for (seq, cloud) in data {
        let w = cloud.weights();
        let init = cholesky_noisy(&seq.initial.cov, seq.initial.cov.diagonal().max().max(1e-300))?;
        for (p, wp) in w.iter().enumerate() {
            let x0 = DVector::from_column_slice(cloud.state(p, 0));
            terms.initial += scale * wp * crate::linalg::log_pdf_factored(&x0, &seq.initial.mean, &init);
            for t in 1..=seq.len() {
                augmented(cloud, p, t, &seq.controls[t - 1], &mut xhat);
                let x = cloud.state(p, t);
                for d in 0..n {
                    let pr = cache.predict(&xhat, d);
                    let q = cache.outputs[d].q;
                    terms.transition += scale * wp * (log_normal_1d(x[d], pr.mean, q) - 0.5 * (pr.b + pr.asa) / q);
                }
                terms.measurement += scale * wp * meas.log_likelihood(x, &seq.measurements[t - 1]);
            }
        }
    }
    Ok(terms)
}

/// Whitened sufficient statistics of the optimal update for one output:
/// `Σ k̃ k̃ᵀ / Q` and `Σ k̃ (x − m_f(x̂) + aᵀ m_Z) / Q`, with `k̃ = L⁻¹k`.
struct WhiteStats {
    lam: DMatrix<f64>,
    h: DVector<f64>,
}

fn white_stats(cache: &TransitionCache, model: &GpssmModel, data: &[CloudData], scale: f64) -> Vec<WhiteStats> {
    let n = model.state_dim();
    let m = model.num_inducing();
    let mz_white: Vec<DVector<f64>> = cache.outputs.iter().map(|o| o.whiten(&o.m_z)).collect();
    let mut stats: Vec<WhiteStats> = (0..n)
        .map(|_| WhiteStats {
            lam: DMatrix::zeros(m, m),
            h: DVector::zeros(m),
        })
        .collect();
    let mut xhat = Vec::with_capacity(model.input_dim());
    for (seq, cloud) in data {
        let w = cloud.weights();
        let rows = w.len() * seq.len();
        for d in 0..n {
            let o = &cache.outputs[d];
            let mut kw = DMatrix::<f64>::zeros(rows, m);
            let mut scaled = DMatrix::<f64>::zeros(rows, m);
            let mut i = 0;
            for (p, wp) in w.iter().enumerate() {
                for t in 1..=seq.len() {
                    augmented(cloud, p, t, &seq.controls[t - 1], &mut xhat);
                    let x = cloud.state(p, t);
                    let pr = cache.predict(&xhat, d);
                    let prior_mean = pr.mean - pr.k_white.dot(&o.mu_white);
                    let target = x[d] - prior_mean + pr.k_white.dot(&mz_white[d]);
                    let c = scale * wp / o.q;
                    kw.row_mut(i).tr_copy_from(&pr.k_white);
                    scaled.row_mut(i).tr_copy_from(&(&pr.k_white * c));
                    stats[d].h.axpy(c * target, &pr.k_white, 1.0);
                    i += 1;
                }
            }
            stats[d].lam += scaled.tr_mul(&kw);
        }
    }
    stats
}

/// Natural parameters of the optimal `q(v)` given the cloud:
/// `η₁ = K⁻¹m_Z + Σ Aᵀ Q⁻¹ (x_t − m_f(x̂) + A m_Z)`,
/// `η₂ = −½ (K⁻¹ + Σ Aᵀ Q⁻¹ A)`.
pub fn update_natural_params(model: &GpssmModel, data: &[CloudData], scale: f64) -> Result<NaturalParams> {
    check_data(model, data)?;
    let cache = TransitionCache::new(model)?;
    let stats = white_stats(&cache, model, data, scale);
    let m = model.num_inducing();
    let n = model.state_dim();
    let mut eta1 = DVector::zeros(m * n);
    let mut eta2 = DMatrix::zeros(m * n, m * n);
    for (d, (o, s)) in cache.outputs.iter().zip(&stats).enumerate() {
        let k_inv = o.k_inv();
        let linv = o.l.solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive diagonal");
        let e1 = &k_inv * &o.m_z + o.unwhiten_t(&s.h);
        let mut e2 = (&k_inv + linv.transpose() * &s.lam * &linv) * -0.5;
        symmetrize(&mut e2);
        eta1.rows_mut(d * m, m).copy_from(&e1);
        eta2.view_mut((d * m, d * m), (m, m)).copy_from(&e2);
    }
    Ok(NaturalParams { eta1, eta2 })
}

/// Damped update `η ← (1 − ρ) η + ρ η̂`, carried out in whitened
/// coordinates and written back to the model's `(μ, Σ)`.
pub fn apply_natural_update(model: &mut GpssmModel, data: &[CloudData], rho: f64, scale: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(NavError::InvalidArguments(format!("damping must lie in (0, 1], got {rho}")));
    }
    check_data(model, data)?;
    let cache = TransitionCache::new(model)?;
    let stats = white_stats(&cache, model, data, scale);
    let m = model.num_inducing();
    let eye = DMatrix::<f64>::identity(m, m);
    let mut blocks = Vec::with_capacity(stats.len());
    for (o, s) in cache.outputs.iter().zip(&stats) {
        let mz_white = o.whiten(&o.m_z);
        let mut lam_new = &eye + &s.lam;
        let mut h_new = &mz_white + &s.h;
        if rho < 1.0 {
            let sf = cholesky_noisy(&o.sigma_white, o.sigma_white.diagonal().max().max(1e-300))?;
            let lam_cur = sf.inverse();
            let h_cur = &lam_cur * (&o.mu_white + &mz_white);
            lam_new = lam_cur * (1.0 - rho) + lam_new * rho;
            h_new = h_cur * (1.0 - rho) + h_new * rho;
        }
        symmetrize(&mut lam_new);
        let lf = cholesky_noisy(&lam_new, lam_new.diagonal().max())?;
        let sigma_white = lf.inverse();
        let mu_white = lf.solve(&h_new);
        let mu = &o.l * mu_white;
        let mut sigma = &o.l * sigma_white * o.l.transpose();
        symmetrize(&mut sigma);
        blocks.push((mu, sigma));
    }
    model.set_posterior_blocks(&blocks);
    Ok(())
}

/// Gradient of the surrogate with respect to log-hyperparameters, log
/// process noise and inducing inputs, with `(μ, Σ)` and the cloud held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperGradient {
    /// Per output `[∂/∂log σ², ∂/∂log ℓ₁, …]`.
    pub log_hyper: Vec<Vec<f64>>,
    pub log_noise: Vec<f64>,
    /// `M × (D_x + D_u)`.
    pub inducing: DMatrix<f64>,
}

impl HyperGradient {
    /// Same layout as [`model_log_params`].
    pub fn flatten(&self, include_inducing: bool) -> Vec<f64> {
        let mut out: Vec<f64> = self.log_hyper.iter().flatten().copied().collect();
        out.extend(&self.log_noise);
        if include_inducing {
            for r in self.inducing.row_iter() {
                out.extend(r.iter());
            }
        }
        out
    }
}

/// `[log θ_f per output…, log Q…, Z row-major (optional)]`.
pub fn model_log_params(model: &GpssmModel, include_inducing: bool) -> Vec<f64> {
    let mut out: Vec<f64> = model.transition_hyper.iter().flat_map(|h| h.to_log_params()).collect();
    out.extend(model.process_noise.iter().map(|q| q.ln()));
    if include_inducing {
        for r in model.inducing_inputs.row_iter() {
            out.extend(r.iter());
        }
    }
    out
}

pub fn set_model_log_params(model: &mut GpssmModel, params: &[f64], include_inducing: bool) -> Result<()> {
    let n = model.state_dim();
    let di = model.input_dim();
    let expected = n * (di + 1) + n + if include_inducing { model.num_inducing() * di } else { 0 };
    if params.len() != expected {
        return Err(NavError::InputShape(format!("{} parameters, expected {expected}", params.len())));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(NavError::InvalidArguments("non-finite parameter".into()));
    }
    let mut at = 0;
    let mut hyper = Vec::with_capacity(n);
    for _ in 0..n {
        hyper.push(SeArdHyper::from_log_params(&params[at..at + di + 1]));
        at += di + 1;
    }
    for h in &hyper {
        h.validate()?;
    }
    let noise: Vec<f64> = params[at..at + n].iter().map(|v| v.exp()).collect();
    if noise.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
        return Err(NavError::InvalidArguments("process noise out of range".into()));
    }
    at += n;
    model.transition_hyper = hyper;
    model.process_noise = noise;
    if include_inducing {
        for i in 0..model.num_inducing() {
            for j in 0..di {
                model.inducing_inputs[(i, j)] = params[at];
                at += 1;
            }
        }
    }
    Ok(())
}

/// Indices of the inducing-input columns that `m_f(Z)` for output `d` reads.
fn mean_columns(spec: MeanSpec, n: usize, d: usize) -> Vec<usize> {
    match spec {
        MeanSpec::PdrAdditive => vec![d, n + d],
        MeanSpec::LinearIdentity => vec![d],
        MeanSpec::Zero => vec![],
    }
}

pub fn elbo_hyper_gradient(model: &GpssmModel, data: &[CloudData], scale: f64) -> Result<HyperGradient> {
    check_data(model, data)?;
    let cache = TransitionCache::new(model)?;
    let n = model.state_dim();
    let di = model.input_dim();
    let m = model.num_inducing();
    let z = &model.inducing_inputs;
    let mut grad = HyperGradient {
        log_hyper: Vec::with_capacity(n),
        log_noise: Vec::with_capacity(n),
        inducing: DMatrix::zeros(m, di),
    };
    let mut xhat = Vec::with_capacity(di);

    for d in 0..n {
        let o = &cache.outputs[d];
        let h = &o.hyper;
        let q = o.q;
        let inv_l2: Vec<f64> = h.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let linv = o.l.solve_lower_triangular(&DMatrix::identity(m, m)).expect("positive diagonal");
        // K⁻¹(μ − m_Z)
        let w_tilde = linv.transpose() * &o.mu_white;

        let mut g_mat = DMatrix::<f64>::zeros(m, m);
        let mut g_sv = 0.0;
        let mut g_ls = vec![0.0; di];
        let mut g_q = 0.0;
        let mut g_mz = DVector::<f64>::zeros(m);

        for (seq, cloud) in data {
            let w = cloud.weights();
            let rows = w.len() * seq.len();
            let mut kw = DMatrix::<f64>::zeros(rows, m);
            let mut kr = DMatrix::<f64>::zeros(rows, m);
            let mut xs = DMatrix::<f64>::zeros(rows, di);
            let mut cs = DVector::<f64>::zeros(rows);
            let mut rs = DVector::<f64>::zeros(rows);
            let mut i = 0;
            for (p, wp) in w.iter().enumerate() {
                let c = scale * wp;
                for t in 1..=seq.len() {
                    augmented(cloud, p, t, &seq.controls[t - 1], &mut xhat);
                    let pr = cache.predict(&xhat, d);
                    let r = cloud.state(p, t)[d] - pr.mean;
                    kw.row_mut(i).tr_copy_from(&pr.k_white);
                    kr.row_mut(i).tr_copy_from(&pr.k);
                    for (j, v) in xhat.iter().enumerate() {
                        xs[(i, j)] = *v;
                    }
                    cs[i] = c;
                    rs[i] = r;
                    g_q += c * (-0.5 + 0.5 * (r * r + pr.b + pr.asa) / q);
                    g_sv -= c * 0.5 / q * h.signal_variance;
                    i += 1;
                }
            }
            // Row i of `a` is aᵢᵀ = k̃ᵢᵀL⁻¹; row i of `pk` is (L⁻ᵀΣ̃k̃ᵢ)ᵀ.
            let a = &kw * &linv;
            let pk = &kw * &o.sigma_white * &linv;
            let rq = &rs / q;
            let outer = &rq * w_tilde.transpose();
            // ∂/∂k per row, and the rank-one K-sensitivities vᵢaᵢᵀ.
            let gk = &outer - (&pk - &a) / q;
            let mut v = -outer + &pk / q - &a * (0.5 / q);
            for (mut row, c) in v.row_iter_mut().zip(cs.iter()) {
                row *= *c;
            }
            g_mat += v.tr_mul(&a);
            let mut gkk = gk.component_mul(&kr);
            for (mut row, c) in gkk.row_iter_mut().zip(cs.iter()) {
                row *= *c;
            }
            g_sv += gkk.sum();
            let s1 = gkk.tr_mul(&xs);
            let s2 = gkk.tr_mul(&xs.map(|v| v * v));
            let col = gkk.row_sum().transpose();
            for mi in 0..m {
                for j in 0..di {
                    let zj = z[(mi, j)];
                    grad.inducing[(mi, j)] += (s1[(mi, j)] - zj * col[mi]) * inv_l2[j];
                    g_ls[j] += (s2[(mi, j)] - 2.0 * zj * s1[(mi, j)] + zj * zj * col[mi]) * inv_l2[j];
                }
            }
            g_mz -= a.tr_mul(&cs.component_mul(&rq));
        }

        // −KL: ½(K⁻¹(Σ + wwᵀ)K⁻¹ − K⁻¹) against dK, w̃ against dm_Z.
        let p_mat = linv.transpose() * &o.sigma_white * &linv;
        let k_inv = linv.transpose() * &linv;
        g_mat += (p_mat + &w_tilde * w_tilde.transpose() - k_inv) * 0.5;
        g_mz += &w_tilde;
        let mut g_sym = &g_mat + g_mat.transpose();
        g_sym *= 0.5;

        let kj = o.k_full();
        g_sv += kj.component_mul(&g_sym).sum();
        for j in 0..di {
            let mut acc = 0.0;
            for a_i in 0..m {
                for b_i in 0..m {
                    if a_i == b_i {
                        continue;
                    }
                    let diff = z[(a_i, j)] - z[(b_i, j)];
                    let k_ab = kj[(a_i, b_i)];
                    acc += g_sym[(a_i, b_i)] * k_ab * diff * diff * inv_l2[j];
                    // ∂K_ab/∂Z_aj counted for row a; symmetry doubles it.
                    grad.inducing[(a_i, j)] += 2.0 * g_sym[(a_i, b_i)] * k_ab * (-diff) * inv_l2[j];
                }
            }
            g_ls[j] += acc;
        }
        for col in mean_columns(model.transition_mean, n, d) {
            for mi in 0..m {
                grad.inducing[(mi, col)] += g_mz[mi];
            }
        }

        let mut row = Vec::with_capacity(di + 1);
        row.push(g_sv);
        row.extend(g_ls);
        grad.log_hyper.push(row);
        grad.log_noise.push(g_q);
    }
    Ok(grad)
}
