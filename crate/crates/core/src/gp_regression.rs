//! Exact GP regression for the measurement function: maps a true position to
//! the WiFi position estimate it produces.
//!
//! Each output dimension is an independent scalar GP with its own SE-ARD
//! hyperparameters and noise variance, so the `I_N ⊗ R` block structure of the
//! joint covariance reduces to one `N × N` system per output.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::kernel::{kernel_matrix, kernel_vector_unchecked, mean_eval, MeanSpec, SeArdHyper};
use crate::linalg::{cholesky_noisy, serde_matrix, Factor};
use crate::optim::{minimize_cg, CgOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Trained measurement GP `y = g(x) + r`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MeasurementModelRecord", into = "MeasurementModelRecord")]
pub struct GpMeasurementModel {
    train_inputs: DMatrix<f64>,
    train_targets: DMatrix<f64>,
    hyper: Vec<SeArdHyper>,
    noise_var: Vec<f64>,
    mean: MeanSpec,
    outputs: Vec<OutputCache>,
}

#[derive(Clone, Debug)]
struct OutputCache {
    factor: Factor,
    alpha: DVector<f64>,
    residual: DVector<f64>,
}

/// On-disk form of [`GpMeasurementModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeasurementModelRecord {
    #[serde(with = "serde_matrix")]
    pub train_inputs: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub train_targets: DMatrix<f64>,
    pub hyper: Vec<SeArdHyper>,
    pub noise_diag: Vec<f64>,
    pub mean: MeanSpec,
}

impl TryFrom<MeasurementModelRecord> for GpMeasurementModel {
    type Error = NavError;
    fn try_from(r: MeasurementModelRecord) -> Result<Self> {
        GpMeasurementModel::new(r.train_inputs, r.train_targets, r.hyper, r.noise_diag, r.mean)
    }
}

impl From<GpMeasurementModel> for MeasurementModelRecord {
    fn from(m: GpMeasurementModel) -> Self {
        Self {
            train_inputs: m.train_inputs,
            train_targets: m.train_targets,
            hyper: m.hyper,
            noise_diag: m.noise_var,
            mean: m.mean,
        }
    }
}

/// Gradient of the log-marginal likelihood in log-hyperparameter space.
#[derive(Clone, Debug, PartialEq)]
pub struct LmlGradient {
    /// Per output: `[∂/∂log σ², ∂/∂log ℓ₁, …]`.
    pub kernel: Vec<Vec<f64>>,
    /// Per output: `∂/∂log R_dd`.
    pub log_noise: Vec<f64>,
}

impl LmlGradient {
    /// Per output `[kernel…, noise]`, outputs concatenated.
    pub fn flatten(&self) -> Vec<f64> {
        self.kernel
            .iter()
            .zip(&self.log_noise)
            .flat_map(|(k, n)| k.iter().copied().chain(std::iter::once(*n)))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn mean_matrix(inputs: &DMatrix<f64>, mean: MeanSpec, dy: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(inputs.nrows(), dy);
    for i in 0..inputs.nrows() {
        let x: Vec<f64> = inputs.row(i).iter().copied().collect();
        let v = mean_eval(mean, &x, None)?;
        if v.len() != dy {
            return Err(NavError::InputShape(format!(
                "mean function yields {} outputs, targets have {dy}",
                v.len()
            )));
        }
        m.row_mut(i).copy_from(&v.transpose());
    }
    Ok(m)
}

fn noisy_gram(inputs: &DMatrix<f64>, hyper: &SeArdHyper, noise: f64) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(inputs, inputs, hyper)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

impl GpMeasurementModel {
    pub fn new(
        train_inputs: DMatrix<f64>,
        train_targets: DMatrix<f64>,
        hyper: Vec<SeArdHyper>,
        noise_var: Vec<f64>,
        mean: MeanSpec,
    ) -> Result<Self> {
        let n = train_inputs.nrows();
        let dy = train_targets.ncols();
        if n == 0 {
            return Err(NavError::InvalidArguments("measurement GP needs at least one training pair".into()));
        }
        if train_targets.nrows() != n {
            return Err(NavError::InputShape(format!(
                "{n} inputs but {} targets",
                train_targets.nrows()
            )));
        }
        if hyper.len() != dy || noise_var.len() != dy {
            return Err(NavError::InputShape(format!(
                "{dy} outputs need {dy} hyperparameter sets and noise variances"
            )));
        }
        if let Some(r) = noise_var.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
            return Err(NavError::InvalidArguments(format!("noise variance must be positive, got {r}")));
        }
        for h in &hyper {
            h.validate()?;
        }
        let means = mean_matrix(&train_inputs, mean, dy)?;
        let mut outputs = Vec::with_capacity(dy);
        for d in 0..dy {
            let residual: DVector<f64> = train_targets.column(d) - means.column(d);
            let gram = noisy_gram(&train_inputs, &hyper[d], noise_var[d])?;
            let factor = cholesky_noisy(&gram, hyper[d].signal_variance)?;
            let alpha = factor.solve(&residual);
            outputs.push(OutputCache {
                factor,
                alpha,
                residual,
            });
        }
        Ok(Self {
            train_inputs,
            train_targets,
            hyper,
            noise_var,
            mean,
            outputs,
        })
    }

    pub fn train_inputs(&self) -> &DMatrix<f64> {
        &self.train_inputs
    }

    pub fn train_targets(&self) -> &DMatrix<f64> {
        &self.train_targets
    }

    pub fn hyper(&self) -> &[SeArdHyper] {
        &self.hyper
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn mean_spec(&self) -> MeanSpec {
        self.mean
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.train_targets.ncols()
    }

    pub fn len(&self) -> usize {
        self.train_inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `log N(y | m_g(x), K_g + I ⊗ R)`, summed over independent outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len() as f64;
        self.outputs
            .iter()
            .map(|o| -0.5 * (o.residual.dot(&o.alpha) + o.factor.log_det() + n * LN_2PI))
            .sum()
    }

    pub fn lml_gradient(&self) -> LmlGradient {
        let mut kernel = Vec::new();
        let mut log_noise = Vec::new();
        for (d, o) in self.outputs.iter().enumerate() {
            let g = output_gradient(&self.train_inputs, &self.hyper[d], self.noise_var[d], o);
            log_noise.push(*g.last().unwrap());
            kernel.push(g[..g.len() - 1].to_vec());
        }
        LmlGradient { kernel, log_noise }
    }

    /// Predictive distribution of a noisy measurement `y*` at `x_star`:
    /// independent outputs, so the covariance is diagonal.
    pub fn posterior_predict(&self, x_star: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x_star.len() != self.input_dim() {
            return Err(NavError::InputShape(format!(
                "test input has dimension {}, model expects {}",
                x_star.len(),
                self.input_dim()
            )));
        }
        let (mean, var) = self.predict_diag(x_star);
        Ok((mean, DMatrix::from_diagonal(&var)))
    }

    /// Predictive means and variances, unchecked; used in particle loops.
    pub fn predict_diag(&self, x_star: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let prior_mean = mean_eval(self.mean, x_star, None).expect("mean spec validated at construction");
        let dy = self.output_dim();
        let mut mean = DVector::zeros(dy);
        let mut var = DVector::zeros(dy);
        for d in 0..dy {
            let o = &self.outputs[d];
            let k = kernel_vector_unchecked(x_star, &self.train_inputs, &self.hyper[d]);
            mean[d] = prior_mean[d] + k.dot(&o.alpha);
            let w = o.factor.whiten(&k);
            var[d] = (self.hyper[d].signal_variance - w.norm_squared()).max(0.0) + self.noise_var[d];
        }
        (mean, var)
    }

    /// Predictive mean only; `O(N)` per output.
    pub fn predict_mean(&self, x_star: &[f64]) -> DVector<f64> {
        let prior_mean = mean_eval(self.mean, x_star, None).expect("mean spec validated at construction");
        DVector::from_iterator(
            self.output_dim(),
            (0..self.output_dim()).map(|d| {
                let k = kernel_vector_unchecked(x_star, &self.train_inputs, &self.hyper[d]);
                prior_mean[d] + k.dot(&self.outputs[d].alpha)
            }),
        )
    }
}

/// Gradient of one output's log-marginal likelihood with respect to
/// `[log σ², log ℓ₁, …, log ℓ_D, log r]`.
fn output_gradient(inputs: &DMatrix<f64>, hyper: &SeArdHyper, noise: f64, o: &OutputCache) -> Vec<f64> {
    let n = inputs.nrows();
    let dx = inputs.ncols();
    // W = α αᵀ − C⁻¹; every derivative is ½ tr(W ∂C).
    let mut w = o.factor.inverse();
    w.neg_mut();
    w.ger(1.0, &o.alpha, &o.alpha, 1.0);

    let inv_l2: Vec<f64> = hyper.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut g_sv = 0.0;
    let mut g_ls = vec![0.0; dx];
    for j in 0..n {
        for i in 0..n {
            let mut sq = 0.0;
            let mut parts = [0.0f64; 8];
            for d in 0..dx {
                let r = inputs[(i, d)] - inputs[(j, d)];
                let t = r * r * inv_l2[d];
                if d < 8 {
                    parts[d] = t;
                }
                sq += t;
            }
            let kij = hyper.signal_variance * (-0.5 * sq).exp();
            let wk = w[(i, j)] * kij;
            g_sv += wk;
            for d in 0..dx {
                let t = if d < 8 {
                    parts[d]
                } else {
                    let r = inputs[(i, d)] - inputs[(j, d)];
                    r * r * inv_l2[d]
                };
                g_ls[d] += wk * t;
            }
        }
    }
    let trace_w: f64 = w.diagonal().sum();
    let mut out = Vec::with_capacity(dx + 2);
    out.push(0.5 * g_sv);
    out.extend(g_ls.iter().map(|g| 0.5 * g));
    out.push(0.5 * noise * trace_w);
    out
}

/// Value and gradient of one output's LML at log-parameters
/// `[log σ², log ℓ…, log r]`.
fn output_objective(inputs: &DMatrix<f64>, residual: &DVector<f64>, params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let hyper = SeArdHyper::from_log_params(&params[..params.len() - 1]);
    let noise = params[params.len() - 1].exp();
    if !hyper.signal_variance.is_finite()
        || !noise.is_finite()
        || noise <= 0.0
        || hyper.lengthscales.iter().any(|l| !l.is_finite() || *l <= 0.0)
        || hyper.signal_variance <= 0.0
    {
        return Err(NavError::Conditioning { jitter: 0.0 });
    }
    let gram = noisy_gram(inputs, &hyper, noise)?;
    let factor = cholesky_noisy(&gram, hyper.signal_variance)?;
    let alpha = factor.solve(residual);
    let n = inputs.nrows() as f64;
    let lml = -0.5 * (residual.dot(&alpha) + factor.log_det() + n * LN_2PI);
    let cache = OutputCache {
        factor,
        alpha,
        residual: residual.clone(),
    };
    let grad = output_gradient(inputs, &hyper, noise, &cache);
    Ok((lml, grad))
}

/// Initial hyperparameters for [`optimize_measurement_gp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementHyper {
    pub hyper: Vec<SeArdHyper>,
    pub noise_var: Vec<f64>,
}

impl MeasurementHyper {
    /// Lengthscales from the per-dimension input spread, signal variance from
    /// the residual variance of each output and noise at a tenth of it.
    pub fn default_for(inputs: &DMatrix<f64>, targets: &DMatrix<f64>, mean: MeanSpec) -> Result<Self> {
        let means = mean_matrix(inputs, mean, targets.ncols())?;
        let lengthscales: Vec<f64> = (0..inputs.ncols())
            .map(|d| positive_or(std_dev(inputs.column(d).iter().copied()), 1.0))
            .collect();
        let mut hyper = Vec::new();
        let mut noise_var = Vec::new();
        for d in 0..targets.ncols() {
            let res = targets.column(d) - means.column(d);
            let var = positive_or(std_dev(res.iter().copied()).powi(2), 1.0);
            hyper.push(SeArdHyper::new(var, lengthscales.clone())?);
            noise_var.push(0.1 * var);
        }
        Ok(Self { hyper, noise_var })
    }
}

fn positive_or(v: f64, fallback: f64) -> f64 {
    if v > 1e-12 && v.is_finite() {
        v
    } else {
        fallback
    }
}

fn std_dev(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = it.clone().count() as f64;
    if n < 1.0 {
        return 0.0;
    }
    let mean = it.clone().sum::<f64>() / n;
    (it.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GpTrainConfig {
    /// Random log-space restarts in addition to the initial point.
    pub restarts: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Standard deviation of the log-space perturbation used for restarts.
    pub restart_spread: f64,
    pub seed: u64,
}

impl Default for GpTrainConfig {
    fn default() -> Self {
        Self {
            restarts: 3,
            grad_tol: 1e-5,
            max_iter: 500,
            restart_spread: 1.0,
            seed: 0,
        }
    }
}

/// Per-output optimization summary.
#[derive(Clone, Debug)]
pub struct OutputFitReport {
    pub initial_lml: f64,
    pub final_lml: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// LML after each accepted step of the winning start.
    pub trace: Vec<f64>,
}

/// Maximizes the log-marginal likelihood over log-hyperparameters with
/// conjugate gradients, keeping the best of the initial point and
/// `config.restarts` random restarts.
pub fn optimize_measurement_gp(
    train_inputs: &DMatrix<f64>,
    train_targets: &DMatrix<f64>,
    init: Option<&MeasurementHyper>,
) -> Result<GpMeasurementModel> {
    optimize_measurement_gp_with(train_inputs, train_targets, init, &GpTrainConfig::default()).map(|(m, _)| m)
}

pub fn optimize_measurement_gp_with(
    train_inputs: &DMatrix<f64>,
    train_targets: &DMatrix<f64>,
    init: Option<&MeasurementHyper>,
    config: &GpTrainConfig,
) -> Result<(GpMeasurementModel, Vec<OutputFitReport>)> {
    let mean = MeanSpec::LinearIdentity;
    if train_inputs.nrows() < 2 {
        return Err(NavError::InvalidArguments(
            "hyperparameter optimization needs at least two training pairs".into(),
        ));
    }
    if train_targets.nrows() != train_inputs.nrows() {
        return Err(NavError::InputShape(format!(
            "{} inputs but {} targets",
            train_inputs.nrows(),
            train_targets.nrows()
        )));
    }
    let init = match init {
        Some(h) => h.clone(),
        None => MeasurementHyper::default_for(train_inputs, train_targets, mean)?,
    };
    let means = mean_matrix(train_inputs, mean, train_targets.ncols())?;
    let opts = CgOptions {
        grad_tol: config.grad_tol,
        max_iter: config.max_iter,
        ..CgOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut hyper = Vec::new();
    let mut noise = Vec::new();
    let mut reports = Vec::new();
    for d in 0..train_targets.ncols() {
        let residual: DVector<f64> = train_targets.column(d) - means.column(d);
        let mut x0 = init.hyper[d].to_log_params();
        x0.push(init.noise_var[d].ln());
        let initial_lml = output_objective(train_inputs, &residual, &x0)?.0;

        let objective = |p: &[f64]| -> Option<(f64, Vec<f64>)> {
            output_objective(train_inputs, &residual, p)
                .ok()
                .map(|(v, g)| (-v, g.into_iter().map(|x| -x).collect()))
        };

        let mut starts = vec![x0.clone()];
        for _ in 0..config.restarts {
            starts.push(
                x0.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + config.restart_spread * z
                    })
                    .collect(),
            );
        }

        let mut best: Option<crate::optim::CgOutcome> = None;
        let mut first_error = None;
        for (i, s) in starts.into_iter().enumerate() {
            match minimize_cg(objective, s, &opts) {
                Ok(out) => {
                    if best.as_ref().map_or(true, |b| out.value < b.value) {
                        best = Some(out);
                    }
                }
                // A bad random restart is skipped; the initial point must work.
                Err(e) if i == 0 => first_error = Some(e),
                Err(_) => {}
            }
        }
        let best = match (best, first_error) {
            (Some(b), _) => b,
            (None, Some(e)) => return Err(e),
            (None, None) => unreachable!("at least one start is always attempted"),
        };
        let k = best.x.len();
        hyper.push(SeArdHyper::from_log_params(&best.x[..k - 1]));
        noise.push(best.x[k - 1].exp());
        reports.push(OutputFitReport {
            initial_lml,
            final_lml: -best.value,
            iterations: best.iterations,
            grad_norm: best.grad_norm,
            trace: best.trace.iter().map(|v| -v).collect(),
        });
    }
    let model = GpMeasurementModel::new(train_inputs.clone(), train_targets.clone(), hyper, noise, mean)?;
    Ok((model, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cholesky_jittered, log_pdf_factored};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_model(seed: u64, n: usize, noise_scale: f64) -> GpMeasurementModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-3.0..3.0));
        let y = DMatrix::from_fn(n, 2, |i, d| x[(i, d)] + rng.gen_range(-1.0..1.0));
        let hyper = (0..2)
            .map(|_| {
                SeArdHyper::new(rng.gen_range(0.5..2.0), vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0)])
                    .unwrap()
            })
            .collect();
        let noise = vec![noise_scale * rng.gen_range(0.1..0.5), noise_scale * rng.gen_range(0.1..0.5)];
        GpMeasurementModel::new(x, y, hyper, noise, MeanSpec::LinearIdentity).unwrap()
    }

    /// Dense joint Gaussian over all `N·D_y` targets with block covariance
    /// `K_g + I ⊗ R`, ordered `[y_1; y_2; …]`.
    fn dense_joint(model: &GpMeasurementModel) -> (DVector<f64>, DMatrix<f64>, DVector<f64>) {
        let n = model.len();
        let dy = model.output_dim();
        let mut cov = DMatrix::zeros(n * dy, n * dy);
        let mut mean = DVector::zeros(n * dy);
        let mut y = DVector::zeros(n * dy);
        for i in 0..n {
            for d in 0..dy {
                mean[i * dy + d] = model.train_inputs[(i, d)];
                y[i * dy + d] = model.train_targets[(i, d)];
                for j in 0..n {
                    let a: Vec<f64> = model.train_inputs.row(i).iter().copied().collect();
                    let b: Vec<f64> = model.train_inputs.row(j).iter().copied().collect();
                    cov[(i * dy + d, j * dy + d)] = model.hyper[d].eval_unchecked(&a, &b);
                }
                cov[(i * dy + d, i * dy + d)] += model.noise_var[d];
            }
        }
        (mean, cov, y)
    }

    #[test]
    fn single_point_zero_residual() {
        let x = DMatrix::from_row_slice(1, 1, &[0.7]);
        let h = SeArdHyper::new(1.5, vec![1.0]).unwrap();
        let m = GpMeasurementModel::new(x.clone(), x, vec![h], vec![0.5], MeanSpec::LinearIdentity).unwrap();
        let v: f64 = 2.0;
        assert_relative_eq!(
            m.log_marginal_likelihood(),
            -0.5 * (2.0 * std::f64::consts::PI * v).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn duplicated_input_matches_dense_two_by_two() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let y = DMatrix::from_row_slice(2, 1, &[1.4, 1.4]);
        let h = SeArdHyper::new(0.9, vec![0.5]).unwrap();
        let m = GpMeasurementModel::new(x, y, vec![h], vec![0.2], MeanSpec::LinearIdentity).unwrap();
        // [[1.1, 0.9], [0.9, 1.1]], residual (0.4, 0.4)
        let det: f64 = 1.1 * 1.1 - 0.81;
        let quad = 2.0 * 0.16 * (1.1 - 0.9) / det;
        let expected = -0.5 * (quad + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());
        assert_relative_eq!(m.log_marginal_likelihood(), expected, epsilon = 1e-12);
    }

    #[test]
    fn lml_matches_dense_joint_gaussian() {
        let m = random_model(3, 5, 1.0);
        let (mean, cov, y) = dense_joint(&m);
        let f = cholesky_jittered(&cov, 1.0).unwrap();
        // the dense oracle carries 1e-9 jitter; the model factor carries none
        assert_relative_eq!(m.log_marginal_likelihood(), log_pdf_factored(&y, &mean, &f), epsilon = 1e-6);
        let f0 = crate::linalg::cholesky_noisy(&cov, 1.0).unwrap();
        assert_relative_eq!(m.log_marginal_likelihood(), log_pdf_factored(&y, &mean, &f0), epsilon = 1e-10);
    }

    #[test]
    fn lml_invariant_under_permutation() {
        let m = random_model(4, 7, 1.0);
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let x = DMatrix::from_fn(7, 2, |i, d| m.train_inputs[(perm[i], d)]);
        let y = DMatrix::from_fn(7, 2, |i, d| m.train_targets[(perm[i], d)]);
        let p = GpMeasurementModel::new(x, y, m.hyper.clone(), m.noise_var.clone(), MeanSpec::LinearIdentity).unwrap();
        assert_relative_eq!(m.log_marginal_likelihood(), p.log_marginal_likelihood(), epsilon = 1e-10);
    }

    fn finite_difference_gradient(m: &GpMeasurementModel) -> Vec<f64> {
        let h = 1e-5;
        let mut out = Vec::new();
        for d in 0..m.output_dim() {
            let mut base = m.hyper[d].to_log_params();
            base.push(m.noise_var[d].ln());
            for k in 0..base.len() {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    p[k] += delta;
                    let mut hyper = m.hyper.clone();
                    let mut noise = m.noise_var.clone();
                    hyper[d] = SeArdHyper::from_log_params(&p[..p.len() - 1]);
                    noise[d] = p[p.len() - 1].exp();
                    GpMeasurementModel::new(m.train_inputs.clone(), m.train_targets.clone(), hyper, noise, m.mean)
                        .unwrap()
                        .log_marginal_likelihood()
                };
                out.push((eval(h) - eval(-h)) / (2.0 * h));
            }
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let m = random_model(100 + seed, 6, 1.0);
            let analytic = m.lml_gradient().flatten();
            let numeric = finite_difference_gradient(&m);
            for (a, n) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-3);
                assert!((a - n).abs() / scale < 1e-4, "seed {seed}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn far_translated_copy_doubles_gradient() {
        let m = random_model(11, 6, 1.0);
        let n = m.len();
        let shift = 1e6;
        let x = DMatrix::from_fn(2 * n, 2, |i, d| m.train_inputs[(i % n, d)] + if i >= n { shift } else { 0.0 });
        let y = DMatrix::from_fn(2 * n, 2, |i, d| m.train_targets[(i % n, d)] + if i >= n { shift } else { 0.0 });
        let doubled = GpMeasurementModel::new(x, y, m.hyper.clone(), m.noise_var.clone(), m.mean).unwrap();
        for (a, b) in doubled.lml_gradient().flatten().iter().zip(m.lml_gradient().flatten()) {
            assert_relative_eq!(*a, 2.0 * b, epsilon = 1e-8, max_relative = 1e-8);
        }
        assert_relative_eq!(doubled.log_marginal_likelihood(), 2.0 * m.log_marginal_likelihood(), max_relative = 1e-10);
    }

    #[test]
    fn noiseless_interpolation_at_training_input() {
        let mut m = random_model(5, 4, 1.0);
        m = GpMeasurementModel::new(m.train_inputs.clone(), m.train_targets.clone(), m.hyper.clone(), vec![1e-10, 1e-10], m.mean)
            .unwrap();
        let x: Vec<f64> = m.train_inputs.row(2).iter().copied().collect();
        let (mean, _) = m.posterior_predict(&x).unwrap();
        assert_relative_eq!(mean[0], m.train_targets[(2, 0)], epsilon = 1e-4);
        assert_relative_eq!(mean[1], m.train_targets[(2, 1)], epsilon = 1e-4);
    }

    #[test]
    fn far_test_point_reverts_to_prior() {
        let m = random_model(6, 5, 1.0);
        let x = [500.0, -300.0];
        let (mean, cov) = m.posterior_predict(&x).unwrap();
        assert_relative_eq!(mean[0], 500.0, epsilon = 1e-6);
        assert_relative_eq!(mean[1], -300.0, epsilon = 1e-6);
        for d in 0..2 {
            assert_relative_eq!(cov[(d, d)], m.hyper[d].signal_variance + m.noise_var[d], epsilon = 1e-6);
        }
        assert_eq!(cov[(0, 1)], 0.0);
    }

    #[test]
    fn prediction_matches_joint_conditioning() {
        let m = random_model(7, 3, 1.0);
        let xs = [0.3, -0.8];
        let (mean, cov) = m.posterior_predict(&xs).unwrap();
        for d in 0..2 {
            // dense [y_train; y*] joint for output d, conditioned by Schur complement
            let n = 3;
            let mut pts: Vec<Vec<f64>> = (0..n).map(|i| m.train_inputs.row(i).iter().copied().collect()).collect();
            pts.push(xs.to_vec());
            let joint = DMatrix::from_fn(n + 1, n + 1, |i, j| {
                m.hyper[d].eval_unchecked(&pts[i], &pts[j]) + if i == j { m.noise_var[d] } else { 0.0 }
            });
            let a = joint.view((0, 0), (n, n)).into_owned();
            let b = joint.view((n, 0), (1, n)).into_owned();
            let inv = a.try_inverse().unwrap();
            let r = DVector::from_fn(n, |i, _| m.train_targets[(i, d)] - m.train_inputs[(i, d)]);
            let mu = xs[d] + (&b * &inv * r)[0];
            let var = joint[(n, n)] - (&b * &inv * b.transpose())[0];
            assert_relative_eq!(mean[d], mu, epsilon = 1e-8);
            assert_relative_eq!(cov[(d, d)], var, epsilon = 1e-8);
        }
    }

    #[test]
    fn adding_training_point_never_increases_variance() {
        for seed in 0..20 {
            let m = random_model(200 + seed, 6, 1.0);
            let smaller = GpMeasurementModel::new(
                m.train_inputs.rows(0, 5).into_owned(),
                m.train_targets.rows(0, 5).into_owned(),
                m.hyper.clone(),
                m.noise_var.clone(),
                m.mean,
            )
            .unwrap();
            let xs = [0.1 * seed as f64 - 1.0, 0.5];
            let (_, c_big) = m.posterior_predict(&xs).unwrap();
            let (_, c_small) = smaller.posterior_predict(&xs).unwrap();
            for d in 0..2 {
                assert!(c_big[(d, d)] <= c_small[(d, d)] + 1e-9);
                assert!(c_big[(d, d)] <= m.hyper[d].signal_variance + m.noise_var[d] + 1e-9);
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let m = random_model(8, 4, 1.0);
        let s = serde_json::to_string(&m).unwrap();
        let back: GpMeasurementModel = serde_json::from_str(&s).unwrap();
        assert_relative_eq!(back.log_marginal_likelihood(), m.log_marginal_likelihood(), epsilon = 1e-12);
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert!(v["hyper"][0]["lengthscales"].is_array());
        assert!(v["noise_diag"].is_array());
    }

    #[test]
    fn invalid_models_rejected() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let h = SeArdHyper::new(1.0, vec![1.0]).unwrap();
        assert!(GpMeasurementModel::new(x.clone(), x.clone(), vec![h.clone()], vec![0.0], MeanSpec::LinearIdentity).is_err());
        assert!(GpMeasurementModel::new(DMatrix::zeros(0, 1), DMatrix::zeros(0, 1), vec![h.clone()], vec![1.0], MeanSpec::LinearIdentity).is_err());
        assert!(optimize_measurement_gp(&x, &x, None).is_err());
    }
}
