use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::kernel::{kernel_matrix, kernel_vector_unchecked, mean_component, MeanSpec, SeArdHyper};
use crate::linalg::{cholesky_jittered, cholesky_noisy, serde_matrix, symmetrize, Gaussian};

/// One time series: prior on `x_0`, measurements `y_1..y_T`, controls `u_1..u_T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub initial: Gaussian,
    pub measurements: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// Isotropic variance of `p(x_0)` around the first WiFi fix (m²).
pub const DEFAULT_INITIAL_VARIANCE: f64 = 4.0;

impl Sequence {
    pub fn new(initial: Gaussian, measurements: Vec<Vec<f64>>, controls: Vec<Vec<f64>>) -> Result<Self> {
        if measurements.len() != controls.len() {
            return Err(NavError::InputShape(format!(
                "{} measurements but {} controls",
                measurements.len(),
                controls.len()
            )));
        }
        Ok(Self {
            initial,
            measurements,
            controls,
        })
    }

    /// Builds a sequence from WiFi fixes at `t = 0..T` and controls at
    /// `t = 1..T`; `p(x_0)` is centered on the first fix.
    pub fn from_fixes(fixes: &[[f64; 2]], controls: &[[f64; 2]], initial_variance: f64) -> Result<Self> {
        let first = fixes.first().ok_or(NavError::NoData)?;
        if fixes.len() != controls.len() + 1 {
            return Err(NavError::InputShape(format!(
                "{} fixes for {} controls; expected one more fix than controls",
                fixes.len(),
                controls.len()
            )));
        }
        Self::new(
            Gaussian::isotropic(DVector::from_column_slice(first), initial_variance),
            fixes[1..].iter().map(|f| f.to_vec()).collect(),
            controls.iter().map(|u| u.to_vec()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }
}

/// Sparse variational GPSSM with per-output independent transition GPs.
///
/// The inducing posterior is stored densely over `M·D_x` values, output-major:
/// entries `d·M .. (d+1)·M` belong to output `d`. Cross-output blocks are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpssmModel {
    pub transition_hyper: Vec<SeArdHyper>,
    /// Diagonal of `Q`.
    pub process_noise: Vec<f64>,
    pub transition_mean: MeanSpec,
    /// `M × (D_x + D_u)`.
    #[serde(with = "serde_matrix")]
    pub inducing_inputs: DMatrix<f64>,
    pub inducing_posterior: Gaussian,
    pub initial_state: Gaussian,
}

impl GpssmModel {
    /// Model whose inducing posterior equals the prior `p(v)`.
    pub fn with_prior_posterior(
        transition_hyper: Vec<SeArdHyper>,
        process_noise: Vec<f64>,
        transition_mean: MeanSpec,
        inducing_inputs: DMatrix<f64>,
        initial_state: Gaussian,
    ) -> Result<Self> {
        let m = inducing_inputs.nrows();
        let dx = transition_hyper.len();
        let mut model = Self {
            transition_hyper,
            process_noise,
            transition_mean,
            inducing_inputs,
            inducing_posterior: Gaussian::isotropic(DVector::zeros(m * dx), 1.0),
            initial_state,
        };
        model.check_shapes()?;
        model.reset_to_prior()?;
        model.validate()?;
        Ok(model)
    }

    pub fn state_dim(&self) -> usize {
        self.transition_hyper.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing_inputs.ncols()
    }

    pub fn control_dim(&self) -> usize {
        self.input_dim() - self.state_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.nrows()
    }

    fn check_shapes(&self) -> Result<()> {
        let dx = self.state_dim();
        if dx == 0 {
            return Err(NavError::InvalidArguments("model needs at least one output".into()));
        }
        if self.num_inducing() == 0 {
            return Err(NavError::InvalidArguments("at least one inducing input is required".into()));
        }
        if self.input_dim() <= dx {
            return Err(NavError::InputShape(format!(
                "inducing inputs have {} columns; expected state ({dx}) plus controls",
                self.input_dim()
            )));
        }
        if self.transition_mean == MeanSpec::PdrAdditive && self.control_dim() != dx {
            return Err(NavError::InputShape("pdr-additive mean needs controls of the state dimension".into()));
        }
        if self.process_noise.len() != dx {
            return Err(NavError::InputShape(format!("{} process-noise entries for {dx} outputs", self.process_noise.len())));
        }
        if self.initial_state.dim() != dx {
            return Err(NavError::InputShape(format!("initial state has dimension {}", self.initial_state.dim())));
        }
        for h in &self.transition_hyper {
            h.validate()?;
            if h.dim() != self.input_dim() {
                return Err(NavError::InputShape(format!(
                    "kernel has {} lengthscales, augmented input has {} dimensions",
                    h.dim(),
                    self.input_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shapes()?;
        if self.process_noise.iter().any(|q| !(*q > 0.0 && q.is_finite())) {
            return Err(NavError::InvalidArguments("process noise must be positive".into()));
        }
        let total = self.num_inducing() * self.state_dim();
        if self.inducing_posterior.dim() != total || self.inducing_posterior.cov.nrows() != total {
            return Err(NavError::InputShape(format!(
                "inducing posterior has dimension {}, expected {total}",
                self.inducing_posterior.dim()
            )));
        }
        if self.inducing_posterior.mean.iter().chain(self.inducing_posterior.cov.iter()).any(|v| !v.is_finite()) {
            return Err(NavError::InvalidArguments("inducing posterior is not finite".into()));
        }
        Ok(())
    }

    /// Mean and covariance of output `d`'s inducing values.
    pub fn posterior_block(&self, d: usize) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.num_inducing();
        let mean = self.inducing_posterior.mean.rows(d * m, m).into_owned();
        let cov = self.inducing_posterior.cov.view((d * m, d * m), (m, m)).into_owned();
        (mean, cov)
    }

    pub fn set_posterior_blocks(&mut self, blocks: &[(DVector<f64>, DMatrix<f64>)]) {
        let m = self.num_inducing();
        let total = m * blocks.len();
        let mut mean = DVector::zeros(total);
        let mut cov = DMatrix::zeros(total, total);
        for (d, (mu, sigma)) in blocks.iter().enumerate() {
            mean.rows_mut(d * m, m).copy_from(mu);
            cov.view_mut((d * m, d * m), (m, m)).copy_from(sigma);
        }
        self.inducing_posterior = Gaussian { mean, cov };
    }

    /// `m_f(z_m)` for output `d`, one entry per inducing input.
    pub fn inducing_prior_mean(&self, d: usize) -> DVector<f64> {
        let dx = self.state_dim();
        DVector::from_iterator(
            self.num_inducing(),
            self.inducing_inputs.row_iter().map(|r| {
                let row: Vec<f64> = r.iter().copied().collect();
                mean_component(self.transition_mean, &row[..dx], &row[dx..], d)
            }),
        )
    }

    /// Prior covariance of output `d`'s inducing values, jitter included.
    pub fn inducing_prior_cov(&self, d: usize) -> Result<DMatrix<f64>> {
        let h = &self.transition_hyper[d];
        let k = kernel_matrix(&self.inducing_inputs, &self.inducing_inputs, h)?;
        let f = cholesky_jittered(&k, h.signal_variance)?;
        let mut kj = k;
        for i in 0..kj.nrows() {
            kj[(i, i)] += f.jitter;
        }
        Ok(kj)
    }

    pub fn reset_to_prior(&mut self) -> Result<()> {
        let blocks = (0..self.state_dim())
            .map(|d| Ok((self.inducing_prior_mean(d), self.inducing_prior_cov(d)?)))
            .collect::<Result<Vec<_>>>()?;
        self.set_posterior_blocks(&blocks);
        Ok(())
    }

    /// Prior `p(v)` over all outputs as one block-diagonal Gaussian.
    pub fn inducing_prior(&self) -> Result<Gaussian> {
        let mut tmp = self.clone();
        tmp.reset_to_prior()?;
        Ok(tmp.inducing_posterior)
    }
}

/// Information form of the inducing posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalParams {
    pub eta1: DVector<f64>,
    pub eta2: DMatrix<f64>,
}

impl NaturalParams {
    pub fn from_moments(g: &Gaussian) -> Result<Self> {
        let f = cholesky_noisy(&g.cov, g.cov.diagonal().max().max(1e-12))?;
        let prec = f.inverse();
        Ok(Self {
            eta1: &prec * &g.mean,
            eta2: prec * -0.5,
        })
    }

    pub fn to_moments(&self) -> Result<Gaussian> {
        let prec = &self.eta2 * -2.0;
        let f = cholesky_noisy(&prec, prec.diagonal().max().max(1e-12))?;
        let cov = f.inverse();
        let mean = f.solve(&self.eta1);
        Gaussian::new(mean, cov)
    }
}

/// `KL(q ‖ p)` between multivariate Gaussians.
pub fn gaussian_kl(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() || q.cov.nrows() != p.cov.nrows() {
        return Err(NavError::InputShape(format!("KL between dimensions {} and {}", q.dim(), p.dim())));
    }
    let k = q.dim() as f64;
    let pf = cholesky_noisy(&p.cov, p.cov.diagonal().max().max(1e-300))
        .map_err(|_| NavError::Conditioning { jitter: 0.0 })?;
    let qf = cholesky_noisy(&q.cov, q.cov.diagonal().max().max(1e-300))?;
    let trace = pf.solve_mat(&q.cov).trace();
    let diff = &p.mean - &q.mean;
    let maha = pf.whiten(&diff).norm_squared();
    Ok((0.5 * (trace + maha - k + pf.log_det() - qf.log_det())).max(0.0))
}

/// Per-output quantities shared by the smoother, the variational update and
/// the objective, all in whitened coordinates of `K_ZZ = L Lᵀ`.
#[derive(Clone, Debug)]
pub(crate) struct OutputCache {
    pub hyper: SeArdHyper,
    pub q: f64,
    /// Lower Cholesky factor of `K_ZZ + jitter·I`.
    pub l: DMatrix<f64>,
    pub m_z: DVector<f64>,
    /// `L⁻¹(μ − m_Z)`.
    pub mu_white: DVector<f64>,
    /// `L⁻¹ Σ L⁻ᵀ`.
    pub sigma_white: DMatrix<f64>,
}

impl OutputCache {
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.l.solve_lower_triangular(v).expect("cholesky diagonal is positive")
    }

    /// `L⁻ᵀ v`.
    pub fn unwhiten_t(&self, v: &DVector<f64>) -> DVector<f64> {
        self.l.tr_solve_lower_triangular(v).expect("cholesky diagonal is positive")
    }

    /// `K⁻¹ + jitter` inverse, symmetric.
    pub fn k_inv(&self) -> DMatrix<f64> {
        let m = self.l.nrows();
        let linv = self
            .l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .expect("cholesky diagonal is positive");
        let mut inv = linv.transpose() * linv;
        symmetrize(&mut inv);
        inv
    }

    pub fn k_full(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }
}

/// Transition moments at one augmented input for one output.
#[derive(Clone, Debug)]
pub(crate) struct OutputPrediction {
    pub mean: f64,
    /// `B = k(x̂,x̂) − kᵀK⁻¹k`, clamped at zero.
    pub b: f64,
    /// `aᵀΣa`.
    pub asa: f64,
    pub k: DVector<f64>,
    /// `L⁻¹k`.
    pub k_white: DVector<f64>,
}

#[derive(Clone, Debug)]
pub(crate) struct TransitionCache {
    pub outputs: Vec<OutputCache>,
    pub z: DMatrix<f64>,
    pub mean: MeanSpec,
    pub state_dim: usize,
}

impl TransitionCache {
    pub fn new(model: &GpssmModel) -> Result<Self> {
        model.validate()?;
        let outputs = (0..model.state_dim())
            .map(|d| {
                let hyper = model.transition_hyper[d].clone();
                let k = kernel_matrix(&model.inducing_inputs, &model.inducing_inputs, &hyper)?;
                let factor = cholesky_jittered(&k, hyper.signal_variance)?;
                let l = factor.chol.l();
                let m_z = model.inducing_prior_mean(d);
                let (mu, sigma) = model.posterior_block(d);
                let mu_white = l.solve_lower_triangular(&(mu - &m_z)).expect("positive diagonal");
                let half = l.solve_lower_triangular(&sigma).expect("positive diagonal");
                let mut sigma_white = l
                    .solve_lower_triangular(&half.transpose())
                    .expect("positive diagonal");
                symmetrize(&mut sigma_white);
                Ok(OutputCache {
                    hyper,
                    q: model.process_noise[d],
                    l,
                    m_z,
                    mu_white,
                    sigma_white,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            outputs,
            z: model.inducing_inputs.clone(),
            mean: model.transition_mean,
            state_dim: model.state_dim(),
        })
    }

    pub fn predict(&self, xhat: &[f64], d: usize) -> OutputPrediction {
        let o = &self.outputs[d];
        let k = kernel_vector_unchecked(xhat, &self.z, &o.hyper);
        let k_white = o.whiten(&k);
        let n = self.state_dim;
        let mean = mean_component(self.mean, &xhat[..n], &xhat[n..], d) + k_white.dot(&o.mu_white);
        let b = (o.hyper.signal_variance - k_white.norm_squared()).max(0.0);
        let asa = (&o.sigma_white * &k_white).dot(&k_white);
        OutputPrediction {
            mean,
            b,
            asa,
            k,
            k_white,
        }
    }

    /// Auxiliary transition mean per output and the log of the correction
    /// factor `exp(−½ Σ_d (B_d + a_dᵀΣ_d a_d)/Q_d)`.
    pub fn transition(&self, xhat: &[f64], mean_out: &mut [f64]) -> f64 {
        let mut log_c = 0.0;
        for (d, m) in mean_out.iter_mut().enumerate() {
            let p = self.predict(xhat, d);
            *m = p.mean;
            log_c -= 0.5 * (p.b + p.asa) / self.outputs[d].q;
        }
        log_c
    }
}

/// `A = k(x̂, Z) K_ZZ⁻¹` per output as a `D_x × M·D_x` block matrix, and the
/// conditional variances `B` as a vector (the diagonal of the `B` matrix).
pub fn predictive_factors(xhat: &[f64], model: &GpssmModel) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if xhat.len() != model.input_dim() {
        return Err(NavError::InputShape(format!(
            "augmented input has {} entries, expected {}",
            xhat.len(),
            model.input_dim()
        )));
    }
    let cache = TransitionCache::new(model)?;
    let dx = model.state_dim();
    let m = model.num_inducing();
    let mut a = DMatrix::zeros(dx, m * dx);
    let mut b = DVector::zeros(dx);
    for d in 0..dx {
        let p = cache.predict(xhat, d);
        let row = cache.outputs[d].unwhiten_t(&p.k_white);
        a.view_mut((d, d * m), (1, m)).copy_from(&row.transpose());
        b[d] = p.b;
    }
    Ok((a, b))
}
