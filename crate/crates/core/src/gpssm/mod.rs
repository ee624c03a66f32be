//! Sparse variational GP state-space model.
//!
//! ```text
//! x_0 ~ p(x_0)
//! f ~ GP(m_f, k_f) over x̂_{t-1} = (x_{t-1}, u_t),   v = f(Z)
//! x_t | f_t ~ N(f_t, Q)
//! y_t | x_t ~ p(y_t | x_t)        (trained measurement GP)
//! ```
//!
//! `q(v)` is Gaussian and updated in closed form given samples of the
//! smoothing distribution of an auxiliary state-space model whose transition
//! is `N(x_t | m_f(x̂) + A(μ − m_Z), Q)` with a per-step correction factor
//! `exp(−½ tr Q⁻¹(B + AΣAᵀ))`. Hyperparameters follow gradient steps on the
//! same sampled objective.

mod measurement;
mod model;
mod objective;
mod smoother;
mod train;

pub use measurement::{
    GridMeasurementDensity, LinearGaussianMeasurement, MeasurementLikelihood, DEFAULT_GRID_MARGIN, DEFAULT_GRID_STEP,
};
pub use model::{gaussian_kl, predictive_factors, GpssmModel, NaturalParams, Sequence, DEFAULT_INITIAL_VARIANCE};
pub use objective::{
    apply_natural_update, elbo_hyper_gradient, elbo_terms, model_log_params, set_model_log_params,
    update_natural_params, CloudData, ElboTerms, HyperGradient,
};
pub use smoother::{particle_smoother, ParticleCloud, SmootherConfig};
pub use train::{
    farthest_point_subset, navigate, select_inducing, train, GpssmArtifact, InducingSelection, Navigation,
    TrainConfig, TrainReport,
};
