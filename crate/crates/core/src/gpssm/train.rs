use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::measurement::MeasurementLikelihood;
use super::model::{GpssmModel, Sequence};
use super::objective::{
    apply_natural_update, elbo_hyper_gradient, elbo_terms, model_log_params, set_model_log_params, CloudData,
};
use super::smoother::{particle_smoother, ParticleCloud, SmootherConfig};
use crate::error::{NavError, Result};
use crate::kernel::{MeanSpec, SeArdHyper};
use crate::linalg::Gaussian;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub rounds: usize,
    pub smoother: SmootherConfig,
    pub batch_size: usize,
    /// Natural-parameter damping.
    pub rho: f64,
    pub learning_rate: f64,
    /// Adam steps per round.
    pub grad_steps: usize,
    pub learn_inducing: bool,
    pub num_inducing: usize,
    /// Trajectories picked by greedy inducing selection; `None` uses all.
    pub selection_count: Option<usize>,
    pub max_retries: usize,
    pub initial_signal_variance: f64,
    /// Defaults to the spread of the measurements and controls.
    pub initial_lengthscales: Option<Vec<f64>>,
    pub initial_process_noise: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            smoother: SmootherConfig::default(),
            batch_size: 1,
            rho: 0.5,
            learning_rate: 1e-2,
            grad_steps: 5,
            learn_inducing: false,
            num_inducing: 50,
            selection_count: None,
            max_retries: 5,
            initial_signal_variance: 1.0,
            initial_lengthscales: None,
            initial_process_noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Surrogate objective after each round's natural-parameter update.
    pub surrogate: Vec<f64>,
    pub retries: usize,
    pub final_learning_rate: f64,
}

/// Trained model with the settings that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpssmArtifact {
    pub model: GpssmModel,
    pub config: TrainConfig,
    pub seed: u64,
    pub report: TrainReport,
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn initial_hyper(sequences: &[Sequence], config: &TrainConfig, dx: usize, du: usize) -> Result<Vec<SeArdHyper>> {
    let ls = match &config.initial_lengthscales {
        Some(l) => l.clone(),
        None => {
            let mut l = Vec::with_capacity(dx + du);
            for d in 0..dx {
                let s = std_dev(sequences.iter().flat_map(|s| s.measurements.iter().map(move |y| y[d])));
                l.push(if s > 0.0 { s } else { 1.0 });
            }
            for d in 0..du {
                let s = std_dev(sequences.iter().flat_map(|s| s.controls.iter().map(move |u| u[d])));
                l.push(if s > 0.0 { s } else { 1.0 });
            }
            l
        }
    };
    (0..dx)
        .map(|_| SeArdHyper::new(config.initial_signal_variance, ls.clone()))
        .collect()
}

fn check_sequences(sequences: &[Sequence]) -> Result<(usize, usize)> {
    let first = sequences.first().ok_or(NavError::NoData)?;
    let dx = first.initial.dim();
    let du = first.controls.first().map_or(dx, |u| u.len());
    for s in sequences {
        if s.is_empty() {
            return Err(NavError::InvalidArguments("training sequences need at least one step".into()));
        }
        if s.initial.dim() != dx || s.controls.iter().any(|u| u.len() != du) || s.measurements.iter().any(|y| y.len() != dx) {
            return Err(NavError::InputShape("training sequences disagree in dimension".into()));
        }
    }
    Ok((dx, du))
}

/// Farthest-point subsampling of `points` (rows) to `m` rows after dividing
/// each column by `scale`. Starts from row 0; ties go to the lowest index.
/// Selected rows are returned in their original order.
pub fn farthest_point_subset(points: &DMatrix<f64>, m: usize, scale: &[f64]) -> DMatrix<f64> {
    let n = points.nrows();
    let m = m.min(n);
    if m == n {
        return points.clone();
    }
    let dist = |a: usize, b: usize| -> f64 {
        (0..points.ncols())
            .map(|j| ((points[(a, j)] - points[(b, j)]) / scale[j]).powi(2))
            .sum()
    };
    let mut chosen = vec![0usize];
    let mut min_d: Vec<f64> = (0..n).map(|i| dist(0, i)).collect();
    while chosen.len() < m {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, d) in min_d.iter().enumerate() {
            if *d > best_d {
                best = i;
                best_d = *d;
            }
        }
        chosen.push(best);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(dist(best, i));
        }
    }
    chosen.sort_unstable();
    DMatrix::from_fn(m, points.ncols(), |i, j| points[(chosen[i], j)])
}

/// Augmented inputs `(x̄_{t−1}, u_t)` from the cloud's mean states.
fn augmented_means(seq: &Sequence, cloud: &ParticleCloud) -> DMatrix<f64> {
    let means = cloud.moments();
    let dx = cloud.dim;
    let du = seq.controls.first().map_or(0, |u| u.len());
    DMatrix::from_fn(seq.len(), dx + du, |t, j| {
        if j < dx {
            means[t].0[j]
        } else {
            seq.controls[t][j - dx]
        }
    })
}

fn stack_rows(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((at, 0), (p.nrows(), cols)).copy_from(*p);
        at += p.nrows();
    }
    out
}

#[derive(Clone, Debug)]
pub struct InducingSelection {
    pub inputs: DMatrix<f64>,
    /// Trajectory indices in the order the greedy search picked them.
    pub selected: Vec<usize>,
}

/// Greedy trajectory selection by the surrogate objective, then
/// farthest-point subsampling of the selected augmented states to `m` rows.
///
/// Every sequence is first smoothed under the prior transition model, whose
/// dynamics do not depend on the inducing inputs. Each smoothing run starts
/// from the same `seed`, so identical sequences yield identical clouds.
#[allow(clippy::too_many_arguments)]
pub fn select_inducing(
    sequences: &[Sequence],
    meas: &dyn MeasurementLikelihood,
    hyper: &[SeArdHyper],
    process_noise: &[f64],
    mean: MeanSpec,
    candidate_count: usize,
    m: usize,
    smoother: &SmootherConfig,
    seed: u64,
) -> Result<InducingSelection> {
    let (dx, _) = check_sequences(sequences)?;
    if candidate_count == 0 || candidate_count > sequences.len() {
        return Err(NavError::InvalidArguments(format!(
            "candidate count {candidate_count} must lie in 1..={}",
            sequences.len()
        )));
    }
    if m == 0 {
        return Err(NavError::InvalidArguments("at least one inducing input is required".into()));
    }
    let build = |z: DMatrix<f64>, initial: Gaussian| {
        GpssmModel::with_prior_posterior(hyper.to_vec(), process_noise.to_vec(), mean, z, initial)
    };

    let mut clouds = Vec::with_capacity(sequences.len());
    let mut points = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let first = DMatrix::from_fn(1, dx + seq.controls[0].len(), |_, j| {
            if j < dx {
                seq.initial.mean[j]
            } else {
                seq.controls[0][j - dx]
            }
        });
        let prior_model = build(first, seq.initial.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = particle_smoother(&prior_model, seq, meas, smoother, &mut rng)?;
        points.push(augmented_means(seq, &cloud));
        clouds.push(cloud);
    }
    let data: Vec<CloudData> = sequences.iter().zip(&clouds).collect();

    let available: usize = points.iter().map(|p| p.nrows()).sum();
    let scale: Vec<f64> = (0..hyper[0].dim())
        .map(|j| hyper.iter().map(|h| h.lengthscales[j]).sum::<f64>() / hyper.len() as f64)
        .collect();

    let mut selected: Vec<usize> = Vec::new();
    let mut best_z = None;
    for _ in 0..candidate_count {
        let mut best: Option<(f64, usize, DMatrix<f64>)> = None;
        for i in (0..sequences.len()).filter(|i| !selected.contains(i)) {
            let mut idx = selected.clone();
            idx.push(i);
            let parts: Vec<&DMatrix<f64>> = idx.iter().map(|k| &points[*k]).collect();
            let stacked = stack_rows(&parts);
            let z = farthest_point_subset(&stacked, m, &scale);
            let mut model = build(z.clone(), sequences[0].initial.clone())?;
            apply_natural_update(&mut model, &data, 1.0, 1.0)?;
            let score = elbo_terms(&model, &data, meas, 1.0)?.total();
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, i, z));
            }
        }
        let (_, i, z) = best.expect("at least one unselected trajectory remains");
        selected.push(i);
        best_z = Some(z);
    }
    let selected_rows: usize = selected.iter().map(|i| points[*i].nrows()).sum();
    if m > selected_rows {
        log::warn!("requested {m} inducing inputs but only {selected_rows} states are available (of {available}); using all");
    }
    Ok(InducingSelection {
        inputs: best_z.expect("candidate count is at least one"),
        selected,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Ascent step.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1 = 1.0 - Self::BETA1.powi(self.t);
        let b2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] += lr * (self.m[i] / b1) / ((self.v[i] / b2).sqrt() + Self::EPS);
        }
    }
}

/// Alternates smoothing, damped natural-parameter updates and Adam steps on
/// the log-hyperparameters (and optionally the inducing inputs).
pub fn train(sequences: &[Sequence], meas: &dyn MeasurementLikelihood, config: &TrainConfig) -> Result<GpssmArtifact> {
    let (dx, du) = check_sequences(sequences)?;
    if config.batch_size == 0 || config.rounds == 0 {
        return Err(NavError::InvalidArguments("rounds and batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hyper = initial_hyper(sequences, config, dx, du)?;
    let noise = vec![config.initial_process_noise; dx];
    let mean = if dx == du { MeanSpec::PdrAdditive } else { MeanSpec::Zero };
    let k = config.selection_count.unwrap_or(sequences.len()).clamp(1, sequences.len());
    let selection = select_inducing(sequences, meas, &hyper, &noise, mean, k, config.num_inducing, &config.smoother, rng.gen())?;
    let mut model = GpssmModel::with_prior_posterior(hyper, noise, mean, selection.inputs, sequences[0].initial.clone())?;

    let n_seq = sequences.len();
    let batch = config.batch_size.min(n_seq);
    let scale = n_seq as f64 / batch as f64;
    let mut adam = Adam::new(model_log_params(&model, config.learn_inducing).len());
    let mut lr = config.learning_rate;
    let mut report = TrainReport::default();
    let mut snapshot = model.clone();

    let mut round = 0;
    while round < config.rounds {
        let picked: Vec<usize> = if batch == n_seq {
            (0..n_seq).collect()
        } else {
            let mut v = sample(&mut rng, n_seq, batch).into_vec();
            v.sort_unstable();
            v
        };
        let clouds: Result<Vec<ParticleCloud>> = picked
            .iter()
            .map(|i| particle_smoother(&model, &sequences[*i], meas, &config.smoother, &mut rng))
            .collect();
        let clouds = match clouds {
            Ok(c) => c,
            Err(NavError::DegenerateLikelihood { step }) if report.retries < config.max_retries => {
                report.retries += 1;
                lr *= 0.5;
                log::warn!("round {round}: particle weights vanished at step {step}; retrying with learning rate {lr}");
                model = snapshot.clone();
                continue;
            }
            Err(e) => return Err(e),
        };
        let data: Vec<CloudData> = picked.iter().map(|i| &sequences[*i]).zip(&clouds).collect();

        apply_natural_update(&mut model, &data, config.rho, scale)?;
        report.surrogate.push(elbo_terms(&model, &data, meas, scale)?.total());

        snapshot = model.clone();
        for _ in 0..config.grad_steps {
            let g = elbo_hyper_gradient(&model, &data, scale)?.flatten(config.learn_inducing);
            let mut p = model_log_params(&model, config.learn_inducing);
            adam.step(&mut p, &g, lr);
            let mut next = model.clone();
            if set_model_log_params(&mut next, &p, config.learn_inducing).is_err() || next.validate().is_err() {
                break;
            }
            // Reject steps that make K_ZZ unfactorizable.
            if super::model::TransitionCache::new(&next).is_err() {
                break;
            }
            model = next;
        }
        log::debug!(
            "round {round}: surrogate {:.3}, Q {:?}",
            report.surrogate.last().copied().unwrap_or(f64::NAN),
            model.process_noise
        );
        round += 1;
    }
    model.initial_state = sequences[0].initial.clone();
    report.final_learning_rate = lr;
    Ok(GpssmArtifact {
        model,
        config: config.clone(),
        seed: config.seed,
        report,
    })
}

/// Smoothed mean and covariance at `t = 0..T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Navigation {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
}

impl Navigation {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.means.iter().map(|m| [m[0], m.get(1).copied().unwrap_or(0.0)]).collect()
    }
}

pub fn navigate(
    model: &GpssmModel,
    seq: &Sequence,
    meas: &dyn MeasurementLikelihood,
    smoother: &SmootherConfig,
    seed: u64,
) -> Result<Navigation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = particle_smoother(model, seq, meas, smoother, &mut rng)?;
    let (means, covariances) = cloud.moments().into_iter().unzip();
    Ok(Navigation { means, covariances })
}
