//! Brute-force oracles and tiny random instances shared by the integration
//! tests. Everything here uses explicit LU inverses and determinants so it
//! shares no numerical path with the Cholesky-based library code.

#![allow(dead_code)]

use gpssm_nav::gpssm::{particle_smoother, GpssmModel, LinearGaussianMeasurement, ParticleCloud, Sequence, SmootherConfig};
use gpssm_nav::kernel::{MeanSpec, SeArdHyper};
use gpssm_nav::lgssm::{kalman_filter, rts_smoother, LgssmParams};
use gpssm_nav::linalg::Gaussian;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gauss(rng))
}

/// Well-conditioned symmetric positive definite matrix.
pub fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = random_matrix(n, n, rng);
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5
}

pub fn random_gaussian<R: Rng>(n: usize, rng: &mut R) -> Gaussian {
    Gaussian {
        mean: DVector::from_fn(n, |_, _| gauss(rng)),
        cov: random_spd(n, rng),
    }
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible oracle matrix")
}

pub fn dense_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let r = x - mean;
    let det = cov.clone().lu().determinant();
    let quad = (r.transpose() * inverse(cov) * &r)[(0, 0)];
    -0.5 * (quad + det.ln() + x.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

pub fn dense_kl(q: &Gaussian, p: &Gaussian) -> f64 {
    let p_inv = inverse(&p.cov);
    let d = &p.mean - &q.mean;
    let k = q.mean.len() as f64;
    let det_p = p.cov.clone().lu().determinant();
    let det_q = q.cov.clone().lu().determinant();
    0.5 * ((&p_inv * &q.cov).trace() + (d.transpose() * &p_inv * &d)[(0, 0)] - k + (det_p / det_q).ln())
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Mean and covariance of the `keep` coordinates of `N(mean, cov)` given the
/// `observed` coordinates equal `values`.
pub fn condition(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    keep: &[usize],
    observed: &[usize],
    values: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let m_k = DVector::from_fn(keep.len(), |i, _| mean[keep[i]]);
    if observed.is_empty() {
        return (m_k, select(cov, keep, keep));
    }
    let m_o = DVector::from_fn(observed.len(), |i, _| mean[observed[i]]);
    let c_kk = select(cov, keep, keep);
    let c_ko = select(cov, keep, observed);
    let gain = &c_ko * inverse(&select(cov, observed, observed));
    (m_k + &gain * (values - m_o), c_kk - &gain * c_ko.transpose())
}

/// Joint Gaussian over `(x_0, …, x_T, y_1, …, y_T)` of a linear-Gaussian
/// state-space model, built as an affine map of independent noises.
pub struct LgssmJoint {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
    pub p: usize,
    pub steps: usize,
}

impl LgssmJoint {
    pub fn new(params: &LgssmParams, us: &[DVector<f64>]) -> Self {
        let n = params.transition_matrix.nrows();
        let p = params.measurement_matrix.nrows();
        let steps = us.len();
        let dz = n * (steps + 1) + p * steps;
        let mut z_cov = DMatrix::zeros(dz, dz);
        z_cov.view_mut((0, 0), (n, n)).copy_from(&params.initial.cov);
        for t in 1..=steps {
            z_cov.view_mut((n * t, n * t), (n, n)).copy_from(&params.transition_noise);
            let r = n * (steps + 1) + p * (t - 1);
            z_cov.view_mut((r, r), (p, p)).copy_from(&params.measurement_noise);
        }
        let total = dz;
        let mut map = DMatrix::zeros(total, dz);
        let mut offset = DVector::zeros(total);
        let mut lx = DMatrix::zeros(n, dz);
        lx.view_mut((0, 0), (n, n)).copy_from(&DMatrix::identity(n, n));
        let mut cx = params.initial.mean.clone();
        map.view_mut((0, 0), (n, dz)).copy_from(&lx);
        offset.rows_mut(0, n).copy_from(&cx);
        for t in 1..=steps {
            lx = &params.transition_matrix * &lx;
            for i in 0..n {
                lx[(i, n * t + i)] += 1.0;
            }
            cx = &params.transition_matrix * &cx + &params.control_matrix * &us[t - 1];
            map.view_mut((n * t, 0), (n, dz)).copy_from(&lx);
            offset.rows_mut(n * t, n).copy_from(&cx);
            let row = n * (steps + 1) + p * (t - 1);
            let mut ly = &params.measurement_matrix * &lx;
            for i in 0..p {
                ly[(i, row + i)] += 1.0;
            }
            map.view_mut((row, 0), (p, dz)).copy_from(&ly);
            offset.rows_mut(row, p).copy_from(&(&params.measurement_matrix * &cx));
        }
        let cov = &map * z_cov * map.transpose();
        Self {
            mean: offset,
            cov,
            n,
            p,
            steps,
        }
    }

    pub fn x_idx(&self, t: usize) -> Vec<usize> {
        (self.n * t..self.n * (t + 1)).collect()
    }

    /// Indices of `y_1..y_t`.
    pub fn y_upto(&self, t: usize) -> Vec<usize> {
        let start = self.n * (self.steps + 1);
        (start..start + self.p * t).collect()
    }

    pub fn stacked(ys: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(ys.iter().map(|y| y.len()).sum(), ys.iter().flat_map(|y| y.iter().copied()))
    }
}

/// Random stable model with 2-D state and 1-D observations.
pub fn random_lgssm<R: Rng>(rng: &mut R) -> LgssmParams {
    let f = DMatrix::identity(2, 2) * 0.8 + random_matrix(2, 2, rng) * 0.1;
    LgssmParams {
        transition_matrix: f,
        control_matrix: random_matrix(2, 2, rng),
        transition_noise: random_spd(2, rng) * 0.5,
        measurement_matrix: random_matrix(1, 2, rng),
        measurement_noise: DMatrix::from_element(1, 1, 0.3 + rng.gen::<f64>()),
        initial: random_gaussian(2, rng),
    }
}

/// Draws `y_{1:T}` from the model.
pub fn simulate_lgssm<R: Rng>(params: &LgssmParams, us: &[DVector<f64>], rng: &mut R) -> Vec<DVector<f64>> {
    let sample = |cov: &DMatrix<f64>, rng: &mut R| {
        let l = cov.clone().cholesky().expect("positive definite").l();
        &l * DVector::from_fn(cov.nrows(), |_, _| gauss(rng))
    };
    let mut x = &params.initial.mean + sample(&params.initial.cov, rng);
    us.iter()
        .map(|u| {
            x = &params.transition_matrix * &x + &params.control_matrix * u + sample(&params.transition_noise, rng);
            &params.measurement_matrix * &x + sample(&params.measurement_noise, rng)
        })
        .collect()
}

/// Tiny GPSSM with 2-D state, 2-D control and `m` inducing inputs, with a
/// perturbed inducing posterior so the KL term is active.
pub fn tiny_gpssm<R: Rng>(m: usize, rng: &mut R) -> GpssmModel {
    let z = DMatrix::from_fn(m, 4, |_, _| rng.gen_range(-1.5..1.5));
    let hyper = (0..2)
        .map(|_| {
            let ls = (0..4).map(|_| rng.gen_range(0.8..2.0)).collect();
            SeArdHyper::new(rng.gen_range(0.5..1.5), ls).unwrap()
        })
        .collect();
    let noise = vec![rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
    let mut model =
        GpssmModel::with_prior_posterior(hyper, noise, MeanSpec::PdrAdditive, z, Gaussian::isotropic(DVector::zeros(2), 1.0))
            .unwrap();
    let blocks: Vec<_> = (0..2)
        .map(|d| {
            let (mu, sigma) = model.posterior_block(d);
            let shift = DVector::from_fn(m, |_, _| 0.3 * gauss(rng));
            let a = random_matrix(m, m, rng) * 0.2;
            (mu + shift, sigma * 0.6 + &a * a.transpose())
        })
        .collect();
    model.set_posterior_blocks(&blocks);
    model
}

/// Sequence of `steps` random controls and measurements with a matching
/// cloud of `particles` random trajectories.
pub fn tiny_data<R: Rng>(steps: usize, particles: usize, rng: &mut R) -> (Sequence, ParticleCloud) {
    let controls = (0..steps).map(|_| vec![gauss(rng) * 0.5, gauss(rng) * 0.5]).collect();
    let measurements = (0..steps).map(|_| vec![gauss(rng), gauss(rng)]).collect();
    let seq = Sequence::new(Gaussian::isotropic(DVector::zeros(2), 1.0), measurements, controls).unwrap();
    let trajectories = (0..particles).map(|_| (0..2 * (steps + 1)).map(|_| gauss(rng)).collect()).collect();
    let log_w = (0..particles).map(|_| rng.gen_range(-1.0..0.0)).collect();
    (seq, ParticleCloud::new(2, trajectories, log_w).unwrap())
}

pub fn tiny_measurement() -> LinearGaussianMeasurement {
    LinearGaussianMeasurement { noise_var: vec![0.5, 0.8] }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + h;
    let up = f(&p);
    p[i] = x[i] - h;
    let down = f(&p);
    (up - down) / (2.0 * h)
}

/// Linear-Gaussian reduction of the GPSSM: with the inducing posterior at its
/// prior the auxiliary transition is exactly `x + u + N(0, q)`, and the
/// measurement stub is `y = x + N(0, r)`. Smooths `steps` simulated steps with
/// the particle smoother and returns, per `(t, d)`, the deviation of the
/// smoothed mean from RTS in Monte Carlo standard errors. The standard error
/// is the spread of `replicates` further independent smoother runs.
pub fn smoother_deviation_from_rts(seed: u64, steps: usize, cfg: &SmootherConfig, replicates: usize) -> Vec<f64> {
    let mut rng = rng(seed);
    let (q, r) = (0.3, 0.5);
    let initial = Gaussian::isotropic(DVector::from_vec(vec![1.0, -1.0]), 1.0);
    let params = LgssmParams::random_walk(2, q, r, initial.clone()).unwrap();
    let us: Vec<DVector<f64>> = (0..steps).map(|_| DVector::from_fn(2, |_, _| 0.7 * gauss(&mut rng))).collect();
    let ys = simulate_lgssm(&params, &us, &mut rng);
    let rts = rts_smoother(&params, &kalman_filter(&params, &ys, &us).unwrap()).unwrap();
    let seq = Sequence::new(
        initial.clone(),
        ys.iter().map(|y| y.iter().copied().collect()).collect(),
        us.iter().map(|u| u.iter().copied().collect()).collect(),
    )
    .unwrap();
    let hyper = vec![SeArdHyper::new(1.0, vec![3.0; 4]).unwrap(); 2];
    let z = DMatrix::from_row_slice(3, 4, &[0.0, 0.0, 0.5, 0.0, 2.0, 1.0, 0.0, 0.5, -1.0, 2.0, 0.3, 0.3]);
    let model = GpssmModel::with_prior_posterior(hyper, vec![q; 2], MeanSpec::PdrAdditive, z, initial).unwrap();
    let meas = LinearGaussianMeasurement { noise_var: vec![r; 2] };
    let mut smooth = || {
        let cloud = particle_smoother(&model, &seq, &meas, cfg, &mut rng).unwrap();
        cloud.moments().into_iter().map(|(m, _)| m).collect::<Vec<_>>()
    };
    let estimate = smooth();
    let reps: Vec<_> = (0..replicates).map(|_| smooth()).collect();
    let mut out = Vec::with_capacity(2 * (steps + 1));
    for t in 0..=steps {
        for d in 0..2 {
            let v: Vec<f64> = reps.iter().map(|m| m[t][d]).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let se = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
            out.push((estimate[t][d] - rts.smoothed[t].mean[d]).abs() / se);
        }
    }
    out
}
