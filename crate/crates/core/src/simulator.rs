//! Synthetic office generator: AP layout, waypoint walks with drifting PDR
//! controls and IMU-style logs, and RSS scans drawn from the log-distance
//! model (optionally perturbed by a smooth shadowing field).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::pathloss::{ApModel, DeviceGeometry, Region, RssScan, DEFAULT_RSS_THRESHOLD};
use crate::pdr::{dead_reckon, AccelSample, ControlInput, ImuLog, RotationSample};

pub const DEFAULT_AP_COUNT: usize = 26;
pub const AP_HEIGHT_RANGE: (f64, f64) = (2.0, 4.0);
pub const A_RANGE: (f64, f64) = (-45.0, -35.0);
pub const B_RANGE: (f64, f64) = (-3.5, -1.8);
pub const SIGMA_RANGE: (f64, f64) = (2.0, 6.0);

pub fn default_bounds() -> Region {
    Region {
        min: [0.0, 0.0],
        max: [40.0, 40.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShadowingConfig {
    /// Marginal standard deviation of the field (dB).
    pub amplitude: f64,
    pub correlation_length: f64,
    /// Random Fourier features per AP.
    pub features: usize,
}

impl Default for ShadowingConfig {
    fn default() -> Self {
        Self {
            amplitude: 4.0,
            correlation_length: 8.0,
            features: 50,
        }
    }
}

/// Per-AP random Fourier feature approximation of a squared-exponential
/// Gaussian field: `s(x) = a·sqrt(2/K)·Σ w_k cos(ω_k·x + b_k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowingField {
    pub amplitude: f64,
    /// One entry per AP, each a list of `(ω_x, ω_y, phase, weight)`.
    pub features: Vec<Vec<[f64; 4]>>,
}

impl ShadowingField {
    pub fn sample(cfg: &ShadowingConfig, n_aps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = 1.0 / cfg.correlation_length;
        let features = (0..n_aps)
            .map(|_| {
                (0..cfg.features)
                    .map(|_| {
                        let wx: f64 = rng.sample(StandardNormal);
                        let wy: f64 = rng.sample(StandardNormal);
                        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                        let weight: f64 = rng.sample(StandardNormal);
                        [wx * inv, wy * inv, phase, weight]
                    })
                    .collect()
            })
            .collect();
        Self {
            amplitude: cfg.amplitude,
            features,
        }
    }

    pub fn value(&self, ap: usize, x: [f64; 2]) -> f64 {
        let feats = &self.features[ap];
        if feats.is_empty() {
            return 0.0;
        }
        let sum: f64 = feats
            .iter()
            .map(|[wx, wy, phase, weight]| weight * (wx * x[0] + wy * x[1] + phase).cos())
            .sum();
        self.amplitude * (2.0 / feats.len() as f64).sqrt() * sum
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub bounds: Region,
    pub aps: Vec<ApModel>,
    pub device: DeviceGeometry,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadowing: Option<ShadowingField>,
}

impl Environment {
    pub fn with_shadowing(mut self, cfg: &ShadowingConfig) -> Self {
        self.shadowing = Some(ShadowingField::sample(cfg, self.aps.len(), self.seed ^ 0x5bd1_e995));
        self
    }

    /// Noise-free RSS of AP `ap` at `x`, including shadowing.
    pub fn mean_rss(&self, ap: usize, x: [f64; 2]) -> f64 {
        let model = &self.aps[ap];
        let base = model.mean_rss(model.distance_to(x, self.device.height));
        base + self.shadowing.as_ref().map_or(0.0, |s| s.value(ap, x))
    }
}

pub fn gen_environment(seed: u64, n_aps: usize, bounds: Region) -> Result<Environment> {
    if n_aps == 0 {
        return Err(NavError::InvalidArguments("at least one AP is required".into()));
    }
    let bounds = Region::new(bounds.min, bounds.max)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aps = (0..n_aps)
        .map(|i| ApModel {
            ap_id: format!("ap{i:02}"),
            position: [
                rng.gen_range(bounds.min[0]..=bounds.max[0]),
                rng.gen_range(bounds.min[1]..=bounds.max[1]),
                rng.gen_range(AP_HEIGHT_RANGE.0..=AP_HEIGHT_RANGE.1),
            ],
            a: rng.gen_range(A_RANGE.0..=A_RANGE.1),
            b: rng.gen_range(B_RANGE.0..=B_RANGE.1),
            sigma: rng.gen_range(SIGMA_RANGE.0..=SIGMA_RANGE.1),
            d0: 1.0,
        })
        .collect();
    Ok(Environment {
        bounds,
        aps,
        device: DeviceGeometry::default(),
        seed,
        shadowing: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuSpec {
    pub sample_rate: f64,
    pub step_period: f64,
    /// Peak of each raised-cosine acceleration bump (m/s²).
    pub bump_amplitude: f64,
    pub accel_noise_sd: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            sample_rate: 100.0,
            step_period: 0.5,
            bump_amplitude: 2.0,
            accel_noise_sd: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WalkSpec {
    pub waypoints: Vec<[f64; 2]>,
    pub step_length: f64,
    /// Heading drift added per step, accumulating along the walk (rad).
    pub heading_bias: f64,
    /// Independent per-step heading noise (rad).
    pub heading_noise_sd: f64,
    #[serde(default)]
    pub step_count: Option<usize>,
    #[serde(default)]
    pub imu: ImuSpec,
}

impl WalkSpec {
    /// U-shaped office walk of 147 steps at the default stride.
    pub fn u_path() -> Self {
        Self {
            waypoints: vec![[3.0, 37.6], [3.0, 2.5], [36.0, 2.5], [36.0, 37.6]],
            step_length: crate::pdr::DEFAULT_STEP_LENGTH,
            heading_bias: 2f64.to_radians(),
            heading_noise_sd: 3f64.to_radians(),
            step_count: Some(147),
            imu: ImuSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(NavError::InvalidArguments("a walk needs at least two waypoints".into()));
        }
        if !(self.step_length > 0.0) {
            return Err(NavError::InvalidArguments(format!("step length must be positive, got {}", self.step_length)));
        }
        if !(self.heading_noise_sd >= 0.0) || !self.heading_bias.is_finite() {
            return Err(NavError::InvalidArguments("heading bias and noise must be finite, noise non-negative".into()));
        }
        if !(self.imu.sample_rate > 0.0 && self.imu.step_period > 0.0) {
            return Err(NavError::InvalidArguments("IMU sample rate and step period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Walk {
    /// True positions `x_0..x_T`.
    pub truth: Vec<[f64; 2]>,
    pub true_controls: Vec<ControlInput>,
    /// Controls as a drifting PDR would report them.
    pub controls: Vec<ControlInput>,
    pub step_times: Vec<f64>,
    pub imu: ImuLog,
}

impl Walk {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn control_vectors(&self) -> Vec<[f64; 2]> {
        self.controls.iter().map(|c| c.u).collect()
    }
}

pub fn gen_walk(env: &Environment, spec: &WalkSpec, seed: u64) -> Result<Walk> {
    spec.validate()?;
    if let Some(w) = spec.waypoints.iter().find(|w| !env.bounds.contains(**w)) {
        return Err(NavError::InvalidArguments(format!("waypoint {w:?} lies outside the environment")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // True headings: each leg walks from the current position toward the next
    // waypoint for as many whole steps as fit.
    let mut headings = Vec::new();
    let mut pos = spec.waypoints[0];
    for (leg, target) in spec.waypoints[1..].iter().enumerate() {
        let dx = target[0] - pos[0];
        let dy = target[1] - pos[1];
        let n = ((dx * dx + dy * dy).sqrt() / spec.step_length).floor() as usize;
        if n == 0 {
            return Err(NavError::WaypointSpacing { leg });
        }
        let heading = dx.atan2(dy);
        for _ in 0..n {
            headings.push(heading);
            pos = [
                pos[0] + spec.step_length * heading.sin(),
                pos[1] + spec.step_length * heading.cos(),
            ];
        }
    }
    if let Some(hint) = spec.step_count {
        if hint != headings.len() {
            log::warn!("walk has {} steps, spec hints {hint}", headings.len());
        }
    }

    let true_controls: Vec<ControlInput> = headings
        .iter()
        .enumerate()
        .map(|(i, h)| ControlInput::new(i + 1, spec.step_length, *h))
        .collect();
    let controls: Vec<ControlInput> = headings
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let noise: f64 = if spec.heading_noise_sd > 0.0 {
                spec.heading_noise_sd * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let measured = crate::pdr::wrap_angle(h + (i + 1) as f64 * spec.heading_bias + noise);
            ControlInput::new(i + 1, spec.step_length, measured)
        })
        .collect();
    let truth = dead_reckon(spec.waypoints[0], &true_controls.iter().map(|c| c.u).collect::<Vec<_>>());

    let (step_times, imu) = synth_imu(&controls, &spec.imu, &mut rng);
    Ok(Walk {
        truth,
        true_controls,
        controls,
        step_times,
        imu,
    })
}

/// Raised-cosine vertical-acceleration bump per step and a yaw-only rotation
/// stream holding each step's reported heading over its period.
fn synth_imu(controls: &[ControlInput], spec: &ImuSpec, rng: &mut ChaCha8Rng) -> (Vec<f64>, ImuLog) {
    let period = spec.step_period;
    let dt = 1.0 / spec.sample_rate;
    let step_times: Vec<f64> = (1..=controls.len()).map(|k| k as f64 * period).collect();
    let end = (controls.len() + 1) as f64 * period;
    let samples = (end / dt).round() as usize + 1;
    let noise = rand_distr::Normal::new(0.0, spec.accel_noise_sd.max(0.0)).expect("finite noise sd");

    let mut log = ImuLog::default();
    for i in 0..samples {
        let t = i as f64 * dt;
        // Index of the step whose period contains t.
        let k = ((t / period).round() as usize).clamp(1, controls.len().max(1));
        let phase = (t - k as f64 * period) / period;
        let bump = if controls.is_empty() || phase.abs() >= 0.5 {
            0.0
        } else {
            0.5 * spec.bump_amplitude * (1.0 + (std::f64::consts::TAU * phase).cos())
        };
        let az = bump + if spec.accel_noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
        log.linear_accel.push(AccelSample { t, az });
        let heading = controls.get(k - 1).map_or(0.0, |c| c.heading);
        log.rotation.push(RotationSample::from_heading(t, heading));
    }
    (step_times, log)
}

/// `scans_per_position` scans at every position; scan timestamps are the
/// position index.
pub fn gen_scans(env: &Environment, trajectory: &[[f64; 2]], scans_per_position: usize, threshold: f64, seed: u64) -> Vec<RssScan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trajectory.len() * scans_per_position);
    for (t, x) in trajectory.iter().enumerate() {
        for _ in 0..scans_per_position {
            out.push(draw_scan(env, *x, t as f64, threshold, &mut rng));
        }
    }
    out
}

fn draw_scan(env: &Environment, x: [f64; 2], timestamp: f64, threshold: f64, rng: &mut ChaCha8Rng) -> RssScan {
    let readings = env
        .aps
        .iter()
        .enumerate()
        .filter_map(|(i, ap)| {
            let e: f64 = rng.sample(StandardNormal);
            let rss = env.mean_rss(i, x) + ap.sigma * e;
            (rss >= threshold).then(|| (ap.ap_id.clone(), rss))
        })
        .collect();
    RssScan { timestamp, readings }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub positions: Vec<[f64; 2]>,
    pub scans: Vec<RssScan>,
}

pub fn gen_calibration(env: &Environment, n_points: usize, threshold: f64, seed: u64) -> Calibration {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = env.bounds;
    let positions: Vec<[f64; 2]> = (0..n_points)
        .map(|_| [rng.gen_range(b.min[0]..=b.max[0]), rng.gen_range(b.min[1]..=b.max[1])])
        .collect();
    let scans = positions
        .iter()
        .enumerate()
        .map(|(i, x)| draw_scan(env, *x, i as f64, threshold, &mut rng))
        .collect();
    Calibration { positions, scans }
}

/// Default scenario RSS cutoff.
pub const SCAN_THRESHOLD: f64 = DEFAULT_RSS_THRESHOLD;
