//! End-to-end evaluation: calibration fit, WiFi fixes, dead reckoning and the
//! four estimators compared by mean position error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::gp_regression::{optimize_measurement_gp_with, GpMeasurementModel, GpTrainConfig};
use crate::gpssm::{
    navigate, train, GridMeasurementDensity, Sequence, SmootherConfig, TrainConfig, DEFAULT_GRID_MARGIN,
    DEFAULT_GRID_STEP,
};
use crate::io::{self, ApPosition, CalibrationRow, Layout, Trajectory};
use crate::lgssm::{em_fit, kalman_filter, rts_smoother, EmOptions, EmOutcome, LgssmParams};
use crate::linalg::Gaussian;
use crate::pathloss::{fit_pathloss, wifi_localize, ApModel, Region, RssScan};
use crate::pdr::{build_controls, dead_reckon, detect_steps, ControlInput, ImuLog, StepDetectorConfig, DEFAULT_STEP_LENGTH};
use crate::simulator::{
    default_bounds, gen_calibration, gen_environment, gen_scans, gen_walk, Calibration, Environment, ShadowingConfig,
    Walk, WalkSpec, DEFAULT_AP_COUNT, SCAN_THRESHOLD,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Mean Euclidean distance between aligned estimate and truth positions.
pub fn eval_mae(estimate: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    if estimate.len() != truth.len() || truth.is_empty() {
        return Err(NavError::Alignment {
            estimate: estimate.len(),
            truth: truth.len(),
        });
    }
    let total: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e[0] - t[0]).hypot(e[1] - t[1]))
        .sum();
    Ok(total / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    WifiOnly,
    PdrOnly,
    Lgssm,
    Gpssm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::WifiOnly, Method::PdrOnly, Method::Lgssm, Method::Gpssm];

    pub fn name(self) -> &'static str {
        match self {
            Method::WifiOnly => "wifi-only",
            Method::PdrOnly => "pdr-only",
            Method::Lgssm => "lgssm",
            Method::Gpssm => "gpssm",
        }
    }

    /// Whether the estimate depends on the seed beyond the data.
    pub fn is_stochastic(self) -> bool {
        self == Method::Gpssm
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = NavError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| NavError::InvalidArguments(format!("unknown method {s:?}")))
    }
}

/// Simulated office and walks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_aps: usize,
    pub bounds: Region,
    pub shadowing: Option<ShadowingConfig>,
    pub walk: WalkSpec,
    /// Walks of the same path; the first is the one navigated.
    pub loops: usize,
    pub calibration_points: usize,
    pub rss_threshold: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_aps: DEFAULT_AP_COUNT,
            bounds: default_bounds(),
            shadowing: Some(ShadowingConfig::default()),
            walk: WalkSpec::u_path(),
            loops: 5,
            calibration_points: 400,
            rss_threshold: SCAN_THRESHOLD,
        }
    }
}

/// Independent sub-seed for one consumer of a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.gen()
}

const STREAM_ENV: u64 = 1;
const STREAM_CALIBRATION: u64 = 2;
const STREAM_WALK: u64 = 100;
const STREAM_SCANS: u64 = 200;
const STREAM_MEAS_GP: u64 = 300;
const STREAM_TRAIN: u64 = 400;
const STREAM_NAVIGATE: u64 = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedScenario {
    pub environment: Environment,
    pub calibration: Calibration,
    pub walks: Vec<Walk>,
    /// One scan per true position of each walk.
    pub scans: Vec<Vec<RssScan>>,
}

pub fn simulate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<SimulatedScenario> {
    if cfg.loops == 0 {
        return Err(NavError::InvalidArguments("scenario needs at least one loop".into()));
    }
    let mut environment = gen_environment(derive_seed(seed, STREAM_ENV), cfg.n_aps, cfg.bounds)?;
    if let Some(s) = &cfg.shadowing {
        environment = environment.with_shadowing(s);
    }
    let calibration = gen_calibration(
        &environment,
        cfg.calibration_points,
        cfg.rss_threshold,
        derive_seed(seed, STREAM_CALIBRATION),
    );
    let mut walks = Vec::with_capacity(cfg.loops);
    let mut scans = Vec::with_capacity(cfg.loops);
    for k in 0..cfg.loops as u64 {
        let walk = gen_walk(&environment, &cfg.walk, derive_seed(seed, STREAM_WALK + k))?;
        scans.push(gen_scans(
            &environment,
            &walk.truth,
            1,
            cfg.rss_threshold,
            derive_seed(seed, STREAM_SCANS + k),
        ));
        walks.push(walk);
    }
    Ok(SimulatedScenario {
        environment,
        calibration,
        walks,
        scans,
    })
}

impl SimulatedScenario {
    pub fn layout(&self) -> Layout {
        layout_of(&self.environment)
    }

    pub fn calibration_rows(&self) -> Vec<CalibrationRow> {
        let z = self.environment.device.height;
        self.calibration
            .positions
            .iter()
            .zip(&self.calibration.scans)
            .flat_map(|(p, s)| {
                s.readings.iter().map(move |(id, rss)| CalibrationRow {
                    ap_id: id.clone(),
                    x: p[0],
                    y: p[1],
                    z,
                    rss: *rss,
                })
            })
            .collect()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            layout: self.layout(),
            calibration: io::calibration_scans(&self.calibration_rows()),
            loops: self
                .walks
                .iter()
                .zip(&self.scans)
                .map(|(w, s)| LoopLog {
                    scans: s.clone(),
                    imu: w.imu.clone(),
                    truth: Some(w.truth.clone()),
                })
                .collect(),
        }
    }
}

pub fn layout_of(env: &Environment) -> Layout {
    Layout {
        bounds: env.bounds,
        aps: env
            .aps
            .iter()
            .map(|a| ApPosition {
                ap_id: a.ap_id.clone(),
                position: a.position,
            })
            .collect(),
        device: env.device,
    }
}

/// Raw logs of one walk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopLog {
    /// Scans stamped with the index of the position they were taken at.
    pub scans: Vec<RssScan>,
    pub imu: ImuLog,
    pub truth: Option<Vec<[f64; 2]>>,
}

/// Everything the estimators consume, whether simulated or read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub layout: Layout,
    /// Calibration scans with their 3-D measurement positions.
    pub calibration: Vec<([f64; 3], RssScan)>,
    pub loops: Vec<LoopLog>,
}

/// Paths of one recorded walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopFiles {
    pub scans: PathBuf,
    pub imu: PathBuf,
    /// Ground truth in the estimates CSV format.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSource {
    Simulated {
        #[serde(default)]
        scenario: ScenarioConfig,
    },
    Files {
        environment: PathBuf,
        calibration: PathBuf,
        loops: Vec<LoopFiles>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulated {
            scenario: ScenarioConfig::default(),
        }
    }
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Dataset> {
        match self {
            DataSource::Simulated { scenario } => Ok(simulate_scenario(scenario, seed)?.dataset()),
            DataSource::Files {
                environment,
                calibration,
                loops,
            } => {
                let layout: Layout = io::read_json(environment)?;
                let calibration = io::calibration_scans(&io::read_calibration(calibration)?);
                let loops = loops
                    .iter()
                    .map(|l| {
                        Ok(LoopLog {
                            scans: io::read_scans(&l.scans)?,
                            imu: io::read_imu(&l.imu)?,
                            truth: l.truth.as_deref().map(io::read_estimates).transpose()?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                if loops.is_empty() {
                    return Err(NavError::NoData);
                }
                Ok(Dataset {
                    layout,
                    calibration,
                    loops,
                })
            }
        }
    }

    fn check_files(&self) -> Result<()> {
        if let DataSource::Files {
            environment,
            calibration,
            loops,
        } = self
        {
            let all = [environment, calibration]
                .into_iter()
                .chain(loops.iter().flat_map(|l| [Some(&l.scans), Some(&l.imu), l.truth.as_ref()]).flatten());
            for p in all {
                if !p.exists() {
                    return Err(NavError::InvalidArguments(format!("input file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Settings shared by the WiFi and PDR front ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    pub reference_distance: f64,
    pub step_length: f64,
    pub step_detector: StepDetectorConfig,
    pub rss_threshold: f64,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self {
            reference_distance: 1.0,
            step_length: DEFAULT_STEP_LENGTH,
            step_detector: StepDetectorConfig::default(),
            rss_threshold: SCAN_THRESHOLD,
        }
    }
}

/// Fits one path-loss model per AP of the layout. APs heard at fewer than
/// three calibration positions are skipped.
pub fn fit_access_points(
    layout: &Layout,
    calibration: &[([f64; 3], RssScan)],
    reference_distance: f64,
) -> Result<BTreeMap<String, ApModel>> {
    let mut out = BTreeMap::new();
    for ap in &layout.aps {
        let samples: Vec<([f64; 3], f64)> = calibration
            .iter()
            .filter_map(|(p, s)| s.readings.get(&ap.ap_id).map(|r| (*p, *r)))
            .collect();
        if samples.len() < 3 {
            log::warn!("AP {} heard at {} calibration positions; skipped", ap.ap_id, samples.len());
            continue;
        }
        out.insert(ap.ap_id.clone(), fit_pathloss(&ap.ap_id, ap.position, &samples, reference_distance)?);
    }
    if out.is_empty() {
        return Err(NavError::NoData);
    }
    Ok(out)
}

/// Maximum-likelihood fix of every scan, ignoring APs without a model.
pub fn localize_scans(scans: &[RssScan], aps: &BTreeMap<String, ApModel>, layout: &Layout, threshold: f64) -> Result<Vec<[f64; 2]>> {
    scans
        .iter()
        .map(|s| {
            let mut usable = s.filtered(threshold);
            usable.readings.retain(|id, _| aps.contains_key(id));
            Ok(wifi_localize(&usable, aps, &layout.device, &layout.bounds)?.estimate)
        })
        .collect()
}

pub fn pdr_controls(imu: &ImuLog, cfg: &FrontEndConfig) -> Result<Vec<ControlInput>> {
    imu.validate()?;
    let steps = detect_steps(&imu.linear_accel, &cfg.step_detector)?;
    build_controls(&steps, &imu.rotation, cfg.step_length)
}

/// Fixes from the scans and controls from the IMU log of one walk.
pub fn assemble_trajectory(
    log: &LoopLog,
    aps: &BTreeMap<String, ApModel>,
    layout: &Layout,
    cfg: &FrontEndConfig,
) -> Result<Trajectory> {
    for (i, s) in log.scans.iter().enumerate() {
        if s.timestamp != i as f64 {
            return Err(NavError::InvalidArguments(format!(
                "scan {i} is stamped {}; expected one scan per position index",
                s.timestamp
            )));
        }
    }
    let fixes = localize_scans(&log.scans, aps, layout, cfg.rss_threshold).map_err(|e| e.at_stage("localize"))?;
    let controls: Vec<[f64; 2]> = pdr_controls(&log.imu, cfg)
        .map_err(|e| e.at_stage("pdr"))?
        .iter()
        .map(|c| c.u)
        .collect();
    if controls.len() + 1 != fixes.len() {
        return Err(NavError::Alignment {
            estimate: controls.len() + 1,
            truth: fixes.len(),
        }
        .at_stage("pdr"));
    }
    Trajectory::new(fixes, controls, log.truth.clone())
}

/// Exact GP from true calibration positions to the WiFi fixes observed there.
pub fn train_measurement_model(
    calibration: &[([f64; 3], RssScan)],
    aps: &BTreeMap<String, ApModel>,
    layout: &Layout,
    threshold: f64,
    cfg: &GpTrainConfig,
) -> Result<GpMeasurementModel> {
    let scans: Vec<RssScan> = calibration.iter().map(|(_, s)| s.clone()).collect();
    let fixes = localize_scans(&scans, aps, layout, threshold)?;
    let n = calibration.len();
    let x = nalgebra::DMatrix::from_fn(n, 2, |i, d| calibration[i].0[d]);
    let y = nalgebra::DMatrix::from_fn(n, 2, |i, d| fixes[i][d]);
    Ok(optimize_measurement_gp_with(&x, &y, None, cfg)?.0)
}

/// Estimator settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    /// Variance of the initial-state prior centred on the first fix.
    pub initial_variance: f64,
    /// Walks used to train the GPSSM, starting with the navigated one.
    pub training_loops: usize,
    pub gpssm: TrainConfig,
    pub navigation: SmootherConfig,
    pub measurement: GpTrainConfig,
    pub grid_step: f64,
    pub grid_margin: f64,
    pub lgssm: EmOptions,
    pub lgssm_initial_q: f64,
    pub lgssm_initial_r: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            initial_variance: 4.0,
            training_loops: 5,
            gpssm: TrainConfig::default(),
            navigation: SmootherConfig::default(),
            measurement: GpTrainConfig::default(),
            grid_step: DEFAULT_GRID_STEP,
            grid_margin: DEFAULT_GRID_MARGIN,
            lgssm: EmOptions::default(),
            lgssm_initial_q: 1.0,
            lgssm_initial_r: 4.0,
        }
    }
}

/// Dead reckoning from the true start when it is known, else the first fix.
pub fn estimate_pdr(traj: &Trajectory) -> Vec<[f64; 2]> {
    let start = traj.truth.as_ref().map_or(traj.fixes[0], |t| t[0]);
    dead_reckon(start, &traj.controls)
}

/// Random-walk LGSSM `x_t = x_{t-1} + u_t + q`, `y_t = x_t + r` with `Q` and
/// `R` learned by EM, then RTS-smoothed. Returns the fit and the smoothed
/// positions.
pub fn fit_lgssm(traj: &Trajectory, cfg: &MethodConfig) -> Result<(EmOutcome, Vec<[f64; 2]>)> {
    let initial = Gaussian::isotropic(DVector::from_column_slice(&traj.fixes[0]), cfg.initial_variance);
    let ys: Vec<DVector<f64>> = traj.fixes[1..].iter().map(|y| DVector::from_column_slice(y)).collect();
    let us: Vec<DVector<f64>> = traj.controls.iter().map(|u| DVector::from_column_slice(u)).collect();
    let init = LgssmParams::random_walk(2, cfg.lgssm_initial_q, cfg.lgssm_initial_r, initial)?;
    let fit = em_fit(&ys, &us, &init, &cfg.lgssm)?;
    let smooth = rts_smoother(&fit.params, &kalman_filter(&fit.params, &ys, &us)?)?;
    let positions = smooth.smoothed.iter().map(|g| [g.mean[0], g.mean[1]]).collect();
    Ok((fit, positions))
}

pub fn estimate_lgssm(traj: &Trajectory, cfg: &MethodConfig) -> Result<Vec<[f64; 2]>> {
    Ok(fit_lgssm(traj, cfg)?.1)
}

/// Trains on the first `cfg.training_loops` walks and smooths the first.
pub fn estimate_gpssm(
    trajectories: &[Trajectory],
    meas: &GpMeasurementModel,
    region: &Region,
    cfg: &MethodConfig,
    seed: u64,
) -> Result<Vec<[f64; 2]>> {
    let k = cfg.training_loops.clamp(1, trajectories.len());
    let seqs = trajectories[..k]
        .iter()
        .map(|t| Sequence::from_fixes(&t.fixes, &t.controls, cfg.initial_variance))
        .collect::<Result<Vec<_>>>()?;
    let density = GridMeasurementDensity::new(meas.clone(), region, cfg.grid_step, cfg.grid_margin);
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, STREAM_TRAIN),
        ..cfg.gpssm.clone()
    };
    let artifact = train(&seqs, &density, &train_cfg).map_err(|e| e.at_stage("train-gpssm"))?;
    let nav = navigate(&artifact.model, &seqs[0], &density, &cfg.navigation, derive_seed(seed, STREAM_NAVIGATE))
        .map_err(|e| e.at_stage("navigate"))?;
    Ok(nav.positions())
}

/// Front-end products of one dataset shared by all estimators.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub layout: Layout,
    pub aps: BTreeMap<String, ApModel>,
    pub trajectories: Vec<Trajectory>,
    pub calibration: Vec<([f64; 3], RssScan)>,
}

pub fn prepare(data: &Dataset, cfg: &FrontEndConfig) -> Result<Prepared> {
    let aps = fit_access_points(&data.layout, &data.calibration, cfg.reference_distance)
        .map_err(|e| e.at_stage("fit-pathloss"))?;
    let trajectories = data
        .loops
        .iter()
        .map(|l| assemble_trajectory(l, &aps, &data.layout, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        layout: data.layout.clone(),
        aps,
        trajectories,
        calibration: data.calibration.clone(),
    })
}

impl Prepared {
    pub fn measurement_model(&self, cfg: &MethodConfig, threshold: f64, seed: u64) -> Result<GpMeasurementModel> {
        let gp_cfg = GpTrainConfig {
            seed: derive_seed(seed, STREAM_MEAS_GP),
            ..cfg.measurement.clone()
        };
        train_measurement_model(&self.calibration, &self.aps, &self.layout, threshold, &gp_cfg)
            .map_err(|e| e.at_stage("train-meas"))
    }

    /// Estimate of the first walk. `meas` is required by the GPSSM only.
    pub fn estimate(&self, method: Method, meas: Option<&GpMeasurementModel>, cfg: &MethodConfig, seed: u64) -> Result<Vec<[f64; 2]>> {
        let first = &self.trajectories[0];
        match method {
            Method::WifiOnly => Ok(first.fixes.clone()),
            Method::PdrOnly => Ok(estimate_pdr(first)),
            Method::Lgssm => estimate_lgssm(first, cfg).map_err(|e| e.at_stage("train-lgssm")),
            Method::Gpssm => {
                let meas = meas.ok_or_else(|| NavError::InvalidArguments("GPSSM needs a measurement model".into()))?;
                estimate_gpssm(&self.trajectories, meas, &self.layout.bounds, cfg, seed)
            }
        }
    }

    pub fn truth(&self) -> Option<&[[f64; 2]]> {
        self.trajectories[0].truth.as_deref()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub front_end: FrontEndConfig,
    #[serde(default)]
    pub methods: MethodConfig,
}

impl RunConfig {
    pub fn new(method: Method, seeds: Vec<u64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method,
            seeds,
            data: DataSource::default(),
            front_end: FrontEndConfig::default(),
            methods: MethodConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(NavError::InvalidArguments(format!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(NavError::InvalidArguments("at least one seed is required".into()));
        }
        self.data.check_files()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` when the data carry no ground truth.
    pub mae: Option<f64>,
    pub steps: usize,
    #[serde(skip)]
    pub estimate: Vec<[f64; 2]>,
}

/// Contents of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub method: Method,
    pub runs: Vec<SeedResult>,
    pub median_mae: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub metrics: Metrics,
    /// Wall-clock seconds per `(seed, stage)`.
    pub timings: Vec<(u64, String, f64)>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn estimates_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("estimates_seed{seed}.csv"))
}

pub fn plot_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("plot_seed{seed}.csv"))
}

pub const METRICS_FILE: &str = "metrics.json";
pub const TIMING_FILE: &str = "timing.json";

/// Runs the configured method for every seed. With `out_dir`, writes one
/// estimates CSV and one plot-layer CSV per seed, the metrics JSON, and
/// wall-clock timings to a separate file so that the metrics stay
/// reproducible.
pub fn run_pipeline(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    let mut timings = Vec::new();
    for &seed in &config.seeds {
        let mut clock = Instant::now();
        let mut lap = |stage: &str, timings: &mut Vec<(u64, String, f64)>| {
            timings.push((seed, stage.to_string(), clock.elapsed().as_secs_f64()));
            clock = Instant::now();
        };
        let data = config.data.load(seed).map_err(|e| e.at_stage("load"))?;
        lap("load", &mut timings);
        let prepared = prepare(&data, &config.front_end)?;
        lap("front-end", &mut timings);
        let meas = if config.method == Method::Gpssm {
            let m = prepared.measurement_model(&config.methods, config.front_end.rss_threshold, seed)?;
            lap("train-meas", &mut timings);
            Some(m)
        } else {
            None
        };
        let estimate = prepared.estimate(config.method, meas.as_ref(), &config.methods, seed)?;
        lap(config.method.name(), &mut timings);
        let mae = prepared.truth().map(|t| eval_mae(&estimate, t)).transpose().map_err(|e| e.at_stage("eval"))?;
        if let Some(dir) = out_dir {
            io::write_estimates(&estimates_file(dir, seed), &estimate)?;
            io::write_plot(&plot_file(dir, seed), &io::plot_rows(prepared.truth(), &estimate, &prepared.layout.aps))?;
        }
        runs.push(SeedResult {
            seed,
            mae,
            steps: estimate.len() - 1,
            estimate,
        });
    }
    let maes: Vec<f64> = runs.iter().filter_map(|r| r.mae).collect();
    let metrics = Metrics {
        schema_version: SCHEMA_VERSION,
        method: config.method,
        median_mae: if maes.len() == runs.len() { median(&maes) } else { None },
        runs,
    };
    if let Some(dir) = out_dir {
        io::write_json(&dir.join(METRICS_FILE), &metrics)?;
        let t: Vec<_> = timings
            .iter()
            .map(|(seed, stage, secs)| serde_json::json!({"seed": seed, "stage": stage, "seconds": secs}))
            .collect();
        io::write_json(&dir.join(TIMING_FILE), &t)?;
    }
    Ok(RunReport { metrics, timings })
}

/// MAE of every method on one seed, with the GPSSM trained on each of
/// `loop_counts` walks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub wifi: f64,
    pub pdr: f64,
    pub lgssm: f64,
    /// `(training loops, MAE)`.
    pub gpssm: Vec<(usize, f64)>,
}

pub fn compare_methods(
    data: &DataSource,
    front_end: &FrontEndConfig,
    methods: &MethodConfig,
    loop_counts: &[usize],
    seed: u64,
) -> Result<Comparison> {
    let dataset = data.load(seed).map_err(|e| e.at_stage("load"))?;
    let prepared = prepare(&dataset, front_end)?;
    let truth = prepared
        .truth()
        .ok_or_else(|| NavError::InvalidArguments("comparison needs ground truth".into()))?
        .to_vec();
    let mae = |m: Method, meas: Option<&GpMeasurementModel>, cfg: &MethodConfig| -> Result<f64> {
        eval_mae(&prepared.estimate(m, meas, cfg, seed)?, &truth)
    };
    let meas = if loop_counts.is_empty() {
        None
    } else {
        Some(prepared.measurement_model(methods, front_end.rss_threshold, seed)?)
    };
    let mut gpssm = Vec::with_capacity(loop_counts.len());
    for &k in loop_counts {
        let cfg = MethodConfig {
            training_loops: k,
            ..methods.clone()
        };
        gpssm.push((k, mae(Method::Gpssm, meas.as_ref(), &cfg)?));
    }
    Ok(Comparison {
        seed,
        wifi: mae(Method::WifiOnly, None, methods)?,
        pdr: mae(Method::PdrOnly, None, methods)?,
        lgssm: mae(Method::Lgssm, None, methods)?,
        gpssm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let a = [[0.0, 0.0], [1.0, 1.0]];
        assert_eq!(eval_mae(&a, &a).unwrap(), 0.0);
        let shifted = [[3.0, 4.0], [4.0, 5.0]];
        assert_eq!(eval_mae(&shifted, &a).unwrap(), 5.0);
        let est = [[0.0, 0.0], [0.0, 0.0]];
        let truth = [[1.0, 0.0], [0.0, 2.0]];
        assert_eq!(eval_mae(&est, &truth).unwrap(), 1.5);
        assert!(matches!(eval_mae(&a, &a[..1]), Err(NavError::Alignment { estimate: 2, truth: 1 })));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("kalman".parse::<Method>().is_err());
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(7, 1), derive_seed(7, 2));
        assert_eq!(derive_seed(7, 1), derive_seed(7, 1));
    }
}
