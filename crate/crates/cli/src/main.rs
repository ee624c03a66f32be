use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use gpssm_nav::gp_regression::GpMeasurementModel;
use gpssm_nav::gpssm::{navigate, train, GpssmArtifact, GridMeasurementDensity, Sequence, SmootherConfig};
use gpssm_nav::io::{self, Layout, Trajectory};
use gpssm_nav::pathloss::{ApModel, Region};
use gpssm_nav::pdr::dead_reckon;
use gpssm_nav::pipeline::{
    eval_mae, fit_access_points, fit_lgssm, localize_scans, pdr_controls, run_pipeline, simulate_scenario,
    train_measurement_model, FrontEndConfig, Method, MethodConfig, RunConfig, ScenarioConfig,
};
use gpssm_nav::NavError;

/// WiFi/PDR indoor navigation with a variational GPSSM.
#[derive(Parser)]
#[command(name = "gpnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic office, calibration survey and walks.
    Simulate(SimulateArgs),
    /// Fit log-distance path-loss models from a calibration survey.
    FitPathloss(FitPathlossArgs),
    /// Turn WiFi scans into position fixes, written as a trajectory CSV.
    Localize(LocalizeArgs),
    /// Detect steps and headings in an IMU log and emit PDR controls.
    Pdr(PdrArgs),
    /// Train the GP measurement model on calibration fixes.
    TrainMeas(TrainMeasArgs),
    /// Train the GPSSM transition model on one or more trajectories.
    TrainGpssm(TrainGpssmArgs),
    /// Fit the random-walk LGSSM baseline by EM.
    TrainLgssm(TrainLgssmArgs),
    /// Smooth a trajectory with a trained GPSSM.
    Navigate(NavigateArgs),
    /// Mean position error of an estimate against ground truth.
    Eval(EvalArgs),
    /// Run the end-to-end pipeline and write estimates, metrics and plot layers.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Scenario JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    n_aps: Option<usize>,
    #[arg(long)]
    calibration_points: Option<usize>,
    /// Heading drift per step in degrees.
    #[arg(long)]
    heading_bias_deg: Option<f64>,
    /// Per-step heading noise in degrees.
    #[arg(long)]
    heading_noise_deg: Option<f64>,
    #[arg(long)]
    no_shadowing: bool,
}

#[derive(Args)]
struct FitPathlossArgs {
    /// Calibration CSV with columns ap_id, x, y, z, rss.
    #[arg(long)]
    calib: PathBuf,
    /// Environment JSON with AP positions.
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    d0: f64,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Path-loss models from `fit-pathloss`.
    #[arg(long)]
    aps: PathBuf,
    #[arg(long)]
    env: PathBuf,
    /// Scan log, one JSON scan per position.
    #[arg(long)]
    scans: PathBuf,
    /// PDR controls to attach; zero controls otherwise.
    #[arg(long)]
    controls: Option<PathBuf>,
    /// Ground-truth positions (t, x, y) to attach.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = gpssm_nav::simulator::SCAN_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PdrArgs {
    #[arg(long)]
    imu: PathBuf,
    /// Start position as `x,y`.
    #[arg(long, value_parser = parse_point)]
    start: [f64; 2],
    #[arg(long)]
    out: PathBuf,
    /// Also write the dead-reckoned positions (t, x, y).
    #[arg(long)]
    track: Option<PathBuf>,
    #[arg(long, default_value_t = gpssm_nav::pdr::DEFAULT_STEP_LENGTH)]
    step_length: f64,
}

#[derive(Args)]
struct TrainMeasArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    env: PathBuf,
    /// Path-loss models; fitted from the calibration data when omitted.
    #[arg(long)]
    aps: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long, default_value_t = gpssm_nav::simulator::SCAN_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SmootherArgs {
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    backward: Option<usize>,
}

impl SmootherArgs {
    fn apply(&self, mut cfg: SmootherConfig) -> SmootherConfig {
        if let Some(p) = self.particles {
            cfg.particles = p;
        }
        if let Some(b) = self.backward {
            cfg.backward = b;
        }
        cfg
    }
}

#[derive(Args)]
struct TrainGpssmArgs {
    /// Trajectory CSVs, or directories whose `.csv` files are taken in name
    /// order. The first trajectory seeds the initial state.
    #[arg(long, required = true, num_args = 1..)]
    traj: Vec<PathBuf>,
    /// Measurement model from `train-meas`.
    #[arg(long)]
    meas: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    num_inducing: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    learn_inducing: bool,
    #[arg(long, default_value_t = 4.0)]
    initial_variance: f64,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Args)]
struct TrainLgssmArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the RTS-smoothed positions (t, x, y).
    #[arg(long)]
    estimates: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    initial_variance: f64,
}

#[derive(Args)]
struct NavigateArgs {
    /// Trained model from `train-gpssm`.
    #[arg(long)]
    model: PathBuf,
    /// Measurement model the GPSSM was trained with.
    #[arg(long)]
    meas: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4.0)]
    initial_variance: f64,
    #[command(flatten)]
    smoother: SmootherArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated positions (t, x, y).
    #[arg(long)]
    estimate: PathBuf,
    /// Ground truth as positions (t, x, y) ...
    #[arg(long, conflicts_with = "traj", required_unless_present = "traj")]
    truth: Option<PathBuf>,
    /// ... or as the truth columns of a trajectory CSV.
    #[arg(long)]
    traj: Option<PathBuf>,
    /// Write `{"mae": …}` here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run configuration JSON; defaults to the simulated scenario.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One of wifi-only, pdr-only, lgssm, gpssm.
    #[arg(long)]
    method: Option<Method>,
    /// Repeat for several seeds; replaces the configured seeds.
    #[arg(long, required_unless_present = "config")]
    seed: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    training_loops: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[command(flatten)]
    smoother: SmootherArgs,
}

fn parse_point(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    match parts.as_slice() {
        [x, y] => Ok([
            x.trim().parse().map_err(|e| format!("{x:?}: {e}"))?,
            y.trim().parse().map_err(|e| format!("{y:?}: {e}"))?,
        ]),
        _ => Err(format!("expected `x,y`, got {s:?}")),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn simulate(a: SimulateArgs) -> anyhow::Result<()> {
    let mut cfg: ScenarioConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(v) = a.loops {
        cfg.loops = v;
    }
    if let Some(v) = a.n_aps {
        cfg.n_aps = v;
    }
    if let Some(v) = a.calibration_points {
        cfg.calibration_points = v;
    }
    if let Some(v) = a.heading_bias_deg {
        cfg.walk.heading_bias = v.to_radians();
    }
    if let Some(v) = a.heading_noise_deg {
        cfg.walk.heading_noise_sd = v.to_radians();
    }
    if a.no_shadowing {
        cfg.shadowing = None;
    }
    let sim = simulate_scenario(&cfg, a.seed)?;
    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("scenario.json"), &cfg)?;
    io::write_json(&a.out.join("environment.json"), &sim.environment)?;
    io::write_calibration(&a.out.join("calibration.csv"), &sim.calibration_rows())?;
    for (k, (walk, scans)) in sim.walks.iter().zip(&sim.scans).enumerate() {
        let k = k + 1;
        io::write_scans(&a.out.join(format!("loop{k}_scans.jsonl")), scans)?;
        io::write_imu(&a.out.join(format!("loop{k}_imu.jsonl")), &walk.imu)?;
        io::write_estimates(&a.out.join(format!("loop{k}_truth.csv")), &walk.truth)?;
    }
    println!("wrote {} loops of {} steps to {}", sim.walks.len(), sim.walks[0].steps(), a.out.display());
    Ok(())
}

fn read_aps(path: &Path) -> anyhow::Result<BTreeMap<String, ApModel>> {
    let list: Vec<ApModel> = io::read_json(path)?;
    Ok(list.into_iter().map(|a| (a.ap_id.clone(), a)).collect())
}

fn fit_aps(calib: &Path, layout: &Layout, d0: f64) -> anyhow::Result<BTreeMap<String, ApModel>> {
    let rows = io::read_calibration(calib)?;
    Ok(fit_access_points(layout, &io::calibration_scans(&rows), d0)?)
}

fn fit_pathloss_cmd(a: FitPathlossArgs) -> anyhow::Result<()> {
    let layout: Layout = io::read_json(&a.env)?;
    let aps = fit_aps(&a.calib, &layout, a.d0)?;
    let list: Vec<&ApModel> = aps.values().collect();
    io::write_json(&a.out, &list)?;
    println!("fitted {} of {} APs", aps.len(), layout.aps.len());
    Ok(())
}

fn localize(a: LocalizeArgs) -> anyhow::Result<()> {
    let layout: Layout = io::read_json(&a.env)?;
    let aps = read_aps(&a.aps)?;
    let scans = io::read_scans(&a.scans)?;
    let fixes = localize_scans(&scans, &aps, &layout, a.threshold)?;
    let controls = match &a.controls {
        Some(p) => io::read_controls(p)?.iter().map(|c| c.u).collect(),
        None => vec![[0.0, 0.0]; fixes.len().saturating_sub(1)],
    };
    let truth = a.truth.as_deref().map(io::read_estimates).transpose()?;
    let traj = Trajectory::new(fixes, controls, truth)?;
    io::write_trajectory(&a.out, &traj)?;
    println!("localized {} scans", traj.fixes.len());
    Ok(())
}

fn pdr(a: PdrArgs) -> anyhow::Result<()> {
    let imu = io::read_imu(&a.imu)?;
    let cfg = FrontEndConfig {
        step_length: a.step_length,
        ..FrontEndConfig::default()
    };
    let controls = pdr_controls(&imu, &cfg)?;
    io::write_controls(&a.out, &controls)?;
    let u: Vec<[f64; 2]> = controls.iter().map(|c| c.u).collect();
    let track = dead_reckon(a.start, &u);
    if let Some(p) = &a.track {
        io::write_estimates(p, &track)?;
    }
    let end = track[track.len() - 1];
    println!("{} steps, final position ({:.3}, {:.3})", controls.len(), end[0], end[1]);
    Ok(())
}

fn train_meas(a: TrainMeasArgs) -> anyhow::Result<()> {
    let layout: Layout = io::read_json(&a.env)?;
    let aps = match &a.aps {
        Some(p) => read_aps(p)?,
        None => fit_aps(&a.calib, &layout, 1.0)?,
    };
    let calibration = io::calibration_scans(&io::read_calibration(&a.calib)?);
    let mut cfg = MethodConfig::default().measurement;
    cfg.seed = a.seed;
    if let Some(r) = a.restarts {
        cfg.restarts = r;
    }
    let model = train_measurement_model(&calibration, &aps, &layout, a.threshold, &cfg)?;
    io::write_json(&a.out, &model)?;
    println!("trained on {} calibration positions, noise {:?}", model.len(), model.noise_var());
    Ok(())
}

fn trajectory_paths(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            if files.is_empty() {
                bail!(NavError::NoData.at_stage(format!("no trajectory CSVs in {}", p.display())));
            }
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Grid region covering the measurement model's calibration positions.
fn calibration_region(meas: &GpMeasurementModel) -> anyhow::Result<Region> {
    let x = meas.train_inputs();
    let col = |j: usize| x.column(j).iter().copied().collect::<Vec<f64>>();
    let (xs, ys) = (col(0), col(1));
    let lo = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Region::new([lo(&xs), lo(&ys)], [hi(&xs), hi(&ys)])?)
}

fn measurement_density(path: &Path) -> anyhow::Result<GridMeasurementDensity> {
    let meas: GpMeasurementModel = io::read_json(path)?;
    let region = calibration_region(&meas)?;
    let defaults = MethodConfig::default();
    Ok(GridMeasurementDensity::new(meas, &region, defaults.grid_step, defaults.grid_margin))
}

fn sequence_of(traj: &Trajectory, initial_variance: f64) -> anyhow::Result<Sequence> {
    Ok(Sequence::from_fixes(&traj.fixes, &traj.controls, initial_variance)?)
}

fn train_gpssm_cmd(a: TrainGpssmArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => io::read_json(p)?,
        None => MethodConfig::default().gpssm,
    };
    cfg.seed = a.seed;
    if let Some(v) = a.rounds {
        cfg.rounds = v;
    }
    if let Some(v) = a.num_inducing {
        cfg.num_inducing = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    cfg.learn_inducing |= a.learn_inducing;
    cfg.smoother = a.smoother.apply(cfg.smoother);
    let density = measurement_density(&a.meas)?;
    let seqs = trajectory_paths(&a.traj)?
        .iter()
        .map(|p| sequence_of(&io::read_trajectory(p).with_context(|| format!("reading {}", p.display()))?, a.initial_variance))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let artifact = train(&seqs, &density, &cfg)?;
    io::write_json(&a.out, &artifact)?;
    println!(
        "trained on {} trajectories; final surrogate {:.3}",
        seqs.len(),
        artifact.report.surrogate.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_lgssm_cmd(a: TrainLgssmArgs) -> anyhow::Result<()> {
    let traj = io::read_trajectory(&a.traj)?;
    let mut cfg = MethodConfig {
        initial_variance: a.initial_variance,
        ..MethodConfig::default()
    };
    if let Some(n) = a.iterations {
        cfg.lgssm.iterations = n;
    }
    let (fit, estimate) = fit_lgssm(&traj, &cfg)?;
    let trace = &fit.log_likelihood;
    io::write_json(&a.out, &serde_json::json!({ "params": fit.params, "log_likelihood": trace }))?;
    if let Some(p) = &a.estimates {
        io::write_estimates(p, &estimate)?;
    }
    println!("EM log-likelihood {:.3} -> {:.3}", trace[0], trace[trace.len() - 1]);
    Ok(())
}

fn navigate_cmd(a: NavigateArgs) -> anyhow::Result<()> {
    let artifact: GpssmArtifact = io::read_json(&a.model)?;
    let density = measurement_density(&a.meas)?;
    let traj = io::read_trajectory(&a.traj)?;
    let seq = sequence_of(&traj, a.initial_variance)?;
    let smoother = a.smoother.apply(MethodConfig::default().navigation);
    let nav = navigate(&artifact.model, &seq, &density, &smoother, a.seed)?;
    let est = nav.positions();
    io::write_estimates(&a.out, &est)?;
    match &traj.truth {
        Some(t) => println!("MAE {:.4} m over {} positions", eval_mae(&est, t)?, est.len()),
        None => println!("smoothed {} positions", est.len()),
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let est = io::read_estimates(&a.estimate)?;
    let truth = match (&a.truth, &a.traj) {
        (Some(p), _) => io::read_estimates(p)?,
        (None, Some(p)) => io::read_trajectory(p)?
            .truth
            .ok_or_else(|| anyhow!(NavError::NoData.at_stage(format!("{} has no truth columns", p.display()))))?,
        (None, None) => unreachable!("clap requires --truth or --traj"),
    };
    let mae = eval_mae(&est, &truth)?;
    if let Some(p) = &a.out {
        io::write_json(p, &serde_json::json!({ "mae": mae, "positions": truth.len() }))?;
    }
    println!("MAE {mae:.4} m over {} positions", truth.len());
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => io::read_json::<RunConfig>(p).map_err(|e| NavError::InvalidArguments(format!("run configuration: {e}")))?,
        None => RunConfig::new(
            a.method.ok_or_else(|| anyhow!(NavError::InvalidArguments("--method is required without --config".into())))?,
            a.seed.clone(),
        ),
    };
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if !a.seed.is_empty() {
        cfg.seeds = a.seed.clone();
    }
    if let Some(k) = a.training_loops {
        cfg.methods.training_loops = k;
    }
    if let Some(r) = a.rounds {
        cfg.methods.gpssm.rounds = r;
    }
    cfg.methods.gpssm.smoother = a.smoother.apply(cfg.methods.gpssm.smoother);
    cfg.methods.navigation = a.smoother.apply(cfg.methods.navigation);
    ensure_dir(&a.out)?;
    let rep = run_pipeline(&cfg, Some(&a.out))?;
    io::write_json(&a.out.join("config.json"), &cfg)?;
    for r in &rep.metrics.runs {
        match r.mae {
            Some(m) => println!("{} seed {}: MAE {m:.4} m", cfg.method, r.seed),
            None => println!("{} seed {}: {} positions (no truth)", cfg.method, r.seed, r.steps + 1),
        }
    }
    if let Some(m) = rep.metrics.median_mae {
        println!("{} median MAE {m:.4} m", cfg.method);
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::FitPathloss(a) => fit_pathloss_cmd(a),
        Command::Localize(a) => localize(a),
        Command::Pdr(a) => pdr(a),
        Command::TrainMeas(a) => train_meas(a),
        Command::TrainGpssm(a) => train_gpssm_cmd(a),
        Command::TrainLgssm(a) => train_lgssm_cmd(a),
        Command::Navigate(a) => navigate_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report(a),
    }
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain().map(|c| c.to_string()) {
        if !out.contains(&cause) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&cause);
        }
    }
    out
}

/// 1 for usage and configuration errors, 2 for data and numerical failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<NavError>()) {
        Some(e) if !e.is_data_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
