//! Whole-pipeline behaviour on simulated worlds.

use std::path::Path;

use gpssm_nav::gp_regression::GpTrainConfig;
use gpssm_nav::gpssm::{SmootherConfig, TrainConfig};
use gpssm_nav::io;
use gpssm_nav::pipeline::{run_pipeline, DataSource, LoopFiles, Method, MethodConfig, RunConfig, SimulatedScenario};
use gpssm_nav::pathloss::{DEFAULT_RSS_THRESHOLD, GRID_LEVELS};
use gpssm_nav::simulator::{default_bounds, gen_calibration, gen_environment, gen_scans, gen_walk, WalkSpec};

const THRESHOLD: f64 = DEFAULT_RSS_THRESHOLD;

/// Writes a world without RSS noise, shadowing or heading errors to `dir`
/// and returns a data source reading it back.
fn noiseless_world(dir: &Path, seed: u64, loops: usize) -> DataSource {
    let mut environment = gen_environment(seed, 26, default_bounds()).unwrap();
    for ap in &mut environment.aps {
        ap.sigma = 0.0;
    }
    let spec = WalkSpec {
        heading_bias: 0.0,
        heading_noise_sd: 0.0,
        ..WalkSpec::u_path()
    };
    let walks: Vec<_> = (0..loops as u64).map(|k| gen_walk(&environment, &spec, seed + k).unwrap()).collect();
    let scans = walks.iter().enumerate().map(|(k, w)| gen_scans(&environment, &w.truth, 1, THRESHOLD, k as u64)).collect();
    let calibration = gen_calibration(&environment, 400, THRESHOLD, seed);
    let world = SimulatedScenario {
        environment,
        calibration,
        walks,
        scans,
    };

    io::write_json(&dir.join("environment.json"), &world.layout()).unwrap();
    io::write_calibration(&dir.join("calibration.csv"), &world.calibration_rows()).unwrap();
    let loops = (0..loops)
        .map(|k| {
            let files = LoopFiles {
                scans: dir.join(format!("scans{k}.jsonl")),
                imu: dir.join(format!("imu{k}.jsonl")),
                truth: Some(dir.join(format!("truth{k}.csv"))),
            };
            io::write_scans(&files.scans, &world.scans[k]).unwrap();
            io::write_imu(&files.imu, &world.walks[k].imu).unwrap();
            io::write_estimates(files.truth.as_ref().unwrap(), &world.walks[k].truth).unwrap();
            files
        })
        .collect();
    DataSource::Files {
        environment: dir.join("environment.json"),
        calibration: dir.join("calibration.csv"),
        loops,
    }
}

fn median_mae(method: Method, data: DataSource, methods: MethodConfig, seeds: Vec<u64>) -> f64 {
    let config = RunConfig {
        data,
        methods,
        ..RunConfig::new(method, seeds)
    };
    run_pipeline(&config, None).unwrap().metrics.median_mae.unwrap()
}

#[test]
fn wifi_only_on_a_noiseless_world_is_within_two_grid_cells() {
    let dir = tempfile::tempdir().unwrap();
    let data = noiseless_world(dir.path(), 7, 1);
    let mae = median_mae(Method::WifiOnly, data.clone(), MethodConfig::default(), vec![0]);
    assert!(mae <= 0.2, "wifi-only MAE {mae}");
    let pdr = median_mae(Method::PdrOnly, data, MethodConfig::default(), vec![0]);
    assert!(pdr < 1e-9, "noiseless dead reckoning MAE {pdr}");
}

#[test]
fn gpssm_smoothing_matches_wifi_on_a_noiseless_world() {
    let dir = tempfile::tempdir().unwrap();
    let data = noiseless_world(dir.path(), 8, 2);
    let wifi = median_mae(Method::WifiOnly, data.clone(), MethodConfig::default(), vec![0]);
    let methods = MethodConfig {
        training_loops: 2,
        gpssm: TrainConfig {
            rounds: 5,
            num_inducing: 30,
            batch_size: 2,
            grad_steps: 2,
            learning_rate: 0.05,
            smoother: SmootherConfig {
                particles: 200,
                backward: 30,
                ess_threshold: 0.5,
            },
            ..TrainConfig::default()
        },
        navigation: SmootherConfig {
            particles: 500,
            backward: 50,
            ess_threshold: 0.5,
        },
        measurement: GpTrainConfig {
            restarts: 0,
            ..GpTrainConfig::default()
        },
        ..MethodConfig::default()
    };
    let gpssm = median_mae(Method::Gpssm, data, methods, vec![0]);
    // WiFi is already at grid resolution here, so equality is up to one cell.
    assert!(gpssm <= wifi + GRID_LEVELS[2], "gpssm MAE {gpssm} vs wifi-only {wifi}");
}

#[test]
fn drifting_dead_reckoning_is_worse_than_wifi_on_the_default_scenario() {
    let seeds = vec![0, 1, 2];
    let wifi = median_mae(Method::WifiOnly, DataSource::default(), MethodConfig::default(), seeds.clone());
    let pdr = median_mae(Method::PdrOnly, DataSource::default(), MethodConfig::default(), seeds);
    assert!(pdr > wifi, "pdr-only {pdr} vs wifi-only {wifi}");
}
