//! Acceptance suite. Every criterion runs at its stated tolerance and time
//! budget and prints one PASS/FAIL line; the test fails if any criterion
//! does.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use gpssm_nav::gp_regression::{GpMeasurementModel, GpTrainConfig};
use gpssm_nav::gpssm::{
    apply_natural_update, elbo_hyper_gradient, elbo_terms, gaussian_kl, model_log_params, set_model_log_params,
    SmootherConfig, TrainConfig,
};
use gpssm_nav::kernel::{kernel_matrix, MeanSpec, SeArdHyper};
use gpssm_nav::lgssm::{em_fit, kalman_filter, rts_smoother, EmOptions};
use gpssm_nav::pathloss::fit_pathloss;
use gpssm_nav::pdr::{dead_reckon, detect_steps, StepDetectorConfig};
use gpssm_nav::pipeline::{
    compare_methods, estimates_file, median, plot_file, run_pipeline, Comparison, DataSource, FrontEndConfig, Method,
    MethodConfig, RunConfig, METRICS_FILE,
};
use gpssm_nav::simulator::{default_bounds, gen_environment, gen_walk, WalkSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Suite {
    failures: Vec<u32>,
    lines: usize,
}

impl Suite {
    /// Runs one criterion, catching panics so that later criteria still run.
    fn run<T>(&mut self, id: u32, name: &str, budget: Duration, check: impl FnOnce() -> Result<(T, String), String>) -> Option<T> {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let (value, passed, detail) = match result {
            Ok((v, d)) if in_time => (Some(v), true, d),
            Ok((v, d)) => (Some(v), false, format!("{d}; over the time budget")),
            Err(e) => (None, false, e),
        };
        if !passed {
            self.failures.push(id);
        }
        let status = if passed { "PASS" } else { "FAIL" };
        let line = format!(
            "{status} [{id:>2}] {name} ({:.1}s of {}s): {detail}",
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        // Written to the process stdout so the line shows without --nocapture.
        let mut out = std::io::stdout();
        if self.lines == 0 {
            // Start below the harness's own "test acceptance ..." prefix.
            writeln!(out).unwrap();
        }
        self.lines += 1;
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        value
    }
}

/// GPSSM settings used for the method comparison.
fn comparison_config() -> MethodConfig {
    MethodConfig {
        gpssm: TrainConfig {
            rounds: 20,
            smoother: SmootherConfig {
                particles: 200,
                backward: 50,
                ess_threshold: 0.5,
            },
            batch_size: 2,
            grad_steps: 3,
            learning_rate: 0.05,
            num_inducing: 50,
            ..TrainConfig::default()
        },
        navigation: SmootherConfig {
            particles: 1000,
            backward: 100,
            ess_threshold: 0.5,
        },
        measurement: GpTrainConfig {
            restarts: 1,
            ..GpTrainConfig::default()
        },
        ..MethodConfig::default()
    }
}

const LOOP_COUNTS: [usize; 3] = [1, 3, 5];

fn gpssm_mae(c: &Comparison, k: usize) -> f64 {
    c.gpssm.iter().find(|(n, _)| *n == k).map(|(_, m)| *m).unwrap()
}

struct Medians {
    wifi: f64,
    pdr: f64,
    lgssm: f64,
    gpssm: Vec<f64>,
}

fn method_ordering() -> Result<(Medians, String), String> {
    let methods = comparison_config();
    let comparisons = (0..5u64)
        .map(|seed| compare_methods(&DataSource::default(), &FrontEndConfig::default(), &methods, &LOOP_COUNTS, seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let med = |f: &dyn Fn(&Comparison) -> f64| median(&comparisons.iter().map(f).collect::<Vec<_>>()).unwrap();
    let m = Medians {
        wifi: med(&|c| c.wifi),
        pdr: med(&|c| c.pdr),
        lgssm: med(&|c| c.lgssm),
        gpssm: LOOP_COUNTS.iter().map(|&k| med(&|c| gpssm_mae(c, k))).collect(),
    };
    let (g1, g5) = (m.gpssm[0], m.gpssm[2]);
    let detail = format!(
        "median MAE GPSSM(5) {g5:.3}, GPSSM(1) {g1:.3}, LGSSM {:.3}, WiFi {:.3}, PDR {:.3}; GPSSM(5) is {:.1}% below LGSSM",
        m.lgssm,
        m.wifi,
        m.pdr,
        100.0 * (1.0 - g5 / m.lgssm)
    );
    let ok = g5 <= g1 && g1 <= m.lgssm && m.lgssm <= m.wifi.max(m.pdr) && g5 <= 0.9 * m.lgssm;
    if ok {
        Ok((m, detail))
    } else {
        Err(detail)
    }
}

fn more_loops_do_not_hurt(m: &Medians) -> Outcome {
    let detail = format!(
        "median MAE over training loops {:?}: {:.3}, {:.3}, {:.3}",
        LOOP_COUNTS, m.gpssm[0], m.gpssm[1], m.gpssm[2]
    );
    ensure(m.gpssm.windows(2).all(|w| w[1] <= w[0]), || detail.clone())?;
    Ok(detail)
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-4;

fn gradients_match_finite_differences() -> Outcome {
    let mut rng = rng(1003);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for instance in 0..10 {
        let n = rng.gen_range(2..=3);
        let x = random_matrix(n, 2, &mut rng);
        let y = DMatrix::from_fn(n, 2, |i, j| x[(i, j)] + 0.5 * gauss(&mut rng));
        let p: Vec<f64> = (0..8)
            .map(|i| if i % 4 == 3 { rng.gen_range(-2.0..-0.5) } else { rng.gen_range(-0.3..0.5) })
            .collect();
        let build = |q: &[f64]| {
            let hyper = (0..2).map(|d| SeArdHyper::from_log_params(&q[d * 4..d * 4 + 3])).collect();
            let noise = (0..2).map(|d| q[d * 4 + 3].exp()).collect();
            GpMeasurementModel::new(x.clone(), y.clone(), hyper, noise, MeanSpec::LinearIdentity).unwrap()
        };
        let analytic = build(&p).lml_gradient().flatten();
        let mut f = |q: &[f64]| build(q).log_marginal_likelihood();
        for (i, a) in analytic.iter().enumerate() {
            let e = rel_err(*a, central_diff(&mut f, &p, i, FD_STEP), FD_FLOOR);
            ensure(e <= FD_TOL, || format!("LML instance {instance} coordinate {i}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
        checked += 1;
    }
    let meas = tiny_measurement();
    for instance in 0..10 {
        let m = rng.gen_range(1..=3);
        let steps = rng.gen_range(1..=3);
        let mut model = tiny_gpssm(m, &mut rng);
        let (seq, cloud) = tiny_data(steps, 4, &mut rng);
        let data = [(&seq, &cloud)];
        let analytic = elbo_hyper_gradient(&model, &data, 1.0).map_err(|e| e.to_string())?.flatten(true);
        let p = model_log_params(&model, true);
        let mut f = |q: &[f64]| {
            set_model_log_params(&mut model, q, true).unwrap();
            elbo_terms(&model, &data, &meas, 1.0).unwrap().total()
        };
        for (i, a) in analytic.iter().enumerate() {
            let e = rel_err(*a, central_diff(&mut f, &p, i, FD_STEP), FD_FLOOR);
            ensure(e <= FD_TOL, || format!("ELBO instance {instance} coordinate {i}: relative error {e:e}"))?;
            worst = worst.max(e);
        }
        checked += 1;
    }
    Ok(format!("{checked} instances, worst relative error {worst:.2e}"))
}

const ORACLE_TOL: f64 = 1e-8;

fn max_abs(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

fn oracles_agree() -> Outcome {
    let mut rng = rng(1004);
    let mut worst: f64 = 0.0;
    let mut track = |what: &str, err: f64| -> Result<(), String> {
        worst = worst.max(err);
        ensure(err <= ORACLE_TOL, || format!("{what}: error {err:e}"))
    };

    // GP prediction: joint over five training targets and the test point per output.
    for _ in 0..5 {
        let n = 5;
        let x = random_matrix(n, 2, &mut rng) * 2.0;
        let y = DMatrix::from_fn(n, 2, |i, j| x[(i, j)] + gauss(&mut rng));
        let hyper: Vec<SeArdHyper> = (0..2)
            .map(|_| SeArdHyper::new(rng.gen_range(0.5..2.0), vec![rng.gen_range(0.7..2.0), rng.gen_range(0.7..2.0)]).unwrap())
            .collect();
        let noise = vec![rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)];
        let model = GpMeasurementModel::new(x.clone(), y.clone(), hyper.clone(), noise.clone(), MeanSpec::LinearIdentity)
            .map_err(|e| e.to_string())?;
        let x_star = [gauss(&mut rng), gauss(&mut rng)];
        let (mean, cov) = model.posterior_predict(&x_star).map_err(|e| e.to_string())?;
        let inputs = x.clone().insert_row(n, 0.0);
        let inputs = DMatrix::from_fn(n + 1, 2, |i, j| if i == n { x_star[j] } else { inputs[(i, j)] });
        let size = n + 1;
        let mut jm = DVector::zeros(2 * size);
        let mut jc = DMatrix::zeros(2 * size, 2 * size);
        for d in 0..2 {
            let k = kernel_matrix(&inputs, &inputs, &hyper[d]).unwrap() + DMatrix::identity(size, size) * noise[d];
            jc.view_mut((d * size, d * size), (size, size)).copy_from(&k);
            for i in 0..size {
                jm[d * size + i] = inputs[(i, d)];
            }
        }
        let observed: Vec<usize> = (0..2).flat_map(|d| (0..n).map(move |i| d * size + i)).collect();
        let values = DVector::from_iterator(2 * n, (0..2).flat_map(|d| y.column(d).iter().copied().collect::<Vec<_>>()));
        let (om, oc) = condition(&jm, &jc, &[n, size + n], &observed, &values);
        track("GP predictive mean", (&mean - &om).amax())?;
        track("GP predictive covariance", max_abs(&cov, &oc))?;
    }

    // Kalman filter and RTS smoother: joint over x_0..x_3 and y_1..y_3.
    for _ in 0..5 {
        let params = random_lgssm(&mut rng);
        let steps = 3;
        let us: Vec<DVector<f64>> = (0..steps).map(|_| DVector::from_fn(2, |_, _| gauss(&mut rng))).collect();
        let ys = simulate_lgssm(&params, &us, &mut rng);
        let joint = LgssmJoint::new(&params, &us);
        let y_all = LgssmJoint::stacked(&ys);
        let filter = kalman_filter(&params, &ys, &us).map_err(|e| e.to_string())?;
        let smooth = rts_smoother(&params, &filter).map_err(|e| e.to_string())?;
        let y_idx = joint.y_upto(steps);
        let y_mean = DVector::from_fn(y_idx.len(), |i, _| joint.mean[y_idx[i]]);
        let (_, y_cov) = condition(&joint.mean, &joint.cov, &y_idx, &[], &y_all);
        track("log-likelihood", (filter.log_likelihood - dense_log_pdf(&y_all, &y_mean, &y_cov)).abs())?;
        for t in 0..=steps {
            let obs = joint.y_upto(t);
            let vals = y_all.rows(0, obs.len()).into_owned();
            let (m, c) = condition(&joint.mean, &joint.cov, &joint.x_idx(t), &obs, &vals);
            track("filtered mean", (&filter.filtered[t].mean - m).amax())?;
            track("filtered covariance", max_abs(&filter.filtered[t].cov, &c))?;
            let (m, c) = condition(&joint.mean, &joint.cov, &joint.x_idx(t), &y_idx, &y_all);
            track("smoothed mean", (&smooth.smoothed[t].mean - m).amax())?;
            track("smoothed covariance", max_abs(&smooth.smoothed[t].cov, &c))?;
        }
    }

    // Gaussian KL up to twelve dimensions.
    for n in 1..=12 {
        let q = random_gaussian(n, &mut rng);
        let p = random_gaussian(n, &mut rng);
        let kl = gaussian_kl(&q, &p).map_err(|e| e.to_string())?;
        track("KL", (kl - dense_kl(&q, &p)).abs())?;
    }
    Ok(format!("worst absolute error {worst:.2e}"))
}

fn smoother_matches_rts() -> Outcome {
    let cfg = SmootherConfig {
        particles: 5000,
        backward: 500,
        ess_threshold: 0.5,
    };
    let z = smoother_deviation_from_rts(1005, 10, &cfg, 20);
    let worst = z.iter().copied().fold(0.0, f64::max);
    let detail = format!("S=5000, T=10: worst deviation {worst:.2} standard errors over {} means", z.len());
    ensure(worst <= 3.0, || detail.clone())?;
    Ok(detail)
}

fn em_is_monotone() -> Outcome {
    let mut smallest = f64::INFINITY;
    for seed in 0..5 {
        let mut rng = rng(1006 + seed);
        let truth = random_lgssm(&mut rng);
        let us: Vec<DVector<f64>> = (0..200).map(|_| DVector::from_fn(2, |_, _| gauss(&mut rng))).collect();
        let ys = simulate_lgssm(&truth, &us, &mut rng);
        let init = random_lgssm(&mut rng);
        let opts = EmOptions {
            iterations: 30,
            learn_dynamics: true,
            learn_measurement_matrix: true,
            learn_initial: true,
            monotonicity_tol: None,
            ..EmOptions::default()
        };
        let fit = em_fit(&ys, &us, &init, &opts).map_err(|e| e.to_string())?;
        for (i, w) in fit.log_likelihood.windows(2).enumerate() {
            let change = w[1] - w[0];
            smallest = smallest.min(change);
            ensure(change >= -1e-8, || format!("dataset {seed} iteration {i}: {} -> {}", w[0], w[1]))?;
        }
    }
    Ok(format!("5 datasets, smallest per-iteration change {smallest:.2e}"))
}

fn pathloss_recovery() -> Outcome {
    let exact: Vec<([f64; 3], f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|d: &f64| ([*d, 0.0, 0.0], -40.0 - 20.0 * d.log10())).collect();
    let m = fit_pathloss("ap", [0.0; 3], &exact, 1.0).map_err(|e| e.to_string())?;
    let err = (m.a + 40.0).abs().max((m.b + 2.0).abs()).max(m.sigma.abs());
    ensure(err <= 1e-9, || format!("noiseless fit error {err:e}"))?;

    let mut rng = rng(1007);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let ap: [f64; 3] = [5.0, 5.0, 3.0];
    let samples: Vec<([f64; 3], f64)> = (0..500)
        .map(|_| {
            let p: [f64; 3] = [rng.gen_range(-20.0..30.0), rng.gen_range(-20.0..30.0), 1.2];
            let d = ((p[0] - ap[0]).powi(2) + (p[1] - ap[1]).powi(2) + (p[2] - ap[2]).powi(2)).sqrt();
            (p, -40.0 - 20.0 * d.log10() + noise.sample(&mut rng))
        })
        .collect();
    let n = fit_pathloss("ap", ap, &samples, 1.0).map_err(|e| e.to_string())?;
    let detail = format!("noiseless error {err:.1e}; noisy A {:.3}, B {:.3}, sigma {:.3}", n.a, n.b, n.sigma);
    ensure((n.a + 40.0).abs() <= 1.0 && (n.b + 2.0).abs() <= 0.15 && (n.sigma - 2.0).abs() <= 0.4, || detail.clone())?;
    Ok(detail)
}

fn pdr_round_trip() -> Outcome {
    let env = gen_environment(1008, 26, default_bounds()).map_err(|e| e.to_string())?;
    let spec = WalkSpec {
        heading_bias: 0.0,
        heading_noise_sd: 0.0,
        ..WalkSpec::u_path()
    };
    let walk = gen_walk(&env, &spec, 1).map_err(|e| e.to_string())?;
    ensure(dead_reckon(walk.truth[0], &walk.control_vectors()) == walk.truth, || {
        "dead-reckoned track differs from truth".into()
    })?;
    let noisy = gen_walk(&env, &WalkSpec::u_path(), 2).map_err(|e| e.to_string())?;
    let steps = detect_steps(&noisy.imu.linear_accel, &StepDetectorConfig::default()).map_err(|e| e.to_string())?;
    let detail = format!("exact dead reckoning over {} steps; detected {} steps", walk.steps(), steps.len());
    ensure((steps.len() as i64 - 147).abs() <= 1, || detail.clone())?;
    Ok(detail)
}

fn natural_update_never_lowers_surrogate() -> Outcome {
    let mut rng = rng(1009);
    let meas = tiny_measurement();
    let mut smallest = f64::INFINITY;
    for instance in 0..10 {
        let m = rng.gen_range(1..=3);
        let steps = rng.gen_range(1..=3);
        let mut model = tiny_gpssm(m, &mut rng);
        let (seq, cloud) = tiny_data(steps, 3, &mut rng);
        let data = [(&seq, &cloud)];
        let before = elbo_terms(&model, &data, &meas, 1.0).map_err(|e| e.to_string())?.total();
        apply_natural_update(&mut model, &data, 1.0, 1.0).map_err(|e| e.to_string())?;
        let after = elbo_terms(&model, &data, &meas, 1.0).map_err(|e| e.to_string())?.total();
        smallest = smallest.min(after - before);
        ensure(after >= before - 1e-6, || format!("instance {instance}: {before} -> {after}"))?;
    }
    Ok(format!("10 instances, smallest change {smallest:.3e}"))
}

fn reports_are_reproducible() -> Outcome {
    let small = MethodConfig {
        training_loops: 2,
        gpssm: TrainConfig {
            rounds: 3,
            num_inducing: 20,
            smoother: SmootherConfig {
                particles: 100,
                backward: 10,
                ess_threshold: 0.5,
            },
            ..TrainConfig::default()
        },
        navigation: SmootherConfig {
            particles: 200,
            backward: 20,
            ess_threshold: 0.5,
        },
        measurement: GpTrainConfig {
            restarts: 0,
            ..GpTrainConfig::default()
        },
        ..MethodConfig::default()
    };
    let seeds = vec![0, 1];
    let mut compared = 0;
    for method in [Method::Lgssm, Method::Gpssm] {
        let config = RunConfig {
            methods: small.clone(),
            ..RunConfig::new(method, seeds.clone())
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_pipeline(&config, Some(a.path())).map_err(|e| e.to_string())?;
        run_pipeline(&config, Some(b.path())).map_err(|e| e.to_string())?;
        let mut files = vec![METRICS_FILE.to_string()];
        for &s in &seeds {
            for f in [estimates_file(Path::new(""), s), plot_file(Path::new(""), s)] {
                files.push(f.display().to_string());
            }
        }
        for f in files {
            let (x, y) = (std::fs::read(a.path().join(&f)), std::fs::read(b.path().join(&f)));
            let (x, y) = (x.map_err(|e| format!("{f}: {e}"))?, y.map_err(|e| format!("{f}: {e}"))?);
            ensure(x == y, || format!("{method}: {f} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} files byte-identical across reruns"))
}

fn unit<T>(r: Result<T, String>) -> Result<((), T), String> {
    r.map(|d| ((), d))
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut suite = Suite {
        failures: Vec::new(),
        lines: 0,
    };
    let medians = suite.run(1, "method ordering on 5 seeds", secs(600), method_ordering);
    suite.run(2, "GPSSM error non-increasing in training loops", secs(600), || match &medians {
        Some(m) => unit(more_loops_do_not_hurt(m)),
        None => Err("method comparison did not complete".into()),
    });
    suite.run(3, "analytic gradients against finite differences", secs(30), || unit(gradients_match_finite_differences()));
    suite.run(4, "GP, Kalman and KL against dense oracles", secs(10), || unit(oracles_agree()));
    suite.run(5, "particle smoother against RTS", secs(60), || unit(smoother_matches_rts()));
    suite.run(6, "EM log-likelihood monotone", secs(30), || unit(em_is_monotone()));
    suite.run(7, "path-loss recovery", secs(5), || unit(pathloss_recovery()));
    suite.run(8, "PDR round trip and step count", secs(5), || unit(pdr_round_trip()));
    suite.run(9, "full natural update never lowers the surrogate", secs(30), || {
        unit(natural_update_never_lowers_surrogate())
    });
    suite.run(10, "byte-identical reports across reruns", secs(600), || unit(reports_are_reproducible()));
    assert!(suite.failures.is_empty(), "failed criteria: {:?}", suite.failures);
}
