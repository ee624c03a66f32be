//! File formats shared by the pipeline and the command-line tool.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};
use crate::pathloss::{DeviceGeometry, Region, RssScan};
use crate::pdr::{AccelSample, ControlInput, ImuLog, RotationSample};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| NavError::from(e).at_stage(path.display().to_string()))
}

/// Creates `path`, making missing parent directories first.
fn create(path: &Path) -> Result<File> {
    let located = |e: std::io::Error| NavError::from(e).at_stage(path.display().to_string());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(located)?;
    }
    File::create(path).map_err(located)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?))
        .map_err(|e| NavError::Parse(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| NavError::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    r.deserialize()
        .map(|row| row.map_err(|e| NavError::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// AP identity and mounting position; the part of an environment file that
/// real deployments know.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApPosition {
    pub ap_id: String,
    pub position: [f64; 3],
}

/// Site description read from an environment JSON. Simulator environments
/// parse as layouts; their extra fields are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub bounds: Region,
    pub aps: Vec<ApPosition>,
    #[serde(default)]
    pub device: DeviceGeometry,
}

/// One calibration reading: RSS of `ap_id` measured at `(x, y, z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub ap_id: String,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rss: f64,
}

pub fn read_calibration(path: &Path) -> Result<Vec<CalibrationRow>> {
    read_csv(path)
}

pub fn write_calibration(path: &Path, rows: &[CalibrationRow]) -> Result<()> {
    write_csv(path, rows)
}

/// Groups calibration rows into one scan per measurement position, in order of
/// first appearance. Scan timestamps are the group index.
pub fn calibration_scans(rows: &[CalibrationRow]) -> Vec<([f64; 3], RssScan)> {
    let mut out: Vec<([f64; 3], RssScan)> = Vec::new();
    for row in rows {
        let p = [row.x, row.y, row.z];
        let idx = match out.iter().position(|(q, _)| *q == p) {
            Some(i) => i,
            None => {
                out.push((
                    p,
                    RssScan {
                        timestamp: out.len() as f64,
                        readings: Default::default(),
                    },
                ));
                out.len() - 1
            }
        };
        out[idx].1.readings.insert(row.ap_id.clone(), row.rss);
    }
    out
}

pub fn read_scans(path: &Path) -> Result<Vec<RssScan>> {
    read_jsonl(path)
}

pub fn write_scans(path: &Path, scans: &[RssScan]) -> Result<()> {
    write_jsonl(path, scans)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImuRecord {
    Rotation(RotationSample),
    Accel(AccelSample),
}

/// Reads an IMU log whose lines are `{t, az}` or `{t, qw, qx, qy, qz}`.
pub fn read_imu(path: &Path) -> Result<ImuLog> {
    let mut log = ImuLog::default();
    for rec in read_jsonl::<ImuRecord>(path)? {
        match rec {
            ImuRecord::Rotation(r) => log.rotation.push(r),
            ImuRecord::Accel(a) => log.linear_accel.push(a),
        }
    }
    Ok(log)
}

/// Writes both streams, acceleration first.
pub fn write_imu(path: &Path, log: &ImuLog) -> Result<()> {
    let accel = log.linear_accel.iter().map(|a| ImuRecord::Accel(*a));
    let rot = log.rotation.iter().map(|r| ImuRecord::Rotation(*r));
    write_jsonl(path, accel.chain(rot))
}

#[derive(Serialize, Deserialize)]
struct ControlRow {
    t: usize,
    u_x: f64,
    u_y: f64,
    step_length: f64,
    heading: f64,
}

pub fn read_controls(path: &Path) -> Result<Vec<ControlInput>> {
    Ok(read_csv::<ControlRow>(path)?
        .into_iter()
        .map(|r| ControlInput {
            t: r.t,
            u: [r.u_x, r.u_y],
            step_length: r.step_length,
            heading: r.heading,
        })
        .collect())
}

pub fn write_controls(path: &Path, controls: &[ControlInput]) -> Result<()> {
    write_csv(
        path,
        controls.iter().map(|c| ControlRow {
            t: c.t,
            u_x: c.u[0],
            u_y: c.u[1],
            step_length: c.step_length,
            heading: c.heading,
        }),
    )
}

/// Position fixes `y_0..y_T`, controls `u_1..u_T` and optional ground truth
/// `x_0..x_T` for one walk.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub fixes: Vec<[f64; 2]>,
    pub controls: Vec<[f64; 2]>,
    pub truth: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    t: usize,
    y_x: f64,
    y_y: f64,
    u_x: f64,
    u_y: f64,
    x_true: Option<f64>,
    y_true: Option<f64>,
}

impl Trajectory {
    pub fn new(fixes: Vec<[f64; 2]>, controls: Vec<[f64; 2]>, truth: Option<Vec<[f64; 2]>>) -> Result<Self> {
        if fixes.is_empty() || controls.len() + 1 != fixes.len() {
            return Err(NavError::InputShape(format!(
                "trajectory needs T+1 fixes and T controls, got {} and {}",
                fixes.len(),
                controls.len()
            )));
        }
        if let Some(t) = &truth {
            if t.len() != fixes.len() {
                return Err(NavError::Alignment {
                    estimate: fixes.len(),
                    truth: t.len(),
                });
            }
        }
        Ok(Self { fixes, controls, truth })
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }
}

/// Reads a trajectory CSV (`t, y_x, y_y, u_x, u_y, x_true, y_true`). Row `t`
/// carries `u_t`, so row 0's control is ignored. Truth columns may be empty.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let rows: Vec<TrajectoryRow> = read_csv(path)?;
    for (i, r) in rows.iter().enumerate() {
        if r.t != i {
            return Err(NavError::Parse(format!("{}: row {i} has t = {}", path.display(), r.t)));
        }
    }
    let fixes = rows.iter().map(|r| [r.y_x, r.y_y]).collect();
    let controls = rows.iter().skip(1).map(|r| [r.u_x, r.u_y]).collect();
    let truth = rows
        .iter()
        .map(|r| r.x_true.zip(r.y_true).map(|(a, b)| [a, b]))
        .collect::<Option<Vec<_>>>();
    Trajectory::new(fixes, controls, truth)
}

pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    write_csv(
        path,
        traj.fixes.iter().enumerate().map(|(t, y)| {
            let u = if t == 0 { [0.0, 0.0] } else { traj.controls[t - 1] };
            let x = traj.truth.as_ref().map(|tr| tr[t]);
            TrajectoryRow {
                t,
                y_x: y[0],
                y_y: y[1],
                u_x: u[0],
                u_y: u[1],
                x_true: x.map(|p| p[0]),
                y_true: x.map(|p| p[1]),
            }
        }),
    )
}

#[derive(Serialize, Deserialize)]
struct EstimateRow {
    t: usize,
    x: f64,
    y: f64,
}

pub fn read_estimates(path: &Path) -> Result<Vec<[f64; 2]>> {
    Ok(read_csv::<EstimateRow>(path)?.into_iter().map(|r| [r.x, r.y]).collect())
}

pub fn write_estimates(path: &Path, estimates: &[[f64; 2]]) -> Result<()> {
    write_csv(path, estimates.iter().enumerate().map(|(t, p)| EstimateRow { t, x: p[0], y: p[1] }))
}

/// One point of a plot layer: `truth` and `estimate` rows are indexed by time
/// step, `aps` rows by AP id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub layer: String,
    pub id: String,
    pub x: f64,
    pub y: f64,
}

pub fn plot_rows(truth: Option<&[[f64; 2]]>, estimate: &[[f64; 2]], aps: &[ApPosition]) -> Vec<PlotRow> {
    let path = |layer: &str, pts: &[[f64; 2]]| {
        pts.iter()
            .enumerate()
            .map(|(t, p)| PlotRow {
                layer: layer.to_string(),
                id: t.to_string(),
                x: p[0],
                y: p[1],
            })
            .collect::<Vec<_>>()
    };
    let mut rows = truth.map(|t| path("truth", t)).unwrap_or_default();
    rows.extend(path("estimate", estimate));
    rows.extend(aps.iter().map(|a| PlotRow {
        layer: "aps".into(),
        id: a.ap_id.clone(),
        x: a.position[0],
        y: a.position[1],
    }));
    rows
}

pub fn read_plot(path: &Path) -> Result<Vec<PlotRow>> {
    read_csv(path)
}

pub fn write_plot(path: &Path, rows: &[PlotRow]) -> Result<()> {
    write_csv(path, rows)
}
