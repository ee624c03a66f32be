//! Pedestrian dead reckoning: step events from vertical linear acceleration,
//! headings from the rotation-vector quaternion, and per-step displacement
//! controls `u = L·(sin ψ, cos ψ)`.
//!
//! World frame is east-north-up; headings are measured clockwise from north.
//! The handset is held flat and front-facing, so its pointing axis is body +y.

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelSample {
    pub t: f64,
    /// Vertical linear acceleration (m/s²).
    pub az: f64,
}

/// Rotation-vector sample as a unit quaternion `(w, x, y, z)` mapping the
/// device frame into the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationSample {
    pub t: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl RotationSample {
    pub fn from_heading(t: f64, heading: f64) -> Self {
        let q = quaternion_from_heading(heading);
        Self { t, qw: q[0], qx: q[1], qy: q[2], qz: q[3] }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        [self.qw, self.qx, self.qy, self.qz]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuLog {
    pub linear_accel: Vec<AccelSample>,
    pub rotation: Vec<RotationSample>,
}

impl ImuLog {
    pub fn validate(&self) -> Result<()> {
        check_increasing(self.linear_accel.iter().map(|s| s.t), "acceleration")?;
        check_increasing(self.rotation.iter().map(|s| s.t), "rotation")?;
        for s in &self.rotation {
            let n = s.quaternion().iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-3 {
                return Err(NavError::InvalidArguments(format!("quaternion at t={} has norm {n}", s.t)));
            }
        }
        Ok(())
    }
}

fn check_increasing(ts: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for t in ts {
        if !(t > prev) {
            return Err(NavError::InvalidArguments(format!("{what} timestamps not strictly increasing at t={t}")));
        }
        prev = t;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Step index, starting at 1.
    pub t: usize,
    pub u: [f64; 2],
    pub step_length: f64,
    /// Clockwise from north (rad).
    pub heading: f64,
}

impl ControlInput {
    pub fn new(t: usize, step_length: f64, heading: f64) -> Self {
        Self {
            t,
            u: [step_length * heading.sin(), step_length * heading.cos()],
            step_length,
            heading,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepDetectorConfig {
    /// Centered rolling-mean window (s).
    pub window: f64,
    /// Minimum peak prominence (m/s²).
    pub min_prominence: f64,
    /// Minimum spacing between accepted steps (s).
    pub min_interval: f64,
}

impl Default for StepDetectorConfig {
    fn default() -> Self {
        Self {
            window: 0.15,
            min_prominence: 0.8,
            min_interval: 0.3,
        }
    }
}

pub const DEFAULT_STEP_LENGTH: f64 = 0.7;

fn rolling_mean(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in values.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Indices of local maxima; flat tops report their middle sample.
fn local_maxima(s: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let n = s.len();
    let mut i = 1;
    while i + 1 < n {
        if s[i - 1] < s[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && s[ahead] == s[i] {
                ahead += 1;
            }
            if s[ahead] < s[i] {
                peaks.push((i + ahead - 1) / 2);
                i = ahead;
            }
        }
        i += 1;
    }
    peaks
}

fn prominence(s: &[f64], p: usize) -> f64 {
    let h = s[p];
    let mut left_min = h;
    for i in (0..p).rev() {
        if s[i] > h {
            break;
        }
        left_min = left_min.min(s[i]);
    }
    let mut right_min = h;
    for v in &s[p + 1..] {
        if *v > h {
            break;
        }
        right_min = right_min.min(*v);
    }
    h - left_min.max(right_min)
}

/// Step timestamps: rolling mean, local maxima, prominence gate, then a
/// minimum-interval filter that keeps the taller of any two close peaks.
pub fn detect_steps(accel: &[AccelSample], cfg: &StepDetectorConfig) -> Result<Vec<f64>> {
    if accel.is_empty() {
        return Err(NavError::NoData);
    }
    check_increasing(accel.iter().map(|s| s.t), "acceleration")?;
    if accel.len() < 3 {
        return Ok(Vec::new());
    }
    let mut dts: Vec<f64> = accel.windows(2).map(|w| w[1].t - w[0].t).collect();
    dts.sort_by(f64::total_cmp);
    let dt = dts[dts.len() / 2];
    let span = (cfg.window / dt).round().max(1.0) as usize;
    if accel.len() < span {
        return Err(NavError::InvalidArguments(format!(
            "series of {} samples is shorter than the {span}-sample window",
            accel.len()
        )));
    }
    let raw: Vec<f64> = accel.iter().map(|s| s.az).collect();
    let smooth = rolling_mean(&raw, span / 2);

    let candidates: Vec<usize> = local_maxima(&smooth)
        .into_iter()
        .filter(|&p| prominence(&smooth, p) >= cfg.min_prominence)
        .collect();

    // Tallest first; ties go to the earlier peak.
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| smooth[candidates[b]].total_cmp(&smooth[candidates[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; candidates.len()];
    for &i in &order {
        if !keep[i] {
            continue;
        }
        let ti = accel[candidates[i]].t;
        for (j, k) in keep.iter_mut().enumerate() {
            if j != i && *k && (accel[candidates[j]].t - ti).abs() < cfg.min_interval {
                *k = false;
            }
        }
    }
    Ok(candidates
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(p, _)| accel[*p].t)
        .collect())
}

/// Quaternion `(w, x, y, z)` of a yaw that points body +y at `heading`
/// (clockwise from north), i.e. a rotation by `-heading` about world up.
pub fn quaternion_from_heading(heading: f64) -> [f64; 4] {
    let half = -0.5 * heading;
    [half.cos(), 0.0, 0.0, half.sin()]
}

/// Heading of the body +y axis under rotation `q`, wrapped to `(-π, π]`.
pub fn heading_from_quaternion(q: [f64; 4]) -> f64 {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let east = 2.0 * (x * y - w * z);
    let north = 1.0 - 2.0 * (x * x + z * z);
    wrap_angle(east.atan2(north))
}

/// Wraps to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Heading from the rotation sample nearest in time to `t`.
pub fn heading_at(rotation: &[RotationSample], t: f64) -> Result<f64> {
    let (first, last) = match (rotation.first(), rotation.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(NavError::NoData),
    };
    if !(t >= first && t <= last) {
        return Err(NavError::OutOfRange { t, start: first, end: last });
    }
    let idx = rotation.partition_point(|s| s.t < t);
    let nearest = if idx == 0 {
        0
    } else if idx == rotation.len() {
        idx - 1
    } else if (rotation[idx].t - t) < (t - rotation[idx - 1].t) {
        idx
    } else {
        idx - 1
    };
    Ok(heading_from_quaternion(rotation[nearest].quaternion()))
}

pub fn build_controls(steps: &[f64], rotation: &[RotationSample], step_length: f64) -> Result<Vec<ControlInput>> {
    if steps.is_empty() {
        return Err(NavError::NoData);
    }
    if !(step_length > 0.0) {
        return Err(NavError::InvalidArguments(format!("step length must be positive, got {step_length}")));
    }
    steps
        .iter()
        .enumerate()
        .map(|(i, t)| Ok(ControlInput::new(i + 1, step_length, heading_at(rotation, *t)?)))
        .collect()
}

/// `x_t = x_{t-1} + u_t`; returns `T + 1` positions starting at `x0`.
pub fn dead_reckon(x0: [f64; 2], controls: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(controls.len() + 1);
    let mut x = x0;
    out.push(x);
    for u in controls {
        x = [x[0] + u[0], x[1] + u[1]];
        out.push(x);
    }
    out
}
