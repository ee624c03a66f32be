//! Log-distance path-loss fitting and maximum-likelihood WiFi positioning.
//!
//! The received signal strength from one access point is modeled as
//! `r = A + 10·B·log10(d/d0) + e`, `e ~ N(0, σ²)`, where `d` is the 3-D
//! distance between the AP and the handset held at a fixed height.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NavError, Result};

/// Distances below this are clamped to avoid the log singularity at the AP.
pub const MIN_DISTANCE: f64 = 0.01;
/// Standard deviations below this are floored inside the likelihood; a
/// noiseless fit reports `σ = 0`.
pub const MIN_SIGMA: f64 = 0.01;
pub const DEFAULT_RSS_THRESHOLD: f64 = -85.0;

/// Coarse-to-fine cell sizes of the localization grid search (m).
pub const GRID_LEVELS: [f64; 3] = [2.0, 0.5, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApModel {
    pub ap_id: String,
    /// AP position `[x, y, z]` (m).
    pub position: [f64; 3],
    /// RSS at the reference distance (dBm).
    pub a: f64,
    /// Path-loss slope per decade of `10·log10(d/d0)`.
    pub b: f64,
    /// Residual standard deviation (dB).
    pub sigma: f64,
    /// Reference distance (m).
    pub d0: f64,
}

impl ApModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) {
            return Err(NavError::InvalidArguments(format!("reference distance must be positive, got {}", self.d0)));
        }
        if !(self.sigma >= 0.0) || ![self.a, self.b, self.sigma].iter().all(|v| v.is_finite()) {
            return Err(NavError::InvalidArguments(format!("invalid path-loss parameters for AP {}", self.ap_id)));
        }
        Ok(())
    }

    pub fn distance_to(&self, x: [f64; 2], height: f64) -> f64 {
        let dx = x[0] - self.position[0];
        let dy = x[1] - self.position[1];
        let dz = height - self.position[2];
        (dx * dx + dy * dy + dz * dz).sqrt().max(MIN_DISTANCE)
    }

    /// Mean RSS at a given distance.
    pub fn mean_rss(&self, distance: f64) -> f64 {
        self.a + 10.0 * self.b * (distance.max(MIN_DISTANCE) / self.d0).log10()
    }

    fn effective_sigma(&self) -> f64 {
        self.sigma.max(MIN_SIGMA)
    }
}

/// One WiFi scan: AP id → RSS (dBm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RssScan {
    #[serde(rename = "t")]
    pub timestamp: f64,
    pub readings: BTreeMap<String, f64>,
}

impl RssScan {
    /// Drops readings below the collection threshold.
    pub fn filtered(&self, threshold: f64) -> RssScan {
        RssScan {
            timestamp: self.timestamp,
            readings: self
                .readings
                .iter()
                .filter(|(_, r)| **r >= threshold)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceGeometry {
    /// Handset height above the floor (m).
    pub height: f64,
}

impl Default for DeviceGeometry {
    fn default() -> Self {
        Self { height: 1.2 }
    }
}

/// Axis-aligned 2-D search region.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        if !(max[0] > min[0] && max[1] > min[1]) {
            return Err(NavError::InvalidArguments(format!("degenerate region {min:?}..{max:?}")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0..2).all(|d| x[d] >= self.min[d] && x[d] <= self.max[d])
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Ordinary least squares of RSS on `10·log10(d/d0)` for one AP.
///
/// Multiple scans at the same position enter as independent samples.
pub fn fit_pathloss(ap_id: &str, ap_position: [f64; 3], samples: &[([f64; 3], f64)], d0: f64) -> Result<ApModel> {
    if !(d0 > 0.0) {
        return Err(NavError::InvalidArguments(format!("reference distance must be positive, got {d0}")));
    }
    if samples.len() < 2 {
        return Err(NavError::RankDeficient(format!("AP {ap_id}: need at least two samples, got {}", samples.len())));
    }
    let mut s = Vec::with_capacity(samples.len());
    for (p, _) in samples {
        let d = ((p[0] - ap_position[0]).powi(2) + (p[1] - ap_position[1]).powi(2) + (p[2] - ap_position[2]).powi(2)).sqrt();
        if d == 0.0 {
            return Err(NavError::InvalidSample(format!("AP {ap_id}: sample taken at the AP position")));
        }
        s.push(10.0 * (d / d0).log10());
    }
    let n = samples.len() as f64;
    let s_mean = s.iter().sum::<f64>() / n;
    let r_mean = samples.iter().map(|(_, r)| r).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (si, (_, r)) in s.iter().zip(samples) {
        sxx += (si - s_mean).powi(2);
        sxy += (si - s_mean) * (r - r_mean);
    }
    let spread = s.iter().map(|v| v.abs()).fold(1.0, f64::max);
    if sxx <= 1e-20 * spread * spread * n {
        return Err(NavError::RankDeficient(format!("AP {ap_id}: all samples at the same distance")));
    }
    let b = sxy / sxx;
    let a = r_mean - b * s_mean;
    let rss: f64 = s
        .iter()
        .zip(samples)
        .map(|(si, (_, r))| (r - a - b * si).powi(2))
        .sum();
    let sigma = if samples.len() > 2 { (rss / (n - 2.0)).sqrt() } else { 0.0 };
    Ok(ApModel {
        ap_id: ap_id.to_string(),
        position: ap_position,
        a,
        b,
        sigma,
        d0,
    })
}

fn resolve<'a>(scan: &RssScan, aps: &'a BTreeMap<String, ApModel>) -> Result<Vec<(&'a ApModel, f64)>> {
    scan.readings
        .iter()
        .map(|(id, r)| {
            aps.get(id)
                .map(|ap| (ap, *r))
                .ok_or_else(|| NavError::InvalidArguments(format!("no path-loss model for AP {id}")))
        })
        .collect()
}

fn loglik_resolved(x: [f64; 2], terms: &[(&ApModel, f64)], height: f64) -> f64 {
    const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
    terms
        .iter()
        .map(|(ap, r)| {
            let sigma = ap.effective_sigma();
            let z = (r - ap.mean_rss(ap.distance_to(x, height))) / sigma;
            -HALF_LN_2PI - sigma.ln() - 0.5 * z * z
        })
        .sum()
}

/// Log-likelihood of a scan at planar position `x`.
pub fn rss_loglik(x: [f64; 2], scan: &RssScan, aps: &BTreeMap<String, ApModel>, geom: &DeviceGeometry) -> Result<f64> {
    let terms = resolve(scan, aps)?;
    Ok(loglik_resolved(x, &terms, geom.height))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WifiFix {
    pub estimate: [f64; 2],
    pub loglik: f64,
}

fn axis_nodes(lo: f64, hi: f64, center: Option<(f64, f64)>, step: f64) -> Vec<f64> {
    match center {
        None => {
            let n = ((hi - lo) / step + 1e-9).floor() as usize;
            let mut v: Vec<f64> = (0..=n).map(|i| lo + i as f64 * step).collect();
            if hi - v[v.len() - 1] > 1e-9 {
                v.push(hi);
            }
            v
        }
        Some((c, half)) => {
            let k = (half / step).round() as i64;
            (-k..=k)
                .map(|i| c + i as f64 * step)
                .filter(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12)
                .map(|v| v.clamp(lo, hi))
                .collect()
        }
    }
}

/// Maximum-likelihood position by coarse-to-fine grid search over `region`.
/// Ties resolve to the lexicographically smallest `(x, y)`.
pub fn wifi_localize(scan: &RssScan, aps: &BTreeMap<String, ApModel>, geom: &DeviceGeometry, region: &Region) -> Result<WifiFix> {
    if scan.readings.is_empty() {
        return Err(NavError::NoMeasurement);
    }
    if scan.readings.len() < 3 {
        log::warn!("scan at t={} has only {} APs; position is poorly constrained", scan.timestamp, scan.readings.len());
    }
    let terms = resolve(scan, aps)?;
    let mut best: Option<WifiFix> = None;
    let mut prev_step: Option<f64> = None;
    for step in GRID_LEVELS {
        let centers = match (best, prev_step) {
            (Some(b), Some(ps)) => (Some((b.estimate[0], ps)), Some((b.estimate[1], ps))),
            _ => (None, None),
        };
        let xs = axis_nodes(region.min[0], region.max[0], centers.0, step);
        let ys = axis_nodes(region.min[1], region.max[1], centers.1, step);
        for &x in &xs {
            for &y in &ys {
                let ll = loglik_resolved([x, y], &terms, geom.height);
                if best.map_or(true, |b| ll > b.loglik) {
                    best = Some(WifiFix { estimate: [x, y], loglik: ll });
                }
            }
        }
        prev_step = Some(step);
    }
    best.ok_or(NavError::NoMeasurement)
}
