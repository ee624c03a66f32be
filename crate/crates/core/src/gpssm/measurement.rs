use crate::gp_regression::GpMeasurementModel;
use crate::linalg::log_normal_1d;
use crate::pathloss::Region;

/// `log p(y | x)` for the measurement model used by the smoother.
pub trait MeasurementLikelihood: Send + Sync {
    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64;
}

/// Exact GP predictive density with independent outputs.
impl MeasurementLikelihood for GpMeasurementModel {
    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        let (mean, var) = self.predict_diag(x);
        (0..y.len()).map(|d| log_normal_1d(y[d], mean[d], var[d])).sum()
    }
}

/// `y = x + r`, `r ~ N(0, diag(noise_var))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianMeasurement {
    pub noise_var: Vec<f64>,
}

impl MeasurementLikelihood for LinearGaussianMeasurement {
    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..y.len()).map(|d| log_normal_1d(y[d], x[d], self.noise_var[d])).sum()
    }
}

/// Measurement GP predictive moments tabulated on a regular 2-D grid and
/// bilinearly interpolated. Positions outside the grid use the exact model.
#[derive(Clone, Debug)]
pub struct GridMeasurementDensity {
    model: GpMeasurementModel,
    origin: [f64; 2],
    step: f64,
    nx: usize,
    ny: usize,
    outputs: usize,
    /// Per node: means then variances, `2·outputs` values.
    table: Vec<f64>,
}

pub const DEFAULT_GRID_STEP: f64 = 0.5;
pub const DEFAULT_GRID_MARGIN: f64 = 15.0;

impl GridMeasurementDensity {
    pub fn new(model: GpMeasurementModel, region: &Region, step: f64, margin: f64) -> Self {
        assert!(model.input_dim() == 2, "grid density needs 2-D positions");
        let origin = [region.min[0] - margin, region.min[1] - margin];
        let nx = ((region.width() + 2.0 * margin) / step).ceil() as usize + 1;
        let ny = ((region.height() + 2.0 * margin) / step).ceil() as usize + 1;
        let outputs = model.output_dim();
        let mut table = Vec::with_capacity(nx * ny * 2 * outputs);
        for j in 0..ny {
            for i in 0..nx {
                let x = [origin[0] + i as f64 * step, origin[1] + j as f64 * step];
                let (mean, var) = model.predict_diag(&x);
                table.extend(mean.iter());
                table.extend(var.iter());
            }
        }
        Self {
            model,
            origin,
            step,
            nx,
            ny,
            outputs,
            table,
        }
    }

    pub fn model(&self) -> &GpMeasurementModel {
        &self.model
    }

    fn node(&self, i: usize, j: usize) -> &[f64] {
        let w = 2 * self.outputs;
        let at = (j * self.nx + i) * w;
        &self.table[at..at + w]
    }

    /// Interpolated `(mean, variance)` of output `d`, or `None` off-grid.
    pub fn moments(&self, x: &[f64], d: usize) -> Option<(f64, f64)> {
        let fx = (x[0] - self.origin[0]) / self.step;
        let fy = (x[1] - self.origin[1]) / self.step;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        if i + 1 >= self.nx || j + 1 >= self.ny {
            return None;
        }
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let lerp = |k: usize| {
            let v00 = self.node(i, j)[k];
            let v10 = self.node(i + 1, j)[k];
            let v01 = self.node(i, j + 1)[k];
            let v11 = self.node(i + 1, j + 1)[k];
            (1.0 - ty) * ((1.0 - tx) * v00 + tx * v10) + ty * ((1.0 - tx) * v01 + tx * v11)
        };
        Some((lerp(d), lerp(self.outputs + d)))
    }
}

impl MeasurementLikelihood for GridMeasurementDensity {
    fn log_likelihood(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut total = 0.0;
        for d in 0..y.len() {
            match self.moments(x, d) {
                Some((m, v)) => total += log_normal_1d(y[d], m, v),
                None => return self.model.log_likelihood(x, y),
            }
        }
        total
    }
}
