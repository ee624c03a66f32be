//! Nonlinear conjugate gradient (Polak–Ribière+) with a strong-Wolfe line
//! search. Minimizes; callers negate objectives they want to maximize.

use crate::error::{NavError, Result};

#[derive(Clone, Debug)]
pub struct CgOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    /// Stop once an accepted step lowers the objective by less than this
    /// fraction of its magnitude.
    pub f_tol: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-5,
            max_iter: 500,
            c1: 1e-4,
            c2: 0.1,
            f_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

struct Eval {
    value: f64,
    grad: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn step(x: &[f64], p: &[f64], alpha: f64) -> Vec<f64> {
    x.iter().zip(p).map(|(a, b)| a + alpha * b).collect()
}

/// Objective evaluator: returns `None` (or non-finite values) where the
/// objective is undefined, which the line search treats as "step too long".
pub fn minimize_cg<F>(mut f: F, x0: Vec<f64>, opts: &CgOptions) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut eval = |x: &[f64]| -> Option<Eval> {
        let (value, grad) = f(x)?;
        if value.is_finite() && grad.iter().all(|g| g.is_finite()) {
            Some(Eval { value, grad })
        } else {
            None
        }
    };

    let mut x = x0;
    let mut cur = eval(&x).ok_or_else(|| NavError::OptimizationDiverged {
        iterations: 0,
        last: x.clone(),
    })?;
    let n = x.len();
    let mut trace = vec![cur.value];
    let mut p: Vec<f64> = cur.grad.iter().map(|g| -g).collect();
    let mut prev_alpha: Option<f64> = None;
    let mut prev_slope = 0.0;
    let mut since_restart = 0usize;

    for iter in 0..opts.max_iter {
        let gnorm = norm(&cur.grad);
        if gnorm < opts.grad_tol {
            return Ok(CgOutcome {
                x,
                value: cur.value,
                grad_norm: gnorm,
                iterations: iter,
                converged: true,
                trace,
            });
        }
        let mut slope = dot(&cur.grad, &p);
        if slope >= 0.0 {
            p = cur.grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
            since_restart = 0;
        }
        let alpha0 = match prev_alpha {
            Some(a) => (a * prev_slope / slope).clamp(1e-10, 1e10),
            None => 1.0 / gnorm.max(1.0),
        };

        let found = line_search(&mut eval, &x, &p, &cur, slope, alpha0, opts);
        let (alpha, next) = match found {
            Some(v) => v,
            None if since_restart > 0 => {
                // Retry along steepest descent before giving up.
                p = cur.grad.iter().map(|g| -g).collect();
                since_restart = 0;
                prev_alpha = None;
                continue;
            }
            None => {
                // No decrease is possible along the gradient: numerically stationary.
                return Ok(CgOutcome {
                    x,
                    value: cur.value,
                    grad_norm: gnorm,
                    iterations: iter,
                    converged: false,
                    trace,
                });
            }
        };

        x = step(&x, &p, alpha);
        let stalled = cur.value - next.value <= opts.f_tol * cur.value.abs().max(next.value.abs()).max(1.0);
        if stalled {
            trace.push(next.value);
            let grad_norm = norm(&next.grad);
            return Ok(CgOutcome {
                x,
                value: next.value,
                grad_norm,
                iterations: iter + 1,
                converged: grad_norm < opts.grad_tol,
                trace,
            });
        }
        let y: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let beta = (dot(&next.grad, &y) / (gnorm * gnorm)).max(0.0);
        since_restart += 1;
        let restart = since_restart >= n.max(1);
        p = next
            .grad
            .iter()
            .zip(&p)
            .map(|(g, d)| -g + if restart { 0.0 } else { beta * d })
            .collect();
        if restart {
            since_restart = 0;
        }
        prev_alpha = Some(alpha);
        prev_slope = slope;
        cur = next;
        trace.push(cur.value);
    }

    let gnorm = norm(&cur.grad);
    Ok(CgOutcome {
        x,
        value: cur.value,
        grad_norm: gnorm,
        iterations: opts.max_iter,
        converged: gnorm < opts.grad_tol,
        trace,
    })
}

fn line_search<E>(
    eval: &mut E,
    x: &[f64],
    p: &[f64],
    start: &Eval,
    slope0: f64,
    alpha_init: f64,
    opts: &CgOptions,
) -> Option<(f64, Eval)>
where
    E: FnMut(&[f64]) -> Option<Eval>,
{
    let f0 = start.value;
    let armijo = |a: f64, v: f64| v <= f0 + opts.c1 * a * slope0;
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut slope_prev = slope0;
    let mut alpha = alpha_init;
    let mut alpha_max = f64::INFINITY;

    for i in 0..60 {
        let Some(e) = eval(&step(x, p, alpha)) else {
            // Undefined objective: shrink toward the last good point.
            alpha_max = alpha;
            alpha = alpha_prev + 0.5 * (alpha - alpha_prev);
            if alpha - alpha_prev < 1e-16 {
                return None;
            }
            continue;
        };
        let s = dot(&e.grad, p);
        if !armijo(alpha, e.value) || (i > 0 && e.value >= f_prev) {
            return zoom(eval, x, p, f0, slope0, (alpha_prev, f_prev, slope_prev), (alpha, e.value), opts);
        }
        if s.abs() <= -opts.c2 * slope0 {
            return Some((alpha, e));
        }
        if s >= 0.0 {
            return zoom(eval, x, p, f0, slope0, (alpha, e.value, s), (alpha_prev, f_prev), opts);
        }
        alpha_prev = alpha;
        f_prev = e.value;
        slope_prev = s;
        alpha = if alpha_max.is_finite() {
            0.5 * (alpha + alpha_max)
        } else {
            2.0 * alpha
        };
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    x: &[f64],
    p: &[f64],
    f0: f64,
    slope0: f64,
    lo: (f64, f64, f64),
    hi: (f64, f64),
    opts: &CgOptions,
) -> Option<(f64, Eval)>
where
    E: FnMut(&[f64]) -> Option<Eval>,
{
    let (mut a_lo, mut f_lo, mut s_lo) = lo;
    let (mut a_hi, mut f_hi) = hi;
    let mut best: Option<(f64, Eval)> = None;
    for _ in 0..40 {
        let width = a_hi - a_lo;
        if width.abs() < 1e-14 * a_lo.abs().max(1e-10) {
            break;
        }
        // Quadratic interpolation safeguarded into the middle 80% of the bracket.
        let denom = 2.0 * (f_hi - f_lo - s_lo * width);
        let mut a = if f_hi.is_finite() && denom > 0.0 {
            a_lo - s_lo * width * width / denom
        } else {
            a_lo + 0.5 * width
        };
        let (lo_b, hi_b) = if width > 0.0 {
            (a_lo + 0.1 * width, a_hi - 0.1 * width)
        } else {
            (a_hi - 0.1 * width, a_lo + 0.1 * width)
        };
        if !(a >= lo_b.min(hi_b) && a <= lo_b.max(hi_b)) {
            a = a_lo + 0.5 * width;
        }
        let Some(e) = eval(&step(x, p, a)) else {
            a_hi = a;
            f_hi = f64::INFINITY;
            continue;
        };
        if e.value > f0 + opts.c1 * a * slope0 || e.value >= f_lo {
            a_hi = a;
            f_hi = e.value;
        } else {
            let s = dot(&e.grad, p);
            if s.abs() <= -opts.c2 * slope0 {
                return Some((a, e));
            }
            if s * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = e.value;
            s_lo = s;
            best = Some((a, e));
        }
    }
    // Accept the best sufficient-decrease point even if curvature failed.
    best.filter(|(_, e)| e.value < f0)
}
