//! Adaptive Dormand–Prince 5(4) integration of a batch of ODEs that share
//! one step size.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rk45Config {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Initial step as a fraction of the interval.
    pub first_step: f64,
}

impl Default for Rk45Config {
    fn default() -> Self {
        Rk45Config {
            rtol: 1e-5,
            atol: 1e-5,
            max_steps: 100_000,
            first_step: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rk45Solution {
    pub y: Tensor,
    pub steps: usize,
    pub rejected: usize,
    /// Largest normalised error estimate among accepted steps (≤ 1).
    pub max_error: f64,
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// Fifth-order weights minus the embedded fourth-order ones.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

fn axpy(y: &Tensor, h: f64, ks: &[Tensor], coef: &[f64]) -> Tensor {
    let mut out = y.clone();
    for (k, &c) in ks.iter().zip(coef) {
        if c != 0.0 {
            for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
                *o += h * c * v;
            }
        }
    }
    out
}

/// Integrate `dy/dt = f(t, y)` from `t0` to `t1` (either direction) for
/// every row of `y0`. The error norm is the largest per-row RMS.
pub fn rk45<F>(mut f: F, t0: f64, t1: f64, y0: Tensor, cfg: &Rk45Config) -> Result<Rk45Solution>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(Rk45Solution {
            y: y0,
            steps: 0,
            rejected: 0,
            max_error: 0.0,
        });
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = cfg.first_step * span.abs();
    let mut k1 = f(t, &y)?;
    let mut steps = 0;
    let mut rejected = 0;
    let mut max_error: f64 = 0.0;
    let mut trajectory: Vec<(f64, Vec<f64>)> = Vec::new();
    let (rows, cols) = y.shape();
    while (t1 - t) * dir > 0.0 {
        if steps + rejected >= cfg.max_steps {
            return Err(Error::Solver {
                t,
                message: format!("step limit {} reached", cfg.max_steps),
                trajectory,
            });
        }
        if h < 1e-12 * (1.0 + t.abs()) {
            return Err(Error::Solver {
                t,
                message: format!("step size underflow (h = {h:e})"),
                trajectory,
            });
        }
        let last = (t + dir * h - t1) * dir >= 0.0;
        let hs = if last { (t1 - t).abs() } else { h };
        let step = dir * hs;
        let mut ks = Vec::with_capacity(7);
        ks.push(k1.clone());
        for s in 1..7 {
            let ys = axpy(&y, step, &ks, &A[s][..s]);
            ks.push(f(t + C[s] * step, &ys)?);
        }
        let y_new = axpy(&y, step, &ks[..6], &A[6][..6]);
        let err_t = axpy(&Tensor::zeros(rows, cols), step, &ks, &E);
        let mut err: f64 = 0.0;
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                let sc = cfg.atol + cfg.rtol * y.get(r, c).abs().max(y_new.get(r, c).abs());
                let e = err_t.get(r, c) / sc;
                acc += e * e;
            }
            err = err.max((acc / cols as f64).sqrt());
        }
        if !err.is_finite() || !y_new.all_finite() {
            rejected += 1;
            h = hs * 0.2;
            continue;
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + step };
            y = y_new;
            k1 = ks.swap_remove(6);
            steps += 1;
            max_error = max_error.max(err);
            if trajectory.len() < 64 {
                trajectory.push((t, y.row(0).to_vec()));
            }
            let fac = if err == 0.0 {
                10.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 10.0)
            };
            h = hs * fac;
        } else {
            rejected += 1;
            h = hs * (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
        }
    }
    Ok(Rk45Solution {
        y,
        steps,
        rejected,
        max_error,
    })
}
