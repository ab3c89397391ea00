//! The sub-variance-preserving linear diffusion on the latent space.
//!
//! Drift `f(z, t) = −½β(t) z`, diffusion `g(t)² = β(t)(1 − e^{−2∫β})`,
//! linear `β(t) = β_min + t(β_max − β_min)`.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::normal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
}

impl Default for SdeSchedule {
    fn default() -> Self {
        SdeSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
            horizon: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelCoeffs {
    /// Mean coefficient of `z_t | z_0`.
    pub m: f64,
    /// Standard deviation of `z_t | z_0`.
    pub sigma: f64,
    pub g2: f64,
    /// `exp(−∫₀ᵗ β)`.
    pub a: f64,
}

impl KernelCoeffs {
    /// Variance of the marginal of `z_t` when `z_0 ~ N(0, I)`.
    pub fn marginal_var(&self) -> f64 {
        self.m * self.m + self.sigma * self.sigma
    }
}

impl SdeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min < self.beta_max) {
            return Err(Error::Config(alloc::format!(
                "need 0 < beta_min < beta_max, got {} and {}",
                self.beta_min,
                self.beta_max
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    pub fn int_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= 0.0 && t <= self.horizon {
            Ok(())
        } else {
            Err(Error::Range {
                t,
                lo: 0.0,
                hi: self.horizon,
            })
        }
    }

    /// Coefficients without the range check, for callers that already
    /// validated `t`.
    pub fn coeffs_unchecked(&self, t: f64) -> KernelCoeffs {
        let ib = self.int_beta(t);
        let a = (-ib).exp();
        KernelCoeffs {
            m: (-0.5 * ib).exp(),
            sigma: -(-ib).exp_m1(),
            g2: self.beta(t) * -(-2.0 * ib).exp_m1(),
            a,
        }
    }

    pub fn coeffs(&self, t: f64) -> Result<KernelCoeffs> {
        self.check_time(t)?;
        Ok(self.coeffs_unchecked(t))
    }

    pub fn marginal_var(&self, t: f64) -> f64 {
        self.coeffs_unchecked(t).marginal_var()
    }
}

/// Reparameterised draw from `z_t | z_0`.
pub fn sample_zt<R: Rng + ?Sized>(
    schedule: &SdeSchedule,
    z0: &[f64],
    t: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let c = schedule.coeffs(t)?;
    Ok(z0
        .iter()
        .map(|&z| {
            let e = normal(rng);
            c.m * z + c.sigma * e
        })
        .collect())
}

/// Score of the `z_t` marginal under a standard normal `z_0`.
pub fn marginal_prior_score(schedule: &SdeSchedule, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let v = schedule.coeffs(t)?.marginal_var();
    Ok(z.iter().map(|&x| -x / v).collect())
}

/// Euler–Maruyama integration of the reverse-time SDE from `T` down to 0,
/// started from the terminal marginal. `score(z, t)` supplies `∇ log p(z_t)`.
pub fn simulate_reverse_em<R, F>(
    schedule: &SdeSchedule,
    mut score: F,
    dim: usize,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], f64) -> Vec<f64>,
{
    if steps == 0 {
        return Err(Error::Config(
            "reverse simulation needs at least one step".into(),
        ));
    }
    let t_end = schedule.horizon;
    let sd = schedule.marginal_var(t_end).sqrt();
    let mut z: Vec<f64> = (0..dim).map(|_| sd * normal(rng)).collect::<Vec<f64>>();
    let h = t_end / steps as f64;
    for k in 0..steps {
        let t = t_end - k as f64 * h;
        let beta = schedule.beta(t);
        let g2 = schedule.coeffs_unchecked(t).g2;
        let s = score(&z, t);
        let g = g2.sqrt();
        for (zi, si) in z.iter_mut().zip(&s) {
            let drift = -0.5 * beta * *zi - g2 * si;
            let e = normal(rng);
            *zi += -drift * h + g * h.sqrt() * e;
        }
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficients_at_the_ends() {
        let s = SdeSchedule::default();
        let c0 = s.coeffs(0.0).unwrap();
        assert_eq!((c0.m, c0.sigma, c0.a, c0.g2), (1.0, 0.0, 1.0, 0.0));
        let c1 = s.coeffs(1.0).unwrap();
        assert!((s.int_beta(1.0) - 10.05).abs() < 1e-12);
        assert!((c1.m - (-5.025f64).exp()).abs() < 1e-15);
        assert!((c1.m - 6.57e-3).abs() < 1e-4);
        assert!((c1.sigma - (1.0 - (-10.05f64).exp())).abs() < 1e-15);
        assert!((c1.g2 - 20.0 * (1.0 - (-20.1f64).exp())).abs() < 1e-12);
        assert!(matches!(s.coeffs(1.5), Err(Error::Range { .. })));
        assert!(matches!(s.coeffs(-0.1), Err(Error::Range { .. })));
    }
}
