//! Reference samplers: vanilla HMC and random-walk Metropolis–Hastings.
//!
//! Chains are independent. Chain `c` runs on its own ChaCha8 stream `c`
//! under a key drawn once from the caller's RNG, so results do not depend
//! on the order the chains are run in.

use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::random::normal;
use crate::tensor::Tensor;

/// Run length after which a chain that accepted nothing is reported.
pub const STUCK_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub total_steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    /// Keep every `thin`-th post-burn-in state.
    pub thin: usize,
    /// Chains start from `N(0, init_std² I)`.
    pub init_std: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            leapfrog_steps: 10,
            total_steps: 2000,
            burn_in: 1000,
            chains: 1,
            thin: 1,
            init_std: 1.0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("mcmc.step_size must be positive".into()));
        }
        if self.burn_in >= self.total_steps {
            return Err(Error::Config(
                "mcmc.burn_in must be smaller than mcmc.total_steps".into(),
            ));
        }
        if self.leapfrog_steps == 0 || self.chains == 0 || self.thin == 0 {
            return Err(Error::Config(
                "mcmc.leapfrog_steps, mcmc.chains and mcmc.thin must be at least 1".into(),
            ));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("mcmc.init_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.total_steps - self.burn_in).div_ceil(self.thin)
    }
}

/// A chain went `STUCK_WINDOW` consecutive proposals without accepting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StuckChain {
    pub chain: usize,
    /// Step at which the window closed.
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McmcRun {
    /// Post-burn-in states, chain-major.
    pub samples: Tensor,
    /// Acceptance rate of each chain over all steps.
    pub acceptance: Vec<f64>,
    pub warnings: Vec<StuckChain>,
}

impl McmcRun {
    pub fn acceptance_rate(&self) -> f64 {
        self.acceptance.iter().sum::<f64>() / self.acceptance.len() as f64
    }
}

struct ChainOutput {
    kept: Vec<f64>,
    accepted: usize,
    warnings: Vec<StuckChain>,
}

fn run_chains<F>(energy: &dyn Energy, cfg: &HmcConfig, key: u64, mut step: F) -> Result<McmcRun>
where
    F: FnMut(&mut Vec<f64>, &mut f64, &mut ChaCha8Rng) -> bool,
{
    let d = energy.dim();
    let mut out = Vec::with_capacity(cfg.chains);
    for c in 0..cfg.chains {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(c as u64);
        let mut x: Vec<f64> = (0..d).map(|_| cfg.init_std * normal(&mut rng)).collect();
        let mut u = energy.energy(&x);
        if !u.is_finite() {
            return Err(Error::Estimation(alloc::format!(
                "chain {c} starts at a point of non-finite energy"
            )));
        }
        let mut chain = ChainOutput {
            kept: Vec::with_capacity(cfg.kept_per_chain() * d),
            accepted: 0,
            warnings: Vec::new(),
        };
        let mut since_accept = 0;
        for s in 0..cfg.total_steps {
            if step(&mut x, &mut u, &mut rng) {
                chain.accepted += 1;
                since_accept = 0;
            } else {
                since_accept += 1;
                if since_accept == STUCK_WINDOW {
                    log::warn!("chain {c} accepted nothing in {STUCK_WINDOW} proposals (step {s})");
                    chain.warnings.push(StuckChain { chain: c, step: s });
                    since_accept = 0;
                }
            }
            if s >= cfg.burn_in && (s - cfg.burn_in) % cfg.thin == 0 {
                chain.kept.extend_from_slice(&x);
            }
        }
        out.push(chain);
    }
    let kept = cfg.kept_per_chain();
    let mut data = Vec::with_capacity(cfg.chains * kept * d);
    let mut acceptance = Vec::with_capacity(cfg.chains);
    let mut warnings = Vec::new();
    for ch in out {
        data.extend(ch.kept);
        acceptance.push(ch.accepted as f64 / cfg.total_steps as f64);
        warnings.extend(ch.warnings);
    }
    Ok(McmcRun {
        samples: Tensor::from_vec(cfg.chains * kept, d, data),
        acceptance,
        warnings,
    })
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    // NaN compares false and is rejected
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Leapfrog HMC with unit mass and a full momentum refresh each step.
pub fn hmc_sample<R: Rng + ?Sized>(
    energy: &dyn Energy,
    config: &HmcConfig,
    rng: &mut R,
) -> Result<McmcRun> {
    config.validate()?;
    let eps = config.step_size;
    let d = energy.dim();
    run_chains(energy, config, rng.next_u64(), |x, u, rng| {
        let p0: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let mut q = x.clone();
        let mut p = p0.clone();
        let mut gq = energy.grad(&q);
        for (pi, gi) in p.iter_mut().zip(&gq) {
            *pi -= 0.5 * eps * gi;
        }
        for l in 0..config.leapfrog_steps {
            for (qi, pi) in q.iter_mut().zip(&p) {
                *qi += eps * pi;
            }
            gq = energy.grad(&q);
            let w = if l + 1 == config.leapfrog_steps { 0.5 } else { 1.0 };
            for (pi, gi) in p.iter_mut().zip(&gq) {
                *pi -= w * eps * gi;
            }
        }
        let u_new = energy.energy(&q);
        let kin = |v: &[f64]| 0.5 * v.iter().map(|a| a * a).sum::<f64>();
        let log_ratio = *u + kin(&p0) - u_new - kin(&p);
        if accept(log_ratio, rng) {
            *x = q;
            *u = u_new;
            true
        } else {
            false
        }
    })
}

/// Random-walk MH with an isotropic `N(0, proposal_std² I)` step.
pub fn mh_sample<R: Rng + ?Sized>(
    energy: &dyn Energy,
    proposal_std: f64,
    config: &HmcConfig,
    rng: &mut R,
) -> Result<McmcRun> {
    config.validate()?;
    if !(proposal_std > 0.0 && proposal_std.is_finite()) {
        return Err(Error::Config("proposal_std must be positive".into()));
    }
    run_chains(energy, config, rng.next_u64(), |x, u, rng| {
        let y: Vec<f64> = x.iter().map(|v| v + proposal_std * normal(rng)).collect();
        let u_new = energy.energy(&y);
        if accept(*u - u_new, rng) {
            *x = y;
            *u = u_new;
            true
        } else {
            false
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::StandardGaussian;

    #[test]
    fn rejects_bad_configs() {
        let e = StandardGaussian { dim: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = HmcConfig {
            burn_in: 2000,
            ..Default::default()
        };
        assert!(hmc_sample(&e, &bad, &mut rng).is_err());
        assert!(mh_sample(&e, 0.0, &HmcConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn tiny_steps_accept_everything() {
        let e = StandardGaussian { dim: 3 };
        let cfg = HmcConfig {
            step_size: 1e-4,
            leapfrog_steps: 100,
            total_steps: 200,
            burn_in: 100,
            chains: 2,
            ..Default::default()
        };
        let run = hmc_sample(&e, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(run.samples.shape(), (200, 3));
        assert!(run.acceptance_rate() > 0.999);
    }

    #[test]
    fn stuck_chain_is_reported() {
        let e = StandardGaussian { dim: 2 };
        let cfg = HmcConfig {
            total_steps: 250,
            burn_in: 0,
            ..Default::default()
        };
        let run = mh_sample(&e, 1e6, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(run.warnings.len(), 2);
        assert_eq!(run.warnings[0].step, 99);
    }
}
