//! Building energies from config and drawing reference samples.

use std::path::Path;

use edg_core::energy::{
    make_ising_relaxed, make_logistic_posterior, make_mog, make_ring_family, standardize, Energy,
    IsingRelaxed, IsingSpec, LogisticPosterior, Mixture, MixtureSpec, RingEnergy, RingVariant,
    StandardGaussian,
};
use edg_core::mcmc::{hmc_sample, mh_sample, HmcConfig};
use edg_core::Tensor;
use rand::Rng;

use crate::config::{MogPreset, ReferenceConfig, RingName, TargetSpec};
use crate::error::{RunError, RunResult};

pub enum Target {
    Gaussian(StandardGaussian),
    Mixture(Mixture),
    Ring(RingEnergy, RingName),
    Ising(IsingRelaxed),
    Logistic(LogisticPosterior),
}

impl Target {
    pub fn build(spec: &TargetSpec) -> RunResult<Target> {
        Ok(match spec {
            TargetSpec::Gaussian { dim } => {
                if *dim == 0 {
                    return Err(edg_core::Error::Config("dim must be positive".into()).into());
                }
                Target::Gaussian(StandardGaussian { dim: *dim })
            }
            TargetSpec::Mog { preset } => Target::Mixture(make_mog(match preset {
                MogPreset::Mog2 => MixtureSpec::mog2(),
                MogPreset::Mog2Imbalanced => MixtureSpec::mog2_imbalanced(),
                MogPreset::Mog6 => MixtureSpec::mog6(),
                MogPreset::Mog9 => MixtureSpec::mog9(),
            })?),
            TargetSpec::Mixture {
                centers,
                variances,
                weights,
            } => {
                let mut s = MixtureSpec::uniform(centers.clone(), variances.clone());
                if let Some(w) = weights {
                    s.weights = w.clone();
                }
                Target::Mixture(make_mog(s)?)
            }
            TargetSpec::Ring { variant } => {
                let v = match variant {
                    RingName::Ring => RingVariant::Ring,
                    RingName::Ring5 => RingVariant::Ring5,
                };
                Target::Ring(make_ring_family(v), *variant)
            }
            TargetSpec::Ising {
                side,
                temperature,
                alpha,
            } => Target::Ising(make_ising_relaxed(IsingSpec {
                side: *side,
                temperature: *temperature,
                alpha: *alpha,
            })?),
            TargetSpec::Logistic {
                data,
                prior_variance,
                standardize: std,
            } => {
                let (features, labels) = read_labelled_csv(data)?;
                let features = if *std { standardize(&features) } else { features };
                Target::Logistic(make_logistic_posterior(features, &labels, *prior_variance)?)
            }
        })
    }

    pub fn energy(&self) -> &dyn Energy {
        match self {
            Target::Gaussian(e) => e,
            Target::Mixture(e) => e,
            Target::Ring(e, _) => e,
            Target::Ising(e) => e,
            Target::Logistic(e) => e,
        }
    }

    /// `log Z` when it is known in closed form.
    pub fn exact_log_z(&self) -> Option<f64> {
        match self {
            Target::Gaussian(e) => Some(e.log_z()),
            Target::Mixture(_) => Some(0.0),
            _ => None,
        }
    }

    /// Reference samples: exact draws for mixtures and the Gaussian,
    /// random-walk MH for rings, HMC otherwise. Returns the method name.
    pub fn reference<R: Rng + ?Sized>(
        &self,
        cfg: &ReferenceConfig,
        rng: &mut R,
    ) -> RunResult<(Tensor, &'static str)> {
        let n = cfg.n;
        let mut mc = cfg.mcmc.clone();
        mc.chains = mc.chains.max(chains_for(&mc, n));
        let trim = |t: Tensor| t.select_rows(&(0..n).collect::<Vec<_>>());
        match self {
            Target::Gaussian(e) => Ok((edg_core::random::normal_tensor(n, e.dim, rng), "exact")),
            Target::Mixture(m) => Ok((m.sample(n, rng), "exact")),
            Target::Ring(e, name) => {
                let std = cfg.proposal_std.unwrap_or(match name {
                    RingName::Ring => 3.0,
                    RingName::Ring5 => 5.0,
                });
                let run = mh_sample(e, std, &mc, rng)?;
                log_acceptance("mh", run.acceptance_rate(), run.warnings.len());
                Ok((trim(run.samples), "mh"))
            }
            other => {
                let run = hmc_sample(other.energy(), &mc, rng)?;
                log_acceptance("hmc", run.acceptance_rate(), run.warnings.len());
                Ok((trim(run.samples), "hmc"))
            }
        }
    }
}

fn log_acceptance(method: &str, rate: f64, stuck: usize) {
    log::info!("{method} acceptance rate {rate:.3}");
    if stuck > 0 {
        log::warn!("{method}: {stuck} windows of {} proposals without acceptance", edg_core::mcmc::STUCK_WINDOW);
    }
}

/// Chains needed for `n` kept samples; the reference sampler never runs
/// fewer.
pub fn chains_for(cfg: &HmcConfig, n: usize) -> usize {
    n.div_ceil(cfg.kept_per_chain()).max(1)
}

/// Features and 0/1 labels from a CSV with a header row and a `label`
/// column; every other column is a feature.
pub fn read_labelled_csv(path: &Path) -> RunResult<(Tensor, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RunError::format(path, e))?;
    let headers = rdr.headers().map_err(|e| RunError::format(path, e))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| RunError::format(path, "no column named \"label\""))?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| RunError::format(path, e))?;
        let mut row = Vec::with_capacity(rec.len() - 1);
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                RunError::format(path, format!("row {}: {field:?} is not a number", line + 2))
            })?;
            if i == label_col {
                labels.push(v);
            } else {
                row.push(v);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(RunError::format(path, "no data rows"));
    }
    Ok((Tensor::from_rows(&rows), labels))
}
