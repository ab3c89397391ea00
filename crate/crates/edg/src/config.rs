//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use edg_core::mcmc::HmcConfig;
use edg_core::model::{DecoderSpec, EncoderSpec, ModelSpec};
use edg_core::reweight::OdeConfig;
use edg_core::sde::SdeSchedule;
use edg_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RunError, RunResult};
use crate::targets::Target;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MogPreset {
    Mog2,
    Mog2Imbalanced,
    Mog6,
    Mog9,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RingName {
    Ring,
    Ring5,
}

fn default_prior_variance() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetSpec {
    /// `U = ½‖x‖²`.
    Gaussian { dim: usize },
    Mog { preset: MogPreset },
    /// Explicit mixture; equal weights when `weights` is omitted.
    Mixture {
        centers: Vec<Vec<f64>>,
        variances: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Ring { variant: RingName },
    /// Continuous relaxation of a periodic `side × side` lattice.
    Ising {
        side: usize,
        temperature: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    /// Logistic-regression posterior; `data` is a CSV with a `label` column.
    Logistic {
        data: PathBuf,
        #[serde(default = "default_prior_variance")]
        prior_variance: f64,
        #[serde(default)]
        standardize: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub decoder: DecoderSpec,
    pub encoder: EncoderSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mmd_samples: usize,
    pub mmd_repeats: usize,
    pub hist_bins: usize,
    /// `[[x_min, x_max], [y_min, y_max]]`.
    pub hist_bounds: [[f64; 2]; 2],
    /// Rows decoded (and weighed) at a time.
    pub chunk: usize,
    pub ode: OdeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mmd_samples: 5000,
            mmd_repeats: 20,
            hist_bins: 100,
            hist_bounds: [[-8.0, 8.0], [-8.0, 8.0]],
            chunk: 1024,
            ode: OdeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub n: usize,
    pub mcmc: HmcConfig,
    /// Random-walk step for ring targets; 3 for Ring and 5 for Ring5 when
    /// unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proposal_std: Option<f64>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig {
            n: 100_000,
            mcmc: HmcConfig {
                chains: 100,
                ..HmcConfig::default()
            },
            proposal_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub target: TargetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub sde: SdeSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> RunResult<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig =
            serde_path_to_error::deserialize(de).map_err(|e| RunError::Config {
                path: path.to_path_buf(),
                message: format!("{}: {}", e.path(), e.inner().message().trim()),
            })?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The training seed follows the experiment seed.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment configs serialise to TOML")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            decoder: self.model.decoder.clone(),
            encoder: self.model.encoder.clone(),
            schedule: self.sde,
        }
    }

    /// Check every section and build the target once.
    pub fn validate(&self, path: &Path) -> RunResult<Target> {
        let err = |key: &str, e: &dyn std::fmt::Display| RunError::Config {
            path: path.to_path_buf(),
            message: format!("{key}: {e}"),
        };
        let target = Target::build(&self.target).map_err(|e| match e {
            RunError::Core(c) => err("target", &c),
            other => other,
        })?;
        self.sde.validate().map_err(|e| err("sde", &e))?;
        self.train.validate().map_err(|e| err("train", &e))?;
        self.eval.ode.validate().map_err(|e| err("eval.ode", &e))?;
        if self.eval.mmd_samples < 2 || self.eval.mmd_repeats == 0 || self.eval.chunk == 0 {
            return Err(err(
                "eval",
                &"mmd_samples ≥ 2, mmd_repeats ≥ 1 and chunk ≥ 1 are required",
            ));
        }
        if self.eval.hist_bins == 0 || self.eval.hist_bounds.iter().any(|b| !(b[0] < b[1])) {
            return Err(err("eval", &"histogram needs bins ≥ 1 and min < max bounds"));
        }
        self.reference
            .mcmc
            .validate()
            .map_err(|e| err("reference.mcmc", &e))?;
        if let DecoderSpec::Ghd(c) = &self.model.decoder {
            c.validate().map_err(|e| err("model.decoder", &e))?;
        }
        let d = self.model_spec().data_dim();
        if d != target.energy().dim() {
            return Err(err(
                "model.decoder.dim",
                &format!("is {d} but the target has dimension {}", target.energy().dim()),
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(err("output_dir", &"must not be empty"));
        }
        Ok(target)
    }

    /// SHA-256 over everything that affects results (the output directory
    /// does not).
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("experiment configs serialise to JSON");
        hex::encode(Sha256::digest(&bytes))
    }
}
