//! A decoder paired with an encoder, built from a serialisable spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, GaussianDecoder, GaussianDecoderConfig, GhdConfig, GhdDecoder};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::score::{ScoreConfig, ScoreContext, ScoreModel};
use crate::sde::SdeSchedule;
use crate::vae::{VaeConfig, VaeEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecoderSpec {
    Ghd(GhdConfig),
    Gaussian(GaussianDecoderConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Diffusion(ScoreConfig),
    Vae(VaeConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub decoder: DecoderSpec,
    pub encoder: EncoderSpec,
    pub schedule: SdeSchedule,
}

impl ModelSpec {
    pub fn data_dim(&self) -> usize {
        match &self.decoder {
            DecoderSpec::Ghd(c) => c.dim,
            DecoderSpec::Gaussian(c) => c.dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match &self.decoder {
            DecoderSpec::Ghd(c) => c.latent_dim(),
            DecoderSpec::Gaussian(c) => c.latent_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Encoder {
    Diffusion(ScoreModel),
    Vae(VaeEncoder),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub decoder: ParamVector,
    pub encoder: ParamVector,
}

impl ModelParams {
    pub fn all_finite(&self) -> bool {
        self.decoder.all_finite() && self.encoder.all_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub decoder: Decoder,
    pub encoder: Encoder,
}

impl Model {
    /// Build the networks with fresh parameters drawn from `rng`.
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<(Model, ModelParams)> {
        spec.schedule.validate()?;
        let mut dp = ParamVector::new();
        let decoder = match &spec.decoder {
            DecoderSpec::Ghd(c) => Decoder::Ghd(GhdDecoder::new(c.clone(), &mut dp, rng)?),
            DecoderSpec::Gaussian(c) => {
                Decoder::Gaussian(GaussianDecoder::new(c.clone(), &mut dp, rng)?)
            }
        };
        let mut ep = ParamVector::new();
        let (d, dz) = (decoder.data_dim(), decoder.latent_dim());
        let encoder = match &spec.encoder {
            EncoderSpec::Diffusion(c) => {
                Encoder::Diffusion(ScoreModel::new(c, dz, d, spec.schedule, &mut ep, rng)?)
            }
            EncoderSpec::Vae(c) => Encoder::Vae(VaeEncoder::new(c, d, dz, &mut ep, rng)?),
        };
        Ok((
            Model {
                spec: spec.clone(),
                decoder,
                encoder,
            },
            ModelParams {
                decoder: dp,
                encoder: ep,
            },
        ))
    }

    /// Rebuild a model around stored parameters, checking their layout.
    pub fn restore(spec: &ModelSpec, params: &ModelParams) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, fresh) = Model::build(spec, &mut rng)?;
        if !fresh.decoder.same_layout(&params.decoder) || !fresh.encoder.same_layout(&params.encoder)
        {
            return Err(Error::Shape(
                "stored parameters do not match the model spec".into(),
            ));
        }
        Ok(model)
    }

    pub fn check_energy(&self, energy: &dyn Energy) -> Result<()> {
        if energy.dim() != self.decoder.data_dim() {
            return Err(Error::Shape(alloc::format!(
                "target has dimension {}, model produces {}",
                energy.dim(),
                self.decoder.data_dim()
            )));
        }
        Ok(())
    }

    pub fn score_model(&self) -> Option<&ScoreModel> {
        match &self.encoder {
            Encoder::Diffusion(s) => Some(s),
            Encoder::Vae(_) => None,
        }
    }

    /// Frozen view used by the loss and the probability-flow ODE.
    pub fn score_context<'a>(
        &'a self,
        params: &'a ModelParams,
        energy: &'a dyn Energy,
    ) -> Result<ScoreContext<'a>> {
        let model = self
            .score_model()
            .ok_or_else(|| Error::Config("model has no diffusion encoder".into()))?;
        Ok(ScoreContext {
            model,
            score_params: &params.encoder,
            decoder: &self.decoder,
            decoder_params: &params.decoder,
            energy,
        })
    }
}
