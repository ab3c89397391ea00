//! Adam, the training loop and the resumable training state.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, BatchDraws, LossVariant, ProposalConfig, TimeProposal};
use crate::model::{Encoder, Model, ModelParams, ModelSpec};
use crate::params::ParamVector;
use crate::random::normal_tensor;
use crate::vae::vae_loss_on_draws;

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub loss_variant: LossVariant,
    pub grad_clip: Option<f64>,
    pub proposal: ProposalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            loss_variant: LossVariant::Denoising,
            grad_clip: Some(10.0),
            proposal: ProposalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_betas must lie in [0, 1) and adam_eps > 0".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        self.proposal.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &ParamVector,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if !params.same_layout(grads) || state.m.len() != params.len() {
        return Err(Error::Shape("parameter, gradient and state sizes differ".into()));
    }
    if !grads.all_finite() {
        return Err(Error::Training {
            message: "non-finite gradient".into(),
            sample: None,
        });
    }
    let (b1, b2) = config.adam_betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = config.learning_rate;
    for (i, (p, &g)) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .enumerate()
    {
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        *p -= lr * (m / c1) / ((v / c2).sqrt() + config.adam_eps);
    }
    Ok(())
}

/// Scale all gradients jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut ParamVector], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.values().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.values_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub recon: f64,
    pub score_term: f64,
    pub total: f64,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub adam_decoder: AdamState,
    pub adam_encoder: AdamState,
    pub proposal: Option<TimeProposal>,
    pub step: usize,
    pub rng: RngState,
    pub config_digest: alloc::string::String,
}

pub struct Trainer {
    pub model: Model,
    pub params: ModelParams,
    pub config: TrainConfig,
    pub adam_decoder: AdamState,
    pub adam_encoder: AdamState,
    pub proposal: Option<TimeProposal>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    failures: usize,
}

impl Trainer {
    /// Fresh model and optimiser state seeded from `config.seed`.
    pub fn new(spec: &ModelSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = Model::build(spec, &mut rng)?;
        let proposal = match model.encoder {
            Encoder::Diffusion(_) => Some(TimeProposal::new(
                config.proposal,
                spec.schedule,
                config.loss_variant,
            )?),
            Encoder::Vae(_) => None,
        };
        Ok(Trainer {
            adam_decoder: AdamState::new(params.decoder.len()),
            adam_encoder: AdamState::new(params.encoder.len()),
            model,
            params,
            config,
            proposal,
            step: 0,
            rng,
            failures: 0,
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        cp.config.validate()?;
        let model = Model::restore(&cp.spec, &cp.params)?;
        Ok(Trainer {
            model,
            params: cp.params,
            config: cp.config,
            adam_decoder: cp.adam_decoder,
            adam_encoder: cp.adam_encoder,
            proposal: cp.proposal,
            step: cp.step,
            rng: cp.rng.restore(),
            failures: 0,
        })
    }

    pub fn checkpoint(&self, config_digest: &str) -> Checkpoint {
        Checkpoint {
            spec: self.model.spec.clone(),
            config: self.config.clone(),
            params: self.params.clone(),
            adam_decoder: self.adam_decoder.clone(),
            adam_encoder: self.adam_encoder.clone(),
            proposal: self.proposal.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            config_digest: config_digest.into(),
        }
    }

    fn loss_and_grads(
        &mut self,
        energy: &dyn Energy,
    ) -> Result<(LossRecord, ParamVector, ParamVector, Option<Vec<(f64, f64)>>)> {
        let n = self.config.batch_size;
        let (d, dz) = (self.model.decoder.data_dim(), self.model.decoder.latent_dim());
        match &self.model.encoder {
            Encoder::Diffusion(_) => {
                let proposal = self.proposal.as_ref().expect("diffusion trainer has a proposal");
                let draws = BatchDraws::sample(proposal, dz, d, n, &mut self.rng);
                let ctx = self.model.score_context(&self.params, energy)?;
                let out = loss_and_gradients(&ctx, self.config.loss_variant, &draws)?;
                let b = out.breakdown;
                let rec = LossRecord {
                    step: self.step,
                    recon: b.recon,
                    score_term: b.score_term,
                    total: b.total,
                };
                Ok((rec, out.decoder, out.score, Some(b.per_sample_t)))
            }
            Encoder::Vae(enc) => {
                let z0 = normal_tensor(n, dz, &mut self.rng);
                let noise = normal_tensor(n, d, &mut self.rng);
                let out = vae_loss_on_draws(
                    &self.model.decoder,
                    &self.params.decoder,
                    enc,
                    &self.params.encoder,
                    energy,
                    &z0,
                    &noise,
                )?;
                let rec = LossRecord {
                    step: self.step,
                    recon: out.total,
                    score_term: 0.0,
                    total: out.total,
                };
                Ok((rec, out.decoder_grad, out.encoder_grad, None))
            }
        }
    }

    /// One optimisation step. A non-finite loss or gradient skips the
    /// update and returns `Ok(None)`; the third in a row aborts.
    pub fn train_step(&mut self, energy: &dyn Energy) -> Result<Option<LossRecord>> {
        let attempt = self.loss_and_grads(energy).and_then(|(rec, mut gd, mut ge, lt)| {
            if !gd.all_finite() || !ge.all_finite() {
                return Err(Error::Training {
                    message: "non-finite gradient".into(),
                    sample: None,
                });
            }
            if let Some(c) = self.config.grad_clip {
                clip_global_norm(&mut [&mut gd, &mut ge], c);
            }
            adam_step(&mut self.params.decoder, &gd, &mut self.adam_decoder, &self.config)?;
            adam_step(&mut self.params.encoder, &ge, &mut self.adam_encoder, &self.config)?;
            Ok((rec, lt))
        });
        self.step += 1;
        match attempt {
            Ok((rec, lt)) => {
                self.failures = 0;
                if let (Some(p), Some(lt)) = (self.proposal.as_mut(), lt) {
                    p.update(&lt);
                }
                Ok(Some(rec))
            }
            Err(e @ (Error::Training { .. } | Error::Decode { .. })) => {
                self.failures += 1;
                log::warn!("step {} skipped: {}", self.step - 1, e);
                if self.failures >= MAX_CONSECUTIVE_FAILURES {
                    return Err(Error::Training {
                        message: format!(
                            "{} consecutive non-finite steps ending at step {}: {}",
                            self.failures,
                            self.step - 1,
                            e
                        ),
                        sample: match e {
                            Error::Training { sample, .. } => sample,
                            _ => None,
                        },
                    });
                }
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    /// Run until `config.steps` total steps, calling `on_record` per
    /// successful step.
    pub fn run<F>(&mut self, energy: &dyn Energy, mut on_record: F) -> Result<()>
    where
        F: FnMut(&Trainer, &LossRecord) -> Result<()>,
    {
        self.model.check_energy(energy)?;
        while self.step < self.config.steps {
            if let Some(rec) = self.train_step(energy)? {
                on_record(self, &rec)?;
            }
        }
        Ok(())
    }
}

/// Train from scratch and collect the loss curve.
pub fn run_training(
    spec: &ModelSpec,
    config: TrainConfig,
    energy: &dyn Energy,
) -> Result<(Trainer, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(spec, config)?;
    let mut records = Vec::new();
    trainer.run(energy, |_, r| {
        records.push(*r);
        Ok(())
    })?;
    Ok((trainer, records))
}
