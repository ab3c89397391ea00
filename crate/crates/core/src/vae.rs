//! Gaussian MLP encoder `p_E(z | x)` and the joint-distribution KL used by
//! the VAE ablations.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{gaussian_log_density, standard_normal_log_density, Decoder};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{Activation, FinalActivation, Mlp, MlpSpec};
use crate::params::ParamVector;
use crate::random::normal_tensor;
use crate::tensor::Tensor;

/// Added to the softplus output so the standard deviation never reaches 0.
const MIN_STD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: vec![32, 32, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEncoder {
    pub data_dim: usize,
    pub latent_dim: usize,
    mean: Mlp,
    std: Mlp,
}

impl VaeEncoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: &VaeConfig,
        data_dim: usize,
        latent_dim: usize,
        params: &mut ParamVector,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || latent_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut sizes = vec![data_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(latent_dim);
        let mean = Mlp::init_into(
            params,
            "enc.mean.",
            MlpSpec::new(sizes.clone(), cfg.activation),
            rng,
        )?;
        let std = Mlp::init_into(
            params,
            "enc.std.",
            MlpSpec::new(sizes, cfg.activation).with_final(FinalActivation::Softplus),
            rng,
        )?;
        Ok(VaeEncoder {
            data_dim,
            latent_dim,
            mean,
            std,
        })
    }

    /// Mean and diagonal variance of `p_E(z | x)`, both n×D.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> (Var, Var) {
        let mu = self.mean.forward(g, vars, x);
        let sd = self.std.forward(g, vars, x);
        let sd = g.offset(sd, MIN_STD);
        (mu, g.square(sd))
    }

    /// `log p_E(z | x)` for single points.
    pub fn log_density(&self, params: &ParamVector, z: &[f64], x: &[f64]) -> Result<f64> {
        if z.len() != self.latent_dim || x.len() != self.data_dim {
            return Err(Error::Shape("encoder input sizes do not match".into()));
        }
        let mut g = Graph::new();
        let vars = params.leaves(&mut g);
        let xv = g.constant(Tensor::row_vector(x));
        let zv = g.constant(Tensor::row_vector(z));
        let (mu, var) = self.forward(&mut g, &vars, xv);
        let lp = gaussian_log_density(&mut g, zv, mu, var);
        Ok(g.value(lp).item())
    }
}

/// Per-sample values and parameter gradients of the joint KL estimate.
#[derive(Clone, Debug)]
pub struct VaeLoss {
    pub total: f64,
    pub per_sample: Vec<f64>,
    pub decoder_grad: ParamVector,
    pub encoder_grad: ParamVector,
}

/// `E[log p(z) + log p_D(x|z) + U(x) − log p_E(z|x)]` on fixed latents and
/// decoder noise; equals the joint KL minus `log Z`.
pub fn vae_loss_on_draws(
    decoder: &Decoder,
    decoder_params: &ParamVector,
    encoder: &VaeEncoder,
    encoder_params: &ParamVector,
    energy: &dyn Energy,
    z0: &Tensor,
    noise: &Tensor,
) -> Result<VaeLoss> {
    let n = z0.rows();
    if n == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let mut g = Graph::new();
    let dv = decoder_params.leaves(&mut g);
    let ev = encoder_params.leaves(&mut g);
    let z = g.constant(z0.clone());
    let (mu, var) = decoder.forward(&mut g, &dv, z, energy)?;
    let sd = g.sqrt(var);
    let nv = g.constant(noise.clone());
    let e = g.mul(sd, nv);
    let x = g.add(mu, e);
    let lp = gaussian_log_density(&mut g, x, mu, var);
    let u = energy.graph(&mut g, x);
    let (emu, evar) = encoder.forward(&mut g, &ev, x);
    let le = gaussian_log_density(&mut g, z, emu, evar);
    let lpz: Vec<f64> = (0..n)
        .map(|i| standard_normal_log_density(z0.row(i)))
        .collect();
    let lpz = g.constant(Tensor::column(&lpz));
    let per = g.add(lp, u);
    let per = g.add(per, lpz);
    let per = g.sub(per, le);
    let total = g.mean_all(per);
    let per_sample = g.value(per).data().to_vec();
    if let Some(i) = per_sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training {
            message: "non-finite joint KL term".into(),
            sample: Some(i),
        });
    }
    let mut wrt = dv.clone();
    wrt.extend_from_slice(&ev);
    let grads = g.grad_values(total, &wrt, None);
    let (gd, ge) = grads.split_at(dv.len());
    Ok(VaeLoss {
        total: g.value(total).item(),
        per_sample,
        decoder_grad: decoder_params.with_values_from(gd)?,
        encoder_grad: encoder_params.with_values_from(ge)?,
    })
}

pub fn vae_joint_kl_loss<R: Rng + ?Sized>(
    decoder: &Decoder,
    decoder_params: &ParamVector,
    encoder: &VaeEncoder,
    encoder_params: &ParamVector,
    energy: &dyn Energy,
    batch_size: usize,
    rng: &mut R,
) -> Result<VaeLoss> {
    let z0 = normal_tensor(batch_size, decoder.latent_dim(), rng);
    let noise = normal_tensor(batch_size, decoder.data_dim(), rng);
    vae_loss_on_draws(
        decoder,
        decoder_params,
        encoder,
        encoder_params,
        energy,
        &z0,
        &noise,
    )
}
