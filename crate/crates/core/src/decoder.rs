//! Decoders `p_D(x | z₀)`: the generalized-Hamiltonian (GHD) decoder and a
//! plain Gaussian MLP decoder used in ablations.
//!
//! Both are written as batch graphs (one latent per row) so that
//! `∇_z log p_D(x | z)` can be formed and differentiated again.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{Activation, FinalActivation, Mlp, MlpSpec};
use crate::params::ParamVector;
use crate::random::normal;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhdConfig {
    /// Sample dimension d.
    pub dim: usize,
    /// Dimension of ζ₀.
    pub d0: usize,
    /// Outer iterations, one fresh velocity each.
    pub k: usize,
    /// Leapfrog steps per outer iteration.
    pub j: usize,
    pub eps0: f64,
    /// Exponent scale of the final Brownian step, `h = exp(final_eps0 · η(y))`.
    pub final_eps0: f64,
    /// ε(l) at initialisation.
    pub init_step: f64,
    /// h at initialisation.
    pub init_final_step: f64,
    pub init_hidden: Vec<usize>,
    pub corr_hidden: Vec<usize>,
    pub final_hidden: Vec<usize>,
    pub step_hidden: Vec<usize>,
    /// Use tanh in every network (smooth everywhere, for derivative checks).
    pub smooth: bool,
}

impl GhdConfig {
    pub fn for_dim(dim: usize) -> Self {
        GhdConfig {
            dim,
            d0: if dim == 2 { 10 } else { dim },
            k: 5,
            j: 5,
            eps0: 0.01,
            final_eps0: 1.0,
            init_step: 0.1,
            init_final_step: 0.1,
            init_hidden: vec![32, 32, 32],
            corr_hidden: vec![10, 10],
            final_hidden: vec![10, 10],
            step_hidden: vec![10],
            smooth: false,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.d0 + self.dim + self.k * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.d0 == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.k > 0 && self.j == 0 {
            return Err(Error::Config("GHD needs at least one leapfrog step".into()));
        }
        for (name, v) in [
            ("eps0", self.eps0),
            ("final_eps0", self.final_eps0),
            ("init_step", self.init_step),
            ("init_final_step", self.init_final_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Split of a latent vector `z₀ = (ζ₀, ζ₁, v_1, …, v_K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSplit {
    pub zeta0: Vec<f64>,
    pub zeta1: Vec<f64>,
    pub velocities: Vec<Vec<f64>>,
}

impl LatentSplit {
    pub fn from_latent(cfg: &GhdConfig, z: &[f64]) -> Result<Self> {
        if z.len() != cfg.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has length {}, decoder expects {}",
                z.len(),
                cfg.latent_dim()
            )));
        }
        let (d0, d) = (cfg.d0, cfg.dim);
        Ok(LatentSplit {
            zeta0: z[..d0].to_vec(),
            zeta1: z[d0..d0 + d].to_vec(),
            velocities: (0..cfg.k)
                .map(|k| z[d0 + d + k * d..d0 + d + (k + 1) * d].to_vec())
                .collect(),
        })
    }

    pub fn to_latent(&self) -> Vec<f64> {
        let mut z = self.zeta0.clone();
        z.extend_from_slice(&self.zeta1);
        for v in &self.velocities {
            z.extend_from_slice(v);
        }
        z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GhdDecoder {
    pub cfg: GhdConfig,
    mu0: Mlp,
    sigma0: Mlp,
    q_v: Mlp,
    t_v: Mlp,
    q_y: Mlp,
    t_y: Mlp,
    step: Mlp,
    eta: Mlp,
}

fn layers(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

/// `softplus⁻¹(y)` for `y > 0`.
fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl GhdDecoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: GhdConfig,
        params: &mut ParamVector,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let act = |default| {
            if cfg.smooth {
                Activation::Tanh
            } else {
                default
            }
        };
        let mu0 = Mlp::init_into(
            params,
            "dec.mu0.",
            MlpSpec::new(layers(cfg.d0, &cfg.init_hidden, d), act(Activation::Relu)),
            rng,
        )?;
        let sigma0 = Mlp::init_into(
            params,
            "dec.sigma0.",
            MlpSpec::new(layers(cfg.d0, &cfg.init_hidden, d), act(Activation::Relu))
                .with_final(FinalActivation::Softplus),
            rng,
        )?;
        let corr = |params: &mut ParamVector, name: &str, input, a, rng: &mut R| -> Result<Mlp> {
            let m = Mlp::init_into(
                params,
                name,
                MlpSpec::new(layers(input, &cfg.corr_hidden, d), a),
                rng,
            )?;
            m.zero_output_layer(params);
            Ok(m)
        };
        let q_v = corr(params, "dec.qv.", 2 * d + 1, Activation::Tanh, rng)?;
        let t_v = corr(params, "dec.tv.", 2 * d + 1, Activation::Tanh, rng)?;
        let q_y = corr(params, "dec.qy.", d + 1, act(Activation::Relu), rng)?;
        let t_y = corr(params, "dec.ty.", d + 1, act(Activation::Relu), rng)?;
        let step = Mlp::init_into(
            params,
            "dec.step.",
            MlpSpec::new(layers(1, &cfg.step_hidden, 1), Activation::Tanh)
                .with_final(FinalActivation::Softplus),
            rng,
        )?;
        step.zero_output_layer(params);
        step.set_output_bias(params, inv_softplus(cfg.init_step));
        let eta = Mlp::init_into(
            params,
            "dec.eta.",
            MlpSpec::new(layers(d, &cfg.final_hidden, 1), act(Activation::Relu)),
            rng,
        )?;
        eta.zero_output_layer(params);
        eta.set_output_bias(params, cfg.init_final_step.ln() / cfg.final_eps0);
        Ok(GhdDecoder {
            cfg,
            mu0,
            sigma0,
            q_v,
            t_v,
            q_y,
            t_y,
            step,
            eta,
        })
    }

    fn leapfrog_index(&self, k: usize, j: usize) -> f64 {
        let total = self.cfg.k * self.cfg.j;
        if total <= 1 {
            0.0
        } else {
            (k * self.cfg.j + j) as f64 / (total - 1) as f64
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn kick(
        &self,
        g: &mut Graph,
        vars: &[Var],
        y: Var,
        gu: Var,
        v: Var,
        l: Var,
        half_step: Var,
    ) -> Var {
        let inp = g.concat_cols(&[y, gu, l]);
        let q = self.q_v.forward(g, vars, inp);
        let t = self.t_v.forward(g, vars, inp);
        let q = g.scale(q, 0.5 * self.cfg.eps0);
        let e = g.exp(q);
        let force = g.mul(gu, e);
        let force = g.add(force, t);
        let dv = g.mul(force, half_step);
        g.sub(v, dv)
    }

    /// Mean (n×d) and isotropic variance (n×1) of `x | z` for the latent
    /// rows of `z`.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        z: Var,
        energy: &dyn Energy,
    ) -> Result<(Var, Var)> {
        let (d0, d) = (self.cfg.d0, self.cfg.dim);
        let n = g.shape(z).0;
        let zeta0 = g.slice_cols(z, 0, d0);
        let zeta1 = g.slice_cols(z, d0, d);
        let m0 = self.mu0.forward(g, vars, zeta0);
        let s0 = self.sigma0.forward(g, vars, zeta0);
        let s = g.mul(s0, zeta1);
        let mut y = g.add(m0, s);
        let mut gu = energy_gradient(g, energy, y)?;
        for k in 0..self.cfg.k {
            let mut v = g.slice_cols(z, d0 + d + k * d, d);
            for j in 0..self.cfg.j {
                let lv = self.leapfrog_index(k, j);
                let l1 = g.constant(Tensor::scalar(lv));
                let l = g.constant(Tensor::filled(n, 1, lv));
                let eps = self.step.forward(g, vars, l1);
                let half = g.scale(eps, 0.5);
                v = self.kick(g, vars, y, gu, v, l, half);
                let inp = g.concat_cols(&[v, l]);
                let q = self.q_y.forward(g, vars, inp);
                let t = self.t_y.forward(g, vars, inp);
                let q = g.scale(q, self.cfg.eps0);
                let e = g.exp(q);
                let dy = g.mul(v, e);
                let dy = g.add(dy, t);
                let dy = g.mul(dy, eps);
                y = g.add(y, dy);
                gu = energy_gradient(g, energy, y)?;
                v = self.kick(g, vars, y, gu, v, l, half);
            }
            // The velocity flip after each outer iteration does not reach
            // the output: v_k is never read again.
        }
        let eta = self.eta.forward(g, vars, y);
        let eta = g.scale(eta, self.cfg.final_eps0);
        let h = g.exp(eta);
        let step = g.mul(gu, h);
        let mu = g.sub(y, step);
        let var = g.scale(h, 2.0);
        Ok((mu, var))
    }
}

/// `∇U` of each row of `y`, as a differentiable node.
pub fn energy_gradient(g: &mut Graph, energy: &dyn Energy, y: Var) -> Result<Var> {
    let u = energy.graph(g, y);
    let gu = g.grad(u, &[y], None)[0];
    let val = g.value(gu);
    if !val.all_finite() {
        let row = (0..val.rows())
            .find(|&i| val.row(i).iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(Error::Decode {
            y: g.value(y).row(row).to_vec(),
        });
    }
    Ok(gu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDecoderConfig {
    pub dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub smooth: bool,
}

impl GaussianDecoderConfig {
    pub fn for_dim(dim: usize) -> Self {
        GaussianDecoderConfig {
            dim,
            latent_dim: if dim == 2 { 10 } else { dim },
            hidden: vec![32, 32, 32],
            smooth: false,
        }
    }
}

/// Mean and diagonal standard deviation from MLPs on the latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDecoder {
    pub cfg: GaussianDecoderConfig,
    mean: Mlp,
    std: Mlp,
}

impl GaussianDecoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: GaussianDecoderConfig,
        params: &mut ParamVector,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.dim == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        let act = if cfg.smooth {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let mean = Mlp::init_into(
            params,
            "dec.mean.",
            MlpSpec::new(layers(cfg.latent_dim, &cfg.hidden, cfg.dim), act),
            rng,
        )?;
        let std = Mlp::init_into(
            params,
            "dec.std.",
            MlpSpec::new(layers(cfg.latent_dim, &cfg.hidden, cfg.dim), act)
                .with_final(FinalActivation::Softplus),
            rng,
        )?;
        Ok(GaussianDecoder { cfg, mean, std })
    }

    /// Mean and diagonal variance, both n×d.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], z: Var) -> (Var, Var) {
        let mu = self.mean.forward(g, vars, z);
        let sd = self.std.forward(g, vars, z);
        let var = g.square(sd);
        (mu, var)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decoder {
    Ghd(GhdDecoder),
    Gaussian(GaussianDecoder),
}

impl Decoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Decoder::Ghd(d) => d.cfg.latent_dim(),
            Decoder::Gaussian(d) => d.cfg.latent_dim,
        }
    }

    pub fn data_dim(&self) -> usize {
        match self {
            Decoder::Ghd(d) => d.cfg.dim,
            Decoder::Gaussian(d) => d.cfg.dim,
        }
    }

    /// Mean (n×d) and variance (n×1 isotropic or n×d diagonal).
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        z: Var,
        energy: &dyn Energy,
    ) -> Result<(Var, Var)> {
        match self {
            Decoder::Ghd(d) => d.forward(g, vars, z, energy),
            Decoder::Gaussian(d) => Ok(d.forward(g, vars, z)),
        }
    }

    fn check(&self, params: &ParamVector, z: &[f64], energy: &dyn Energy) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::Shape(format!(
                "latent has length {}, decoder expects {}",
                z.len(),
                self.latent_dim()
            )));
        }
        if energy.dim() != self.data_dim() {
            return Err(Error::Shape(format!(
                "energy has dimension {}, decoder produces {}",
                energy.dim(),
                self.data_dim()
            )));
        }
        if params.is_empty() {
            return Err(Error::Shape("empty decoder parameters".into()));
        }
        Ok(())
    }
}

/// Row-wise `log N(x; mu, var)`; `var` is n×1 (isotropic) or n×d.
pub fn gaussian_log_density(g: &mut Graph, x: Var, mu: Var, var: Var) -> Var {
    let (_, d) = g.shape(x);
    let diff = g.sub(x, mu);
    let sq = g.square(diff);
    let q = g.div(sq, var);
    let q = g.row_sum(q);
    let q = g.scale(q, -0.5);
    let lv = g.log(var);
    let lv = if g.shape(var).1 == 1 {
        g.scale(lv, d as f64)
    } else {
        g.row_sum(lv)
    };
    let norm = g.offset(lv, d as f64 * (2.0 * PI).ln());
    let norm = g.scale(norm, -0.5);
    g.add(q, norm)
}

/// `log N(z; 0, I)` per row.
pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub mu: Vec<f64>,
    /// Variance per coordinate (all equal for the GHD decoder).
    pub var: Vec<f64>,
    pub x: Vec<f64>,
    pub log_density: f64,
}

/// Mean and isotropic variance of the GHD decoder at one latent.
pub fn ghd_forward(
    decoder: &GhdDecoder,
    params: &ParamVector,
    z0: &LatentSplit,
    energy: &dyn Energy,
) -> Result<(Vec<f64>, f64)> {
    let z = z0.to_latent();
    let dec = Decoder::Ghd(decoder.clone());
    dec.check(params, &z, energy)?;
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let zv = g.leaf(Tensor::row_vector(&z));
    let (mu, var) = decoder.forward(&mut g, &vars, zv, energy)?;
    Ok((g.value(mu).data().to_vec(), g.value(var).item()))
}

fn expand_var(var: &Tensor, d: usize) -> Vec<f64> {
    if var.cols() == 1 {
        vec![var.item(); d]
    } else {
        var.data().to_vec()
    }
}

/// Reparameterised draw `x = mu + sqrt(var) ξ` with its log-density.
pub fn decoder_sample<R: Rng + ?Sized>(
    decoder: &Decoder,
    params: &ParamVector,
    z0: &[f64],
    energy: &dyn Energy,
    rng: &mut R,
) -> Result<DecoderOutput> {
    decoder.check(params, z0, energy)?;
    let d = decoder.data_dim();
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let zv = g.leaf(Tensor::row_vector(z0));
    let (mu, var) = decoder.forward(&mut g, &vars, zv, energy)?;
    let mu_v = g.value(mu).data().to_vec();
    let var_v = expand_var(g.value(var), d);
    let x: Vec<f64> = mu_v
        .iter()
        .zip(&var_v)
        .map(|(&m, &v)| m + v.sqrt() * normal(rng))
        .collect::<Vec<f64>>();
    let xv = g.constant(Tensor::row_vector(&x));
    let lp = gaussian_log_density(&mut g, xv, mu, var);
    Ok(DecoderOutput {
        mu: mu_v,
        var: var_v,
        log_density: g.value(lp).item(),
        x,
    })
}

/// `log p_D(x | z₀)`.
pub fn decoder_logdensity(
    decoder: &Decoder,
    params: &ParamVector,
    z0: &[f64],
    x: &[f64],
    energy: &dyn Energy,
) -> Result<f64> {
    decoder.check(params, z0, energy)?;
    if x.len() != decoder.data_dim() {
        return Err(Error::Shape(format!(
            "sample has length {}, decoder produces {}",
            x.len(),
            decoder.data_dim()
        )));
    }
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let zv = g.leaf(Tensor::row_vector(z0));
    let (mu, var) = decoder.forward(&mut g, &vars, zv, energy)?;
    let xv = g.constant(Tensor::row_vector(x));
    let lp = gaussian_log_density(&mut g, xv, mu, var);
    Ok(g.value(lp).item())
}

/// Ablation decoder draw (no energy involved).
pub fn gaussian_decode<R: Rng + ?Sized>(
    decoder: &GaussianDecoder,
    params: &ParamVector,
    z0: &[f64],
    rng: &mut R,
) -> Result<DecoderOutput> {
    if z0.len() != decoder.cfg.latent_dim {
        return Err(Error::Shape(format!(
            "latent has length {}, decoder expects {}",
            z0.len(),
            decoder.cfg.latent_dim
        )));
    }
    let d = decoder.cfg.dim;
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let zv = g.leaf(Tensor::row_vector(z0));
    let (mu, var) = decoder.forward(&mut g, &vars, zv);
    let mu_v = g.value(mu).data().to_vec();
    let var_v = expand_var(g.value(var), d);
    let x: Vec<f64> = mu_v
        .iter()
        .zip(&var_v)
        .map(|(&m, &v)| m + v.sqrt() * normal(rng))
        .collect::<Vec<f64>>();
    let xv = g.constant(Tensor::row_vector(&x));
    let lp = gaussian_log_density(&mut g, xv, mu, var);
    Ok(DecoderOutput {
        mu: mu_v,
        var: var_v,
        log_density: g.value(lp).item(),
        x,
    })
}

/// A decoded batch: one row per latent.
#[derive(Clone, Debug)]
pub struct DecodedBatch {
    pub z0: Tensor,
    pub x: Tensor,
    /// `log p_D(x | z₀)` per row.
    pub log_px_given_z: Vec<f64>,
    /// `log N(z₀; 0, I)` per row.
    pub log_pz: Vec<f64>,
}

/// Draw `n` latents from the prior and decode them.
pub fn decode_batch<R: Rng + ?Sized>(
    decoder: &Decoder,
    params: &ParamVector,
    energy: &dyn Energy,
    n: usize,
    rng: &mut R,
) -> Result<DecodedBatch> {
    let dz = decoder.latent_dim();
    let d = decoder.data_dim();
    let z0 = Tensor::from_vec(n, dz, (0..n * dz).map(|_| normal(rng)).collect());
    let noise = Tensor::from_vec(n, d, (0..n * d).map(|_| normal(rng)).collect());
    decode_given(decoder, params, energy, z0, &noise)
}

/// Decode fixed latents with fixed standard-normal noise.
pub fn decode_given(
    decoder: &Decoder,
    params: &ParamVector,
    energy: &dyn Energy,
    z0: Tensor,
    noise: &Tensor,
) -> Result<DecodedBatch> {
    let mut g = Graph::new();
    let vars = params.leaves(&mut g);
    let zv = g.leaf(z0.clone());
    let (mu, var) = decoder.forward(&mut g, &vars, zv, energy)?;
    let sd = g.sqrt(var);
    let nv = g.constant(noise.clone());
    let e = g.mul(sd, nv);
    let x = g.add(mu, e);
    let lp = gaussian_log_density(&mut g, x, mu, var);
    let log_pz = (0..z0.rows())
        .map(|i| standard_normal_log_density(z0.row(i)))
        .collect();
    Ok(DecodedBatch {
        x: g.value(x).clone(),
        log_px_given_z: g.value(lp).data().to_vec(),
        log_pz,
        z0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{make_mog, MixtureSpec, StandardGaussian};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(k: usize, j: usize) -> GhdConfig {
        GhdConfig {
            k,
            j,
            d0: 3,
            ..GhdConfig::for_dim(2)
        }
    }

    #[test]
    fn vanilla_leapfrog_when_corrections_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamVector::new();
        let dec = GhdDecoder::new(small_cfg(2, 3), &mut p, &mut rng).unwrap();
        let energy = make_mog(MixtureSpec::mog2()).unwrap();
        let z: Vec<f64> = (0..dec.cfg.latent_dim())
            .map(|i| 0.3 * i as f64 - 1.0)
            .collect();
        let (mu, var) = ghd_forward(
            &dec,
            &p,
            &LatentSplit::from_latent(&dec.cfg, &z).unwrap(),
            &energy,
        )
        .unwrap();

        // hand-rolled leapfrog from the same initial point
        let mut g = Graph::new();
        let vars = p.leaves(&mut g);
        let z0 = g.leaf(Tensor::row_vector(&z[..3]));
        let m0 = dec.mu0.forward(&mut g, &vars, z0);
        let s0 = dec.sigma0.forward(&mut g, &vars, z0);
        let mut y: Vec<f64> = (0..2)
            .map(|i| g.value(m0).data()[i] + g.value(s0).data()[i] * z[3 + i])
            .collect();
        let eps = 0.1;
        for k in 0..2 {
            let mut v = z[5 + 2 * k..7 + 2 * k].to_vec();
            for _ in 0..3 {
                let gr = energy.grad(&y);
                for i in 0..2 {
                    v[i] -= 0.5 * eps * gr[i];
                    y[i] += eps * v[i];
                }
                let gr = energy.grad(&y);
                for i in 0..2 {
                    v[i] -= 0.5 * eps * gr[i];
                }
            }
        }
        let gr = energy.grad(&y);
        for i in 0..2 {
            assert!((mu[i] - (y[i] - 0.1 * gr[i])).abs() < 1e-10);
        }
        assert!((var - 0.2).abs() < 1e-12);
    }

    #[test]
    fn no_ghd_is_initial_map_plus_brownian_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamVector::new();
        let dec = GhdDecoder::new(small_cfg(0, 5), &mut p, &mut rng).unwrap();
        assert_eq!(dec.cfg.latent_dim(), 5);
        let energy = StandardGaussian { dim: 2 };
        let z = [0.1, -0.2, 0.3, 1.0, -1.0];
        let (mu, _) = ghd_forward(
            &dec,
            &p,
            &LatentSplit::from_latent(&dec.cfg, &z).unwrap(),
            &energy,
        )
        .unwrap();
        let mut g = Graph::new();
        let vars = p.leaves(&mut g);
        let z0 = g.leaf(Tensor::row_vector(&z[..3]));
        let m0 = dec.mu0.forward(&mut g, &vars, z0);
        let s0 = dec.sigma0.forward(&mut g, &vars, z0);
        for i in 0..2 {
            let y = g.value(m0).data()[i] + g.value(s0).data()[i] * z[3 + i];
            assert!((mu[i] - 0.9 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_and_density_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamVector::new();
        let dec = Decoder::Ghd(GhdDecoder::new(small_cfg(1, 2), &mut p, &mut rng).unwrap());
        let energy = make_mog(MixtureSpec::mog2()).unwrap();
        let z: Vec<f64> = (0..dec.latent_dim()).map(|i| (i as f64).sin()).collect();
        let out = decoder_sample(&dec, &p, &z, &energy, &mut rng).unwrap();
        let lp = decoder_logdensity(&dec, &p, &z, &out.x, &energy).unwrap();
        assert!((out.log_density - lp).abs() < 1e-12);
        let at_mode = decoder_logdensity(&dec, &p, &z, &out.mu, &energy).unwrap();
        let expect = -(2.0 * PI * out.var[0]).ln();
        assert!((at_mode - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_gaussian_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamVector::new();
        let cfg = GaussianDecoderConfig {
            dim: 2,
            latent_dim: 3,
            hidden: vec![4],
            smooth: false,
        };
        let dec = GaussianDecoder::new(cfg, &mut p, &mut rng).unwrap();
        let p = p.zeros_like();
        let out = gaussian_decode(&dec, &p, &[0.5, 1.0, -2.0], &mut rng).unwrap();
        assert_eq!(out.mu, vec![0.0, 0.0]);
        let sp0 = 2.0f64.ln();
        assert!((out.var[0] - sp0 * sp0).abs() < 1e-15);
        let expect: f64 = out
            .x
            .iter()
            .map(|x| -0.5 * x * x / (sp0 * sp0) - 0.5 * (2.0 * PI * sp0 * sp0).ln())
            .sum();
        assert!((out.log_density - expect).abs() < 1e-12);
    }
}
