//! Boundary-guided score model for `∇_{z_t} log p_D(z_t | x)`.
//!
//! With τ = t/T:
//! `s = (1−τ)(∇_z log p_D(x|z₀=z) − z) + τ(−z/v(T)) + τ(1−τ) s′(z, x, τ)`,
//! so both ends of the time interval are exact whatever `s′` is.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{gaussian_log_density, Decoder};
use crate::energy::Energy;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{Activation, Mlp, MlpSpec};
use crate::params::ParamVector;
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            hidden: vec![16, 16],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub latent_dim: usize,
    pub data_dim: usize,
    pub schedule: SdeSchedule,
    net: Mlp,
}

impl ScoreModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ScoreConfig,
        latent_dim: usize,
        data_dim: usize,
        schedule: SdeSchedule,
        params: &mut ParamVector,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate()?;
        let mut sizes = vec![latent_dim + data_dim + 1];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(latent_dim);
        let net = Mlp::init_into(params, "score.", MlpSpec::new(sizes, cfg.activation), rng)?;
        Ok(ScoreModel {
            latent_dim,
            data_dim,
            schedule,
            net,
        })
    }

    /// The correction network `s′` alone.
    pub fn correction(&self, g: &mut Graph, vars: &[Var], z: Var, x: Var, tau: Var) -> Var {
        let inp = g.concat_cols(&[z, x, tau]);
        self.net.forward(g, vars, inp)
    }

    /// Score rows for latents `z` (n×D), samples `x` (n×d) and times `t`.
    /// Differentiable in `z`, `x` and both parameter sets.
    #[allow(clippy::too_many_arguments)]
    pub fn graph(
        &self,
        g: &mut Graph,
        score_vars: &[Var],
        decoder: &Decoder,
        dec_vars: &[Var],
        energy: &dyn Energy,
        z: Var,
        x: Var,
        t: &[f64],
    ) -> Result<Var> {
        let n = g.shape(z).0;
        if t.len() != n {
            return Err(Error::Shape(format!("{} times for {} latents", t.len(), n)));
        }
        let horizon = self.schedule.horizon;
        for &ti in t {
            self.schedule.check_time(ti)?;
        }
        let tau: Vec<f64> = t.iter().map(|ti| ti / horizon).collect();
        let w_data: Vec<f64> = tau.iter().map(|a| 1.0 - a).collect();
        let v_t = self.schedule.marginal_var(horizon);
        let w_prior: Vec<f64> = tau.iter().map(|a| -a / v_t).collect();
        let w_net: Vec<f64> = tau.iter().map(|a| a * (1.0 - a)).collect();

        let (mu, var) = decoder.forward(g, dec_vars, z, energy)?;
        let lp = gaussian_log_density(g, x, mu, var);
        let grad_lp = g.grad(lp, &[z], None)[0];
        let data_term = g.sub(grad_lp, z);
        let wd = g.constant(Tensor::column(&w_data));
        let data_term = g.mul(data_term, wd);

        let wp = g.constant(Tensor::column(&w_prior));
        let prior_term = g.mul(z, wp);

        let tau_v = g.constant(Tensor::column(&tau));
        let corr = self.correction(g, score_vars, z, x, tau_v);
        let wn = g.constant(Tensor::column(&w_net));
        let corr = g.mul(corr, wn);

        let s = g.add(data_term, prior_term);
        Ok(g.add(s, corr))
    }
}

/// Everything needed to evaluate the score at single points.
pub struct ScoreContext<'a> {
    pub model: &'a ScoreModel,
    pub score_params: &'a ParamVector,
    pub decoder: &'a Decoder,
    pub decoder_params: &'a ParamVector,
    pub energy: &'a dyn Energy,
}

impl ScoreContext<'_> {
    fn check(&self, z: &[f64], x: &[f64]) -> Result<()> {
        if z.len() != self.model.latent_dim || x.len() != self.model.data_dim {
            return Err(Error::Shape(format!(
                "score expects latent {} and sample {}, got {} and {}",
                self.model.latent_dim,
                self.model.data_dim,
                z.len(),
                x.len()
            )));
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph, z: &[f64], x: &[f64], t: f64) -> Result<(Var, Var)> {
        self.check(z, x)?;
        let sv = self.score_params.leaves(g);
        let dv = self.decoder_params.leaves(g);
        let xv = g.constant(Tensor::row_vector(x));
        let zv = g.leaf(Tensor::row_vector(z));
        let s = self
            .model
            .graph(g, &sv, self.decoder, &dv, self.energy, zv, xv, &[t])?;
        Ok((zv, s))
    }

    pub fn score_eval(&self, z: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let (_, s) = self.build(&mut g, z, x, t)?;
        Ok(g.value(s).data().to_vec())
    }

    /// Single-probe estimate `2 εᵀ (∂s/∂z) ε` of twice the divergence.
    pub fn score_divergence_hutchinson(
        &self,
        z: &[f64],
        x: &[f64],
        t: f64,
        eps: &[f64],
    ) -> Result<f64> {
        if eps.len() != z.len() {
            return Err(Error::Shape("probe and latent lengths differ".into()));
        }
        let mut g = Graph::new();
        let (zv, s) = self.build(&mut g, z, x, t)?;
        let e = g.constant(Tensor::row_vector(eps));
        let jv = g.jvp(s, &[zv], &[e]);
        let q = g.row_dot(jv, e);
        Ok(2.0 * g.value(q).item())
    }

    /// Exact input Jacobian `∂s/∂z`, one forward-mode column at a time
    /// (row-major, `J[i][j] = ∂s_i/∂z_j`).
    pub fn score_jacobian(&self, z: &[f64], x: &[f64], t: f64) -> Result<Tensor> {
        let dz = z.len();
        let mut g = Graph::new();
        let (zv, s) = self.build(&mut g, z, x, t)?;
        let mut jac = Tensor::zeros(dz, dz);
        for j in 0..dz {
            let mut e = vec![0.0; dz];
            e[j] = 1.0;
            let ev = g.constant(Tensor::row_vector(&e));
            let col = g.jvp(s, &[zv], &[ev]);
            for i in 0..dz {
                jac.set(i, j, g.value(col).data()[i]);
            }
        }
        Ok(jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{GhdConfig, GhdDecoder};
    use crate::energy::{make_mog, MixtureSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn boundaries_ignore_the_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dp = ParamVector::new();
        let cfg = GhdConfig {
            d0: 2,
            k: 1,
            j: 2,
            ..GhdConfig::for_dim(2)
        };
        let dec = Decoder::Ghd(GhdDecoder::new(cfg, &mut dp, &mut rng).unwrap());
        let mut sp = ParamVector::new();
        let sched = SdeSchedule::default();
        let model =
            ScoreModel::new(&ScoreConfig::default(), 6, 2, sched, &mut sp, &mut rng).unwrap();
        let energy = make_mog(MixtureSpec::mog2()).unwrap();
        let z = [0.3, -0.1, 0.5, 1.2, -0.7, 0.2];
        let x = [1.0, -2.0];
        let mut sp2 = sp.clone();
        sp2.values_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 0.1);
        let at = |p: &ParamVector, t: f64| {
            ScoreContext {
                model: &model,
                score_params: p,
                decoder: &dec,
                decoder_params: &dp,
                energy: &energy,
            }
            .score_eval(&z, &x, t)
            .unwrap()
        };
        assert_eq!(at(&sp, 0.0), at(&sp2, 0.0));
        assert_eq!(at(&sp, 1.0), at(&sp2, 1.0));
        let v = sched.marginal_var(1.0);
        for (s, zi) in at(&sp, 1.0).iter().zip(&z) {
            assert!((s + zi / v).abs() <= 1e-15 * s.abs());
        }
        assert_ne!(at(&sp, 0.5), at(&sp2, 0.5));
    }
}
