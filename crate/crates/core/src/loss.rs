//! Training objective: reconstruction term plus the importance-sampled
//! time integral, in Hutchinson or denoising form, and the adaptive time
//! proposal built from a history of recent minibatches.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::gaussian_log_density;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamVector;
use crate::random::{normal_tensor, rademacher_tensor};
use crate::score::ScoreContext;
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Hutchinson,
    Denoising,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub buffer_minibatches: usize,
    pub bins: usize,
    /// Lowest time used by the denoising form.
    pub t_min: f64,
    /// Density floor in units of `1/T`.
    pub floor: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            buffer_minibatches: 30,
            bins: 100,
            t_min: 1e-5,
            floor: 1e-3,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_minibatches == 0 || self.bins == 0 {
            return Err(Error::Config("proposal needs a buffer and bins".into()));
        }
        if !(self.t_min >= 0.0) {
            return Err(Error::Config("t_min must be non-negative".into()));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return Err(Error::Config("floor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant proposal on `[lower, T]`, uniform until the buffer
/// has seen `buffer_minibatches` minibatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeProposal {
    pub cfg: ProposalConfig,
    pub schedule: SdeSchedule,
    pub lower: f64,
    buffer: VecDeque<Vec<(f64, f64)>>,
    warmup_count: usize,
    histogram: Vec<f64>,
    /// Density value per bin.
    density: Vec<f64>,
}

impl TimeProposal {
    pub fn new(cfg: ProposalConfig, schedule: SdeSchedule, variant: LossVariant) -> Result<Self> {
        cfg.validate()?;
        schedule.validate()?;
        let lower = match variant {
            LossVariant::Hutchinson => 0.0,
            LossVariant::Denoising => cfg.t_min,
        };
        if lower >= schedule.horizon {
            return Err(Error::Config("t_min must be below the horizon".into()));
        }
        let u = 1.0 / (schedule.horizon - lower);
        Ok(TimeProposal {
            cfg,
            schedule,
            lower,
            buffer: VecDeque::new(),
            warmup_count: 0,
            histogram: vec![0.0; cfg.bins],
            density: vec![u; cfg.bins],
        })
    }

    pub fn in_warmup(&self) -> bool {
        self.warmup_count < self.cfg.buffer_minibatches
    }

    pub fn warmup_count(&self) -> usize {
        self.warmup_count
    }

    pub fn bin_width(&self) -> f64 {
        (self.schedule.horizon - self.lower) / self.cfg.bins as f64
    }

    pub fn floor_density(&self) -> f64 {
        self.cfg.floor / self.schedule.horizon
    }

    pub fn bin_densities(&self) -> &[f64] {
        &self.density
    }

    fn bin_of(&self, t: f64) -> usize {
        let b = ((t - self.lower) / self.bin_width()) as usize;
        b.min(self.cfg.bins - 1)
    }

    /// Proposal density at `t` (zero outside the support).
    pub fn density_at(&self, t: f64) -> f64 {
        if t < self.lower || t > self.schedule.horizon {
            return 0.0;
        }
        self.density[self.bin_of(t)]
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let w = self.bin_width();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut bin = self.cfg.bins - 1;
        for (b, p) in self.density.iter().enumerate() {
            acc += p * w;
            if u < acc {
                bin = b;
                break;
            }
        }
        let r: f64 = rng.random();
        let t = (self.lower + (bin as f64 + r) * w).min(self.schedule.horizon);
        (t, self.density[bin])
    }

    /// Push one minibatch of `(t, L_t)` records and re-estimate the density.
    pub fn update(&mut self, records: &[(f64, f64)]) {
        self.buffer.push_back(records.to_vec());
        while self.buffer.len() > self.cfg.buffer_minibatches {
            self.buffer.pop_front();
        }
        self.warmup_count = self.warmup_count.saturating_add(1);
        if self.in_warmup() {
            return;
        }
        let bins = self.cfg.bins;
        let mut sum = vec![0.0; bins];
        let mut count = vec![0usize; bins];
        for &(t, lt) in self.buffer.iter().flatten() {
            if !(t >= self.lower && t <= self.schedule.horizon) || !lt.is_finite() {
                continue;
            }
            let b = self.bin_of(t);
            sum[b] += lt.abs();
            count[b] += 1;
        }
        let filled: Vec<usize> = (0..bins).filter(|&b| count[b] > 0).collect();
        if filled.is_empty() {
            return;
        }
        for b in 0..bins {
            let src = if count[b] > 0 {
                b
            } else {
                *filled.iter().min_by_key(|&&f| f.abs_diff(b)).unwrap()
            };
            self.histogram[b] = sum[src] / count[src] as f64;
        }
        // ideal proposal is proportional to g(t)² E[L_t]; use the exact
        // bin average of g²
        let w = self.bin_width();
        let raw: Vec<f64> = (0..bins)
            .map(|b| {
                let a = self.lower + b as f64 * w;
                (g2_integral(&self.schedule, a + w) - g2_integral(&self.schedule, a)) / w
                    * self.histogram[b]
            })
            .collect();
        let u = 1.0 / (self.schedule.horizon - self.lower);
        let mix = (self.floor_density() / u).min(1.0);
        let mass: f64 = raw.iter().sum::<f64>() * w;
        for b in 0..bins {
            let r = if mass > 0.0 && mass.is_finite() {
                raw[b] / mass
            } else {
                u
            };
            self.density[b] = (1.0 - mix) * r + mix * u;
        }
    }

    /// Bin-averaged `|L_t|` from the buffer (meaningful after warmup).
    pub fn histogram(&self) -> &[f64] {
        &self.histogram
    }
}

/// Antiderivative of `g(t)²`: `∫β + ½ e^{−2∫β}`.
fn g2_integral(schedule: &SdeSchedule, t: f64) -> f64 {
    let ib = schedule.int_beta(t);
    ib + 0.5 * libm::exp(-2.0 * ib)
}

/// All randomness consumed by one loss evaluation, so the two estimator
/// forms can be compared on identical draws.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchDraws {
    pub z0: Tensor,
    /// Standard-normal decoder noise (n×d).
    pub noise: Tensor,
    pub t: Vec<f64>,
    /// Proposal density at each `t`.
    pub density: Vec<f64>,
    /// Standard-normal diffusion noise (n×D).
    pub eta: Tensor,
    /// Rademacher probes (n×D).
    pub probe: Tensor,
}

impl BatchDraws {
    pub fn sample<R: Rng + ?Sized>(
        proposal: &TimeProposal,
        latent_dim: usize,
        data_dim: usize,
        n: usize,
        rng: &mut R,
    ) -> Self {
        let z0 = normal_tensor(n, latent_dim, rng);
        let noise = normal_tensor(n, data_dim, rng);
        let (t, density) = (0..n).map(|_| proposal.sample_time(rng)).unzip();
        let eta = normal_tensor(n, latent_dim, rng);
        let probe = rademacher_tensor(n, latent_dim, rng);
        BatchDraws {
            z0,
            noise,
            t,
            density,
            eta,
            probe,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// `z_t = m z₀ + σ η`, row by row.
    pub fn zt(&self, schedule: &SdeSchedule) -> Result<Tensor> {
        let mut out = self.z0.clone();
        for i in 0..self.len() {
            let c = schedule.coeffs(self.t[i])?;
            for (o, e) in out.row_mut(i).iter_mut().zip(self.eta.row(i)) {
                *o = c.m * *o + c.sigma * e;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub score_term: f64,
    pub total: f64,
    /// `(t, L_t)` per sample, for the proposal buffer.
    pub per_sample_t: Vec<(f64, f64)>,
    /// Per-sample total `recon_i + λ(t_i) L_t,i`; its mean is `total`.
    pub per_sample: Vec<f64>,
}

struct BuiltLoss {
    graph: Graph,
    total: Var,
    dec_vars: Vec<Var>,
    score_vars: Vec<Var>,
    breakdown: LossBreakdown,
}

fn build(ctx: &ScoreContext<'_>, variant: LossVariant, draws: &BatchDraws) -> Result<BuiltLoss> {
    let n = draws.len();
    if n == 0 {
        return Err(Error::Contract("batch_size must be at least 1".into()));
    }
    let schedule = &ctx.model.schedule;
    let (dz, d) = (ctx.model.latent_dim, ctx.model.data_dim);
    if draws.z0.cols() != dz
        || draws.eta.cols() != dz
        || draws.probe.cols() != dz
        || draws.noise.cols() != d
        || [draws.z0.rows(), draws.eta.rows(), draws.probe.rows(), draws.noise.rows()]
            .iter()
            .any(|&r| r != n)
        || draws.density.len() != n
    {
        return Err(Error::Shape("batch draws do not match the model".into()));
    }
    let mut lam = Vec::with_capacity(n);
    let mut inv_v = Vec::with_capacity(n);
    let mut m = Vec::with_capacity(n);
    let mut inv_s2 = Vec::with_capacity(n);
    for i in 0..n {
        let c = schedule.coeffs(draws.t[i])?;
        if variant == LossVariant::Denoising && c.sigma <= 0.0 {
            return Err(Error::Range {
                t: draws.t[i],
                lo: f64::MIN_POSITIVE,
                hi: schedule.horizon,
            });
        }
        if !(draws.density[i] > 0.0) {
            return Err(Error::Contract("proposal density must be positive".into()));
        }
        lam.push(c.g2 / (2.0 * draws.density[i]));
        inv_v.push(1.0 / c.marginal_var());
        m.push(c.m);
        inv_s2.push(1.0 / (c.sigma * c.sigma));
    }
    let zt_val = draws.zt(schedule)?;

    let mut g = Graph::new();
    let dec_vars = ctx.decoder_params.leaves(&mut g);
    let score_vars = ctx.score_params.leaves(&mut g);

    let z0 = g.constant(draws.z0.clone());
    let (mu, var) = ctx.decoder.forward(&mut g, &dec_vars, z0, ctx.energy)?;
    let sd = g.sqrt(var);
    let noise = g.constant(draws.noise.clone());
    let e = g.mul(sd, noise);
    let x = g.add(mu, e);
    let lp = gaussian_log_density(&mut g, x, mu, var);
    let u = ctx.energy.graph(&mut g, x);
    let recon = g.add(lp, u);

    let zt = g.leaf(zt_val.clone());
    let s = ctx.model.graph(
        &mut g,
        &score_vars,
        ctx.decoder,
        &dec_vars,
        ctx.energy,
        zt,
        x,
        &draws.t,
    )?;
    let s_sq = g.square(s);
    let s_sq = g.row_sum(s_sq);
    let cross = match variant {
        LossVariant::Hutchinson => {
            let probe = g.constant(draws.probe.clone());
            let jv = g.jvp(s, &[zt], &[probe]);
            let q = g.row_dot(jv, probe);
            g.scale(q, 2.0)
        }
        LossVariant::Denoising => {
            // conditional score −(z_t − m z₀)/σ²
            let mut cond = zt_val.clone();
            for i in 0..n {
                let z0r = draws.z0.row(i);
                for (k, c) in cond.row_mut(i).iter_mut().enumerate() {
                    *c = -(*c - m[i] * z0r[k]) * inv_s2[i];
                }
            }
            let cond = g.constant(cond);
            let q = g.row_dot(s, cond);
            g.scale(q, -2.0)
        }
    };
    let prior: Vec<f64> = (0..n)
        .map(|i| zt_val.row(i).iter().map(|z| z * z).sum::<f64>() * inv_v[i] * inv_v[i])
        .collect();
    let prior = g.constant(Tensor::column(&prior));
    let lt = g.add(s_sq, cross);
    let lt = g.add(lt, prior);
    let lam_v = g.constant(Tensor::column(&lam));
    let weighted = g.mul(lt, lam_v);
    let per = g.add(recon, weighted);
    let total = g.mean_all(per);

    let recon_vals = g.value(recon).data().to_vec();
    let lt_vals = g.value(lt).data().to_vec();
    let per_vals = g.value(per).data().to_vec();
    if let Some(i) = per_vals.iter().position(|v| !v.is_finite()) {
        return Err(Error::Training {
            message: format!(
                "non-finite loss at t = {} (recon {}, L_t {})",
                draws.t[i], recon_vals[i], lt_vals[i]
            ),
            sample: Some(i),
        });
    }
    let recon_mean = recon_vals.iter().sum::<f64>() / n as f64;
    let total_val = g.value(total).item();
    let breakdown = LossBreakdown {
        recon: recon_mean,
        score_term: total_val - recon_mean,
        total: total_val,
        per_sample_t: draws.t.iter().copied().zip(lt_vals).collect(),
        per_sample: per_vals,
    };
    Ok(BuiltLoss {
        graph: g,
        total,
        dec_vars,
        score_vars,
        breakdown,
    })
}

/// Loss value on fixed draws.
pub fn loss_on_draws(
    ctx: &ScoreContext<'_>,
    variant: LossVariant,
    draws: &BatchDraws,
) -> Result<LossBreakdown> {
    Ok(build(ctx, variant, draws)?.breakdown)
}

/// Gradients of the loss with respect to the decoder and score parameters.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub decoder: ParamVector,
    pub score: ParamVector,
}

pub fn loss_and_gradients(
    ctx: &ScoreContext<'_>,
    variant: LossVariant,
    draws: &BatchDraws,
) -> Result<LossGradients> {
    let b = build(ctx, variant, draws)?;
    let mut wrt = b.dec_vars.clone();
    wrt.extend_from_slice(&b.score_vars);
    let grads = b.graph.grad_values(b.total, &wrt, None);
    let (gd, gs) = grads.split_at(b.dec_vars.len());
    Ok(LossGradients {
        breakdown: b.breakdown,
        decoder: ctx.decoder_params.with_values_from(gd)?,
        score: ctx.score_params.with_values_from(gs)?,
    })
}

pub fn loss_hutchinson<R: Rng + ?Sized>(
    ctx: &ScoreContext<'_>,
    proposal: &TimeProposal,
    batch_size: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let draws = BatchDraws::sample(
        proposal,
        ctx.model.latent_dim,
        ctx.model.data_dim,
        batch_size,
        rng,
    );
    loss_on_draws(ctx, LossVariant::Hutchinson, &draws)
}

pub fn loss_denoising<R: Rng + ?Sized>(
    ctx: &ScoreContext<'_>,
    proposal: &TimeProposal,
    batch_size: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let draws = BatchDraws::sample(
        proposal,
        ctx.model.latent_dim,
        ctx.model.data_dim,
        batch_size,
        rng,
    );
    loss_on_draws(ctx, LossVariant::Denoising, &draws)
}

pub fn update_proposal(proposal: &mut TimeProposal, breakdown: &LossBreakdown) {
    proposal.update(&breakdown.per_sample_t);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proposal() -> TimeProposal {
        TimeProposal::new(
            ProposalConfig::default(),
            SdeSchedule::default(),
            LossVariant::Hutchinson,
        )
        .unwrap()
    }

    #[test]
    fn warmup_is_uniform() {
        let p = proposal();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (t, d) = p.sample_time(&mut rng);
            assert!((0.0..=1.0).contains(&t));
            assert_eq!(d, 1.0);
        }
    }

    #[test]
    fn concentrated_mass_and_floor() {
        let mut p = proposal();
        let bin = 57;
        let w = p.bin_width();
        let recs: Vec<(f64, f64)> = (0..100)
            .map(|b| ((b as f64 + 0.5) * w, if b == bin { 1.0 } else { 0.0 }))
            .collect();
        for _ in 0..30 {
            p.update(&recs);
        }
        assert!(!p.in_warmup());
        let dens = p.bin_densities();
        let total: f64 = dens.iter().map(|d| d * w).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let floor = p.floor_density();
        assert!(dens.iter().all(|&d| d >= floor * (1.0 - 1e-12)));
        let p_bin = dens[bin] * w;
        assert!(p_bin >= 1.0 - 99.0 * floor * w - 1e-12);
        let argmax = (0..100).max_by(|&a, &b| dens[a].total_cmp(&dens[b])).unwrap();
        assert_eq!(argmax, bin);
    }

    #[test]
    fn ring_buffer_forgets() {
        let mut a = proposal();
        let mut b = proposal();
        a.update(&[(0.2, 100.0)]);
        b.update(&[(0.9, 100.0)]);
        let recs: Vec<(f64, f64)> = (0..100).map(|i| ((i as f64 + 0.5) / 100.0, 1.0)).collect();
        for _ in 0..30 {
            a.update(&recs);
            b.update(&recs);
        }
        assert_eq!(a.bin_densities(), b.bin_densities());
        assert!(a.histogram().iter().all(|&h| h == 1.0));
    }

    #[test]
    fn g2_antiderivative_matches_quadrature() {
        let s = SdeSchedule::default();
        let n = 200_000;
        let (a, b) = (0.1, 0.7);
        let h = (b - a) / n as f64;
        let quad: f64 = (0..n)
            .map(|i| s.coeffs_unchecked(a + (i as f64 + 0.5) * h).g2 * h)
            .sum();
        assert!((quad - (g2_integral(&s, b) - g2_integral(&s, a))).abs() < 1e-8);
    }
}
