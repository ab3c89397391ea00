//! Encoder density `log p_E(z₀ | x)` through the probability-flow ODE,
//! importance weights for decoder samples, and the `log Z` bound.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::DecodedBatch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ode::{rk45, Rk45Config};
use crate::random::rademacher_tensor;
use crate::score::ScoreContext;
use crate::sde::SdeSchedule;
use crate::tensor::Tensor;

/// A score field `s(z, x, t)` evaluated on rows of `z` against matching
/// rows of `x`.
pub trait ScoreField {
    fn latent_dim(&self) -> usize;
    fn schedule(&self) -> &SdeSchedule;
    fn eval(&self, g: &mut Graph, z: Var, x: &Tensor, t: f64) -> Result<Var>;
}

impl ScoreField for ScoreContext<'_> {
    fn latent_dim(&self) -> usize {
        self.model.latent_dim
    }

    fn schedule(&self) -> &SdeSchedule {
        &self.model.schedule
    }

    fn eval(&self, g: &mut Graph, z: Var, x: &Tensor, t: f64) -> Result<Var> {
        let sv = self.score_params.leaves(g);
        let dv = self.decoder_params.leaves(g);
        let xv = g.constant(x.clone());
        let ts = vec![t; x.rows()];
        self.model
            .graph(g, &sv, self.decoder, &dv, self.energy, z, xv, &ts)
    }
}

/// `s(z, t) = M z + b`, independent of `x` and `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearScore {
    pub schedule: SdeSchedule,
    /// D×D matrix.
    pub m: Tensor,
    pub b: Vec<f64>,
}

impl ScoreField for LinearScore {
    fn latent_dim(&self) -> usize {
        self.m.rows()
    }

    fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }

    fn eval(&self, g: &mut Graph, z: Var, _x: &Tensor, _t: f64) -> Result<Var> {
        let mt = g.constant(self.m.transpose());
        let b = g.constant(Tensor::row_vector(&self.b));
        let mz = g.matmul(z, mt);
        Ok(g.add(mz, b))
    }
}

/// Score of the latent marginal, `−z / v(t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorScore {
    pub schedule: SdeSchedule,
    pub dim: usize,
}

impl ScoreField for PriorScore {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> &SdeSchedule {
        &self.schedule
    }

    fn eval(&self, g: &mut Graph, z: Var, _x: &Tensor, t: f64) -> Result<Var> {
        Ok(g.scale(z, -1.0 / self.schedule.marginal_var(t)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DivergenceMode {
    Exact,
    Hutchinson { probes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Largest latent dimension that uses the exact divergence.
    pub exact_max_dim: usize,
    pub probes: usize,
    /// Rows integrated together with a shared step size.
    pub chunk: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        OdeConfig {
            rtol: 1e-5,
            atol: 1e-5,
            exact_max_dim: 32,
            probes: 8,
            chunk: 16,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("ODE tolerances must be positive".into()));
        }
        if self.probes == 0 || self.chunk == 0 {
            return Err(Error::Config("probes and chunk must be at least 1".into()));
        }
        Ok(())
    }

    pub fn mode_for(&self, latent_dim: usize) -> DivergenceMode {
        if latent_dim <= self.exact_max_dim {
            DivergenceMode::Exact
        } else {
            DivergenceMode::Hutchinson {
                probes: self.probes,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeSolveReport {
    pub log_density: f64,
    pub steps_taken: usize,
    pub max_error_estimate: f64,
    pub divergence_mode: DivergenceMode,
}

/// Trace of `∂s/∂z` per row, using `p` probe directions per row (`probes`
/// is (n·p)×D, row-major by sample; stacked identities give the exact trace).
fn score_and_trace<S: ScoreField + ?Sized>(
    field: &S,
    z: &Tensor,
    x: &Tensor,
    t: f64,
    probes: &Tensor,
    exact: bool,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, dz) = z.shape();
    let p = probes.rows() / n;
    let idx: Vec<usize> = (0..n).flat_map(|i| core::iter::repeat_n(i, p)).collect();
    let z_rep = z.select_rows(&idx);
    let x_rep = x.select_rows(&idx);
    let tangent = probes;
    let mut g = Graph::new();
    let zv = g.leaf(z_rep);
    let s = field.eval(&mut g, zv, &x_rep, t)?;
    let ev = g.constant(tangent.clone());
    let jv = g.jvp(s, &[zv], &[ev]);
    let jv = g.value(jv);
    let sval = g.value(s);
    let mut score = Tensor::zeros(n, dz);
    let mut trace = vec![0.0; n];
    for i in 0..n {
        score.row_mut(i).copy_from_slice(sval.row(i * p));
        let mut acc = 0.0;
        for k in 0..p {
            let r = i * p + k;
            if exact {
                acc += jv.get(r, k);
            } else {
                acc += jv
                    .row(r)
                    .iter()
                    .zip(tangent.row(r))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        trace[i] = if exact { acc } else { acc / p as f64 };
    }
    Ok((score, trace))
}

/// `log p_E(z₀ | x)` for each row pair, integrating `z` from 0 to `T`
/// together with the divergence of the flow.
pub fn flow_logdensity_batch<S, R>(
    field: &S,
    x: &Tensor,
    z0: &Tensor,
    cfg: &OdeConfig,
    rng: &mut R,
) -> Result<Vec<OdeSolveReport>>
where
    S: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let (n, dz) = z0.shape();
    if dz != field.latent_dim() || x.rows() != n {
        return Err(Error::Shape("flow inputs do not match the score field".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let sched = *field.schedule();
    let mode = cfg.mode_for(dz);
    let (probes, exact) = match mode {
        DivergenceMode::Exact => (Tensor::vstack(&vec![Tensor::identity(dz); n]), true),
        DivergenceMode::Hutchinson { probes } => (rademacher_tensor(n * probes, dz, rng), false),
    };
    let mut y0 = Tensor::zeros(n, dz + 1);
    for i in 0..n {
        y0.row_mut(i)[..dz].copy_from_slice(z0.row(i));
    }
    let rhs = |t: f64, y: &Tensor| -> Result<Tensor> {
        let t = t.clamp(0.0, sched.horizon);
        let z = y.slice_cols(0, dz);
        let (s, tr) = score_and_trace(field, &z, x, t, &probes, exact)?;
        let beta = sched.beta(t);
        let g2 = sched.coeffs_unchecked(t).g2;
        let mut out = Tensor::zeros(n, dz + 1);
        for i in 0..n {
            let row = out.row_mut(i);
            for k in 0..dz {
                row[k] = -0.5 * beta * z.get(i, k) - 0.5 * g2 * s.get(i, k);
            }
            row[dz] = -0.5 * beta * dz as f64 - 0.5 * g2 * tr[i];
        }
        Ok(out)
    };
    let rk = Rk45Config {
        rtol: cfg.rtol,
        atol: cfg.atol,
        ..Default::default()
    };
    let sol = rk45(rhs, 0.0, sched.horizon, y0, &rk)?;
    let v_t = sched.marginal_var(sched.horizon);
    Ok((0..n)
        .map(|i| {
            let row = sol.y.row(i);
            let zt = &row[..dz];
            let sq: f64 = zt.iter().map(|v| v * v).sum();
            let log_pt = -0.5 * sq / v_t - 0.5 * dz as f64 * (2.0 * PI * v_t).ln();
            OdeSolveReport {
                log_density: log_pt + row[dz],
                steps_taken: sol.steps,
                max_error_estimate: sol.max_error,
                divergence_mode: mode,
            }
        })
        .collect())
}

pub fn flow_logdensity<S, R>(
    field: &S,
    x: &[f64],
    z0: &[f64],
    cfg: &OdeConfig,
    rng: &mut R,
) -> Result<OdeSolveReport>
where
    S: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    let out = flow_logdensity_batch(
        field,
        &Tensor::row_vector(x),
        &Tensor::row_vector(z0),
        cfg,
        rng,
    )?;
    Ok(out.into_iter().next().expect("one row in, one report out"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedSample {
    pub x: Vec<f64>,
    pub z0: Vec<f64>,
    pub log_pd_x_given_z0: f64,
    pub log_pd_z0: f64,
    pub log_pe_z0_given_x: f64,
    pub energy: f64,
    pub log_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeighReport {
    pub samples: Vec<WeightedSample>,
    /// Row indices whose ODE solve failed; they are left out of `samples`.
    pub failed: Vec<usize>,
}

/// Importance weights `w = e^{−U(x)} p_E(z₀|x) / (p_D(z₀) p_D(x|z₀))` in
/// log form. Rows are solved in chunks; a failing chunk is retried row by
/// row so only the offending rows are dropped.
pub fn weigh_samples<R: Rng + ?Sized>(
    ctx: &ScoreContext<'_>,
    batch: &DecodedBatch,
    cfg: &OdeConfig,
    rng: &mut R,
) -> Result<WeighReport> {
    cfg.validate()?;
    let n = batch.z0.rows();
    let mut log_pe = vec![None; n];
    let mut start = 0;
    while start < n {
        let end = (start + cfg.chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let xs = batch.x.select_rows(&idx);
        let zs = batch.z0.select_rows(&idx);
        match flow_logdensity_batch(ctx, &xs, &zs, cfg, rng) {
            Ok(reps) => {
                for (i, r) in idx.iter().zip(reps) {
                    log_pe[*i] = Some(r.log_density);
                }
            }
            Err(Error::Solver { .. }) if idx.len() > 1 => {
                for &i in &idx {
                    if let Ok(r) = flow_logdensity(ctx, batch.x.row(i), batch.z0.row(i), cfg, rng)
                    {
                        log_pe[i] = Some(r.log_density);
                    }
                }
            }
            Err(Error::Solver { .. }) => {}
            Err(e) => return Err(e),
        }
        start = end;
    }
    let mut samples = Vec::with_capacity(n);
    let mut failed = Vec::new();
    for (i, lpe) in log_pe.into_iter().enumerate() {
        match lpe {
            Some(lpe) if lpe.is_finite() => {
                let x = batch.x.row(i).to_vec();
                let energy = ctx.energy.energy(&x);
                let lpx = batch.log_px_given_z[i];
                let lpz = batch.log_pz[i];
                samples.push(WeightedSample {
                    log_weight: -energy + lpe - lpz - lpx,
                    x,
                    z0: batch.z0.row(i).to_vec(),
                    log_pd_x_given_z0: lpx,
                    log_pd_z0: lpz,
                    log_pe_z0_given_x: lpe,
                    energy,
                });
            }
            _ => failed.push(i),
        }
    }
    Ok(WeighReport { samples, failed })
}

/// Self-normalised importance estimate of `E_π[O(x)]`.
pub fn snis_expectation<F>(weighted: &[WeightedSample], observable: F) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let max = weighted
        .iter()
        .map(|w| w.log_weight)
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Estimation("no finite importance weight".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for w in weighted {
        if w.log_weight.is_finite() {
            let a = (w.log_weight - max).exp();
            num += a * observable(&w.x);
            den += a;
        }
    }
    Ok(num / den)
}

/// Normalised weights `w_i / Σ w`.
pub fn normalized_weights(weighted: &[WeightedSample]) -> Result<Vec<f64>> {
    let max = weighted
        .iter()
        .map(|w| w.log_weight)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Estimation("no finite importance weight".into()));
    }
    let a: Vec<f64> = weighted.iter().map(|w| (w.log_weight - max).exp()).collect();
    let s: f64 = a.iter().sum();
    Ok(a.into_iter().map(|v| v / s).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogZReport {
    /// `E[log w]`, the lower bound.
    pub mean_log_weight: f64,
    /// `std / √n`; `None` for a single sample.
    pub stderr: Option<f64>,
    /// `log mean w`, a consistent (not bounding) estimate.
    pub log_mean_weight: f64,
    pub n: usize,
}

pub fn logz_lower_bound(weighted: &[WeightedSample]) -> Result<LogZReport> {
    let n = weighted.len();
    if n == 0 {
        return Err(Error::Contract("log Z needs at least one sample".into()));
    }
    let lw: Vec<f64> = weighted.iter().map(|w| w.log_weight).collect();
    let mean = lw.iter().sum::<f64>() / n as f64;
    let stderr = (n > 1).then(|| {
        let var = lw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_mean_weight = max + (lw.iter().map(|v| (v - max).exp()).sum::<f64>() / n as f64).ln();
    Ok(LogZReport {
        mean_log_weight: mean,
        stderr,
        log_mean_weight,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_score_transports_prior_to_itself() {
        let field = PriorScore {
            schedule: SdeSchedule::default(),
            dim: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = [0.3, -1.2, 2.0];
        let r = flow_logdensity(&field, &[0.0], &z0, &OdeConfig::default(), &mut rng).unwrap();
        let expect = crate::decoder::standard_normal_log_density(&z0);
        assert!((r.log_density - expect).abs() < 1e-3, "{} vs {expect}", r.log_density);
    }

    #[test]
    fn zero_score_is_a_pure_contraction() {
        // with s ≡ 0, z_T = e^{−½∫β} z₀ and the divergence integrates to
        // −½ D ∫β
        let sched = SdeSchedule::default();
        let field = LinearScore {
            schedule: sched,
            m: Tensor::zeros(2, 2),
            b: vec![0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = [0.7, -0.4];
        let r = flow_logdensity(&field, &[0.0], &z0, &OdeConfig::default(), &mut rng).unwrap();
        let ib = sched.int_beta(1.0);
        let m = (-0.5 * ib).exp();
        let v = sched.marginal_var(1.0);
        let sq: f64 = z0.iter().map(|z| (m * z) * (m * z)).sum();
        let expect = -0.5 * sq / v - (2.0 * PI * v).ln() - ib;
        assert!((r.log_density - expect).abs() < 1e-3);
    }

    #[test]
    fn empty_batch_gives_nothing() {
        let field = PriorScore {
            schedule: SdeSchedule::default(),
            dim: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = flow_logdensity_batch(
            &field,
            &Tensor::zeros(0, 1),
            &Tensor::zeros(0, 2),
            &OdeConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert!(out.is_empty());
    }
}
