//! Target energies `U(x)` with `π(x) ∝ exp(−U(x))`.
//!
//! Every energy can be written into a [`Graph`] as a batch map n×d → n×1,
//! which is how the decoder differentiates through `∇U` to any order.
//! Closed forms are provided where they are cheap, for the MCMC samplers.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::DMatrix;
#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::seq::index;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::random::normal;
use crate::tensor::Tensor;

pub trait Energy: Send + Sync {
    fn dim(&self) -> usize;

    /// Energies of the rows of `x` (n×d) as an n×1 node.
    fn graph(&self, g: &mut Graph, x: Var) -> Var;

    fn energy(&self, x: &[f64]) -> f64 {
        self.energy_batch(&Tensor::row_vector(x))[0]
    }

    fn energy_batch(&self, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let u = self.graph(&mut g, xv);
        g.value(u).data().to_vec()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row_vector(x));
        let u = self.graph(&mut g, xv);
        g.grad_values(u, &[xv], None).remove(0).into_vec()
    }

    /// Hessian-vector product `∇²U(x) v`.
    fn hvp(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::row_vector(x));
        let dv = g.constant(Tensor::row_vector(v));
        let u = self.graph(&mut g, xv);
        let gu = g.grad(u, &[xv], None)[0];
        let h = g.jvp(gu, &[xv], &[dv]);
        g.value(h).data().to_vec()
    }

    fn supports_minibatch(&self) -> bool {
        false
    }

    /// An unbiased stochastic version of this energy, if it has one.
    fn minibatch(&self, _rng: &mut dyn RngCore) -> Option<Box<dyn Energy>> {
        None
    }
}

/// `U(x) = ½‖x‖²`, so `log Z = (d/2) log 2π`.
#[derive(Clone, Debug)]
pub struct StandardGaussian {
    pub dim: usize,
}

impl StandardGaussian {
    pub fn log_z(&self) -> f64 {
        0.5 * self.dim as f64 * (2.0 * PI).ln()
    }
}

impl Energy for StandardGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        let sq = g.square(x);
        let s = g.row_sum(sq);
        g.scale(s, 0.5)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub centers: Vec<Vec<f64>>,
    pub variances: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    /// Equal weights.
    pub fn uniform(centers: Vec<Vec<f64>>, variances: Vec<f64>) -> Self {
        let k = centers.len();
        MixtureSpec {
            centers,
            variances,
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn validate(&self) -> Result<usize> {
        let k = self.centers.len();
        if k == 0 {
            return Err(Error::Config("mixture has no components".into()));
        }
        if self.variances.len() != k || self.weights.len() != k {
            return Err(Error::Config(format!(
                "mixture with {k} centers has {} variances and {} weights",
                self.variances.len(),
                self.weights.len()
            )));
        }
        let d = self.centers[0].len();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config(
                "mixture centers must share a positive dimension".into(),
            ));
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Config("mixture variances must be positive".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        Ok(d)
    }

    /// Two components at (±5, 0), variance 0.5.
    pub fn mog2() -> Self {
        Self::uniform(vec![vec![5.0, 0.0], vec![-5.0, 0.0]], vec![0.5, 0.5])
    }

    /// Like [`Self::mog2`] with unequal variances 1.5 and 0.3.
    pub fn mog2_imbalanced() -> Self {
        Self::uniform(vec![vec![5.0, 0.0], vec![-5.0, 0.0]], vec![1.5, 0.3])
    }

    /// Six components evenly spaced on the radius-5 circle, variance 0.1.
    pub fn mog6() -> Self {
        let centers = (0..6)
            .map(|k| {
                let a = k as f64 * PI / 3.0;
                vec![5.0 * a.cos(), 5.0 * a.sin()]
            })
            .collect();
        Self::uniform(centers, vec![0.1; 6])
    }

    /// 3×3 grid on {−5, 0, 5}², variance 0.3.
    pub fn mog9() -> Self {
        let mut centers = Vec::new();
        for i in [-5.0, 0.0, 5.0] {
            for j in [-5.0, 0.0, 5.0] {
                centers.push(vec![i, j]);
            }
        }
        Self::uniform(centers, vec![0.3; 9])
    }
}

/// Normalised Gaussian mixture, `U = −log Σ_k w_k N(x; μ_k, σ_k² I)`.
#[derive(Clone, Debug)]
pub struct Mixture {
    spec: MixtureSpec,
    dim: usize,
    centers_t: Tensor,
    log_norm: Vec<f64>,
}

pub fn make_mog(spec: MixtureSpec) -> Result<Mixture> {
    let dim = spec.validate()?;
    let k = spec.centers.len();
    let mut centers_t = Tensor::zeros(dim, k);
    for (j, c) in spec.centers.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            centers_t.set(i, j, v);
        }
    }
    let log_norm = spec
        .weights
        .iter()
        .zip(&spec.variances)
        .map(|(&w, &v)| w.ln() - 0.5 * dim as f64 * (2.0 * PI * v).ln())
        .collect();
    Ok(Mixture {
        spec,
        dim,
        centers_t,
        log_norm,
    })
}

impl Mixture {
    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        self.spec
            .centers
            .iter()
            .zip(&self.spec.variances)
            .zip(&self.log_norm)
            .map(|((c, &v), &ln)| {
                let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                ln - 0.5 * d2 / v
            })
            .collect()
    }

    /// Exact ancestral sampling, one row per draw.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let mut out = Tensor::zeros(n, self.dim);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.spec.weights.len() - 1;
            for (j, &w) in self.spec.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let s = self.spec.variances[k].sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                let e = normal(rng);
                *o = self.spec.centers[k][j] + s * e;
            }
        }
        out
    }
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln()
}

impl Energy for Mixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        // ‖x−μ‖² = ‖x‖² − 2xᵀμ + ‖μ‖², vectorised over components
        let k = self.spec.centers.len();
        let inv2v: Vec<f64> = self.spec.variances.iter().map(|v| 0.5 / v).collect();
        let bias: Vec<f64> = (0..k)
            .map(|j| {
                let mu2: f64 = self.spec.centers[j].iter().map(|c| c * c).sum();
                self.log_norm[j] - mu2 * inv2v[j]
            })
            .collect();
        let ct = g.constant(self.centers_t.clone());
        let a = g.constant(Tensor::row_vector(&inv2v));
        let a2 = g.constant(Tensor::row_vector(
            &inv2v.iter().map(|v| 2.0 * v).collect::<Vec<_>>(),
        ));
        let b = g.constant(Tensor::row_vector(&bias));
        let sq = g.square(x);
        let sq = g.row_sum(sq);
        let xm = g.matmul(x, ct);
        let cross = g.mul(xm, a2);
        let quad = g.mul(sq, a);
        let logits = g.sub(cross, quad);
        let logits = g.add(logits, b);
        let lse = g.row_logsumexp(logits);
        g.neg(lse)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        -logsumexp(&self.log_terms(x))
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let t = self.log_terms(x);
        let lse = logsumexp(&t);
        let mut out = vec![0.0; self.dim];
        for ((c, &v), &lt) in self.spec.centers.iter().zip(&self.spec.variances).zip(&t) {
            let r = (lt - lse).exp();
            for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(c)) {
                *o += r * (a - b) / v;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RingVariant {
    Ring,
    Ring5,
}

/// `U(x) = min_k (‖x‖ − r_k)² / 0.32` over a set of radii.
#[derive(Clone, Debug)]
pub struct RingEnergy {
    pub radii: Vec<f64>,
    pub width: f64,
    pub dim: usize,
}

pub fn make_ring_family(variant: RingVariant) -> RingEnergy {
    let radii = match variant {
        RingVariant::Ring => vec![2.0],
        RingVariant::Ring5 => vec![1.0, 2.0, 3.0, 4.0, 5.0],
    };
    RingEnergy {
        radii,
        width: 0.32,
        dim: 2,
    }
}

impl RingEnergy {
    fn nearest(&self, r: f64) -> f64 {
        self.radii
            .iter()
            .copied()
            .fold((f64::INFINITY, 0.0), |(best, rk), k| {
                let d = (r - k) * (r - k);
                if d < best {
                    (d, k)
                } else {
                    (best, rk)
                }
            })
            .1
    }
}

impl Energy for RingEnergy {
    fn dim(&self) -> usize {
        self.dim
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        let sq = g.square(x);
        let s = g.row_sum(sq);
        let r = g.sqrt(s);
        let radii = g.constant(Tensor::row_vector(&self.radii));
        let diff = g.sub(r, radii);
        let d2 = g.square(diff);
        let d2 = if self.radii.len() == 1 {
            d2
        } else {
            g.row_min(d2)
        };
        g.scale(d2, 1.0 / self.width)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = self.nearest(r);
        (r - k) * (r - k) / self.width
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let k = self.nearest(r);
        let c = 2.0 * (r - k) / (self.width * r);
        x.iter().map(|v| c * v).collect()
    }
}

/// Bayesian logistic regression posterior over `(w, b)` with an isotropic
/// Gaussian prior.
#[derive(Clone, Debug)]
pub struct LogisticPosterior {
    features: Tensor,
    labels: Vec<f64>,
    prior_variance: f64,
    data_scale: f64,
}

pub fn make_logistic_posterior(
    features: Tensor,
    labels: &[f64],
    prior_variance: f64,
) -> Result<LogisticPosterior> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    if !(prior_variance > 0.0) {
        return Err(Error::Config("prior variance must be positive".into()));
    }
    if !labels.is_empty() && labels.iter().all(|&l| l == labels[0]) {
        log::warn!("all {} labels are equal to {}", labels.len(), labels[0]);
    }
    Ok(LogisticPosterior {
        features,
        labels: labels.to_vec(),
        prior_variance,
        data_scale: 1.0,
    })
}

/// Column-wise zero mean, unit variance (columns with zero spread are only
/// centred).
pub fn standardize(features: &Tensor) -> Tensor {
    let (n, p) = features.shape();
    let mut out = features.clone();
    if n == 0 {
        return out;
    }
    for j in 0..p {
        let mean = (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|i| (features.get(i, j) - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.set(i, j, (features.get(i, j) - mean) / sd);
        }
    }
    out
}

impl LogisticPosterior {
    pub fn n_data(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    /// Energy restricted to rows `idx`, with the data term scaled by
    /// `|D| / |B|`.
    pub fn subset(&self, idx: &[usize]) -> LogisticPosterior {
        LogisticPosterior {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            prior_variance: self.prior_variance,
            data_scale: self.data_scale * self.labels.len() as f64 / idx.len().max(1) as f64,
        }
    }

    pub fn with_batch_size(&self, batch: usize) -> MinibatchLogistic {
        MinibatchLogistic {
            full: self.clone(),
            batch,
        }
    }

    /// `P(label = 1 | features, θ)` for one parameter vector.
    pub fn predict(&self, theta: &[f64], features: &Tensor) -> Vec<f64> {
        let p = self.n_features();
        (0..features.rows())
            .map(|i| {
                let z: f64 = features
                    .row(i)
                    .iter()
                    .zip(&theta[..p])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + theta[p];
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }
}

impl Energy for LogisticPosterior {
    fn dim(&self) -> usize {
        self.features.cols() + 1
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        let p = self.features.cols();
        let d = p + 1;
        let sq = g.square(x);
        let sq = g.row_sum(sq);
        let prior = g.scale(sq, 0.5 / self.prior_variance);
        let prior = g.offset(
            prior,
            0.5 * d as f64 * (2.0 * PI * self.prior_variance).ln(),
        );
        if self.labels.is_empty() {
            return prior;
        }
        let w = g.slice_cols(x, 0, p);
        let b = g.slice_cols(x, p, 1);
        let ft = g.constant(self.features.transpose());
        let y = g.constant(Tensor::row_vector(&self.labels));
        let z = g.matmul(w, ft);
        let z = g.add(z, b);
        let sp = g.softplus(z);
        let zy = g.mul(z, y);
        let nll = g.sub(sp, zy);
        let nll = g.row_sum(nll);
        let nll = g.scale(nll, self.data_scale);
        g.add(prior, nll)
    }
}

/// Draws a fresh minibatch for every call to [`Energy::minibatch`].
#[derive(Clone, Debug)]
pub struct MinibatchLogistic {
    full: LogisticPosterior,
    batch: usize,
}

impl Energy for MinibatchLogistic {
    fn dim(&self) -> usize {
        self.full.dim()
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        self.full.graph(g, x)
    }

    fn supports_minibatch(&self) -> bool {
        true
    }

    fn minibatch(&self, rng: &mut dyn RngCore) -> Option<Box<dyn Energy>> {
        let n = self.full.n_data();
        if self.batch >= n || n == 0 {
            return None;
        }
        let idx = index::sample(rng, n, self.batch).into_vec();
        Some(Box::new(self.full.subset(&idx)))
    }
}

/// Periodic square-lattice Ising model and its continuous relaxation.
#[derive(Clone, Debug, PartialEq)]
pub struct IsingSpec {
    pub side: usize,
    pub temperature: f64,
    /// Diagonal shift making `K + αI` positive definite. `None` picks
    /// `0.1 − λ_min(K)`.
    pub alpha: Option<f64>,
}

impl IsingSpec {
    pub fn n_spins(&self) -> usize {
        self.side * self.side
    }

    /// Nearest-neighbour bonds (right and down of every site), periodic.
    /// On small lattices a bond may appear twice; self-bonds are dropped.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let l = self.side;
        let mut out = Vec::new();
        for r in 0..l {
            for c in 0..l {
                let i = r * l + c;
                for j in [r * l + (c + 1) % l, ((r + 1) % l) * l + c] {
                    if i != j {
                        out.push((i, j));
                    }
                }
            }
        }
        out
    }

    /// `K` with `½ sᵀKs = Σ_<ij> s_i s_j / T`.
    pub fn coupling(&self) -> Result<Tensor> {
        if self.side == 0 {
            return Err(Error::Config("lattice side must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let n = self.n_spins();
        let mut k = Tensor::zeros(n, n);
        for (i, j) in self.bonds() {
            k.set(i, j, k.get(i, j) + 1.0 / self.temperature);
            k.set(j, i, k.get(j, i) + 1.0 / self.temperature);
        }
        Ok(k)
    }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

#[derive(Clone, Debug)]
pub struct IsingRelaxed {
    pub spec: IsingSpec,
    pub alpha: f64,
    coupling: Tensor,
    a_inv: Tensor,
    log_det_a: f64,
}

pub fn make_ising_relaxed(spec: IsingSpec) -> Result<IsingRelaxed> {
    let k = spec.coupling()?;
    let n = spec.n_spins();
    let km = to_dmatrix(&k);
    let lambda_min = km.clone().symmetric_eigenvalues().min();
    let alpha = spec.alpha.unwrap_or(0.1 - lambda_min);
    if !(alpha.is_finite()) {
        return Err(Error::Config("alpha must be finite".into()));
    }
    let a = km + DMatrix::<f64>::identity(n, n) * alpha;
    let Some(chol) = a.clone().cholesky() else {
        return Err(Error::Config(format!(
            "K + αI is not positive definite for α = {alpha}: smallest eigenvalue {}",
            lambda_min + alpha
        )));
    };
    let log_det_a = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = chol.inverse();
    let mut a_inv = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a_inv.set(i, j, 0.5 * (inv[(i, j)] + inv[(j, i)]));
        }
    }
    Ok(IsingRelaxed {
        spec,
        alpha,
        coupling: k,
        a_inv,
        log_det_a,
    })
}

impl IsingRelaxed {
    pub fn coupling(&self) -> &Tensor {
        &self.coupling
    }

    pub fn log_det_a(&self) -> f64 {
        self.log_det_a
    }

    /// `log Z_relaxed − log Z_Ising`.
    pub fn logz_offset(&self) -> f64 {
        let n = self.spec.n_spins() as f64;
        0.5 * self.log_det_a - 0.5 * n * ((2.0 / PI).ln() - self.alpha)
    }

    /// Convert a partition-function estimate of the relaxed model into one
    /// for the discrete spins.
    pub fn ising_logz_from_relaxed(&self, relaxed_logz: f64) -> f64 {
        relaxed_logz - self.logz_offset()
    }
}

impl Energy for IsingRelaxed {
    fn dim(&self) -> usize {
        self.spec.n_spins()
    }

    fn graph(&self, g: &mut Graph, x: Var) -> Var {
        let ai = g.constant(self.a_inv.clone());
        let ax = g.matmul(x, ai);
        let quad = g.row_dot(ax, x);
        let quad = g.scale(quad, 0.5);
        let lc = g.log_cosh(x);
        let lc = g.row_sum(lc);
        g.sub(quad, lc)
    }

    fn energy(&self, x: &[f64]) -> f64 {
        let n = x.len();
        let mut quad = 0.0;
        for i in 0..n {
            let row = self.a_inv.row(i);
            quad += x[i] * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let lc: f64 = x
            .iter()
            .map(|&v| {
                let a = v.abs();
                a + (-2.0 * a).exp().ln_1p() - core::f64::consts::LN_2
            })
            .sum();
        0.5 * quad - lc
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                self.a_inv
                    .row(i)
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    - x[i].tanh()
            })
            .collect()
    }
}

/// Round relaxed variables to spins with `P(s_i = +1) = 1/(1 + e^{−2x_i})`.
pub fn ising_discretize<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vec<i8> {
    x.iter()
        .map(|&v| {
            let p = 1.0 / (1.0 + (-2.0 * v).exp());
            if rng.random::<f64>() < p {
                1
            } else {
                -1
            }
        })
        .collect()
}

pub const MAX_ENUMERATION_SPINS: usize = 20;

/// `log Σ_s exp(Σ_<ij> s_i s_j / T)` by exhaustive enumeration.
pub fn ising_exact_logz(spec: &IsingSpec) -> Result<f64> {
    let n = spec.n_spins();
    if n > MAX_ENUMERATION_SPINS {
        return Err(Error::Config(format!(
            "exact enumeration is limited to {MAX_ENUMERATION_SPINS} spins, lattice has {n}"
        )));
    }
    if !(spec.temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let bonds = spec.bonds();
    let beta = 1.0 / spec.temperature;
    let terms: Vec<f64> = (0u64..1 << n)
        .map(|state| {
            let s = |i: usize| if state >> i & 1 == 1 { 1.0 } else { -1.0 };
            beta * bonds.iter().map(|&(i, j)| s(i) * s(j)).sum::<f64>()
        })
        .collect();
    Ok(logsumexp(&terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mog2_value_at_mode() {
        let e = make_mog(MixtureSpec::mog2()).unwrap();
        let expected = -(0.5 / (2.0 * PI * 0.5) * (1.0 + (-100.0f64).exp())).ln();
        assert!((e.energy(&[5.0, 0.0]) - expected).abs() < 1e-12);
        assert!((expected - 1.8379).abs() < 1e-4);
        let g = e.energy_batch(&Tensor::row_vector(&[5.0, 0.0]))[0];
        assert!((g - expected).abs() < 1e-10);
    }

    #[test]
    fn standard_gaussian_mixture_at_origin() {
        let e = make_mog(MixtureSpec::uniform(vec![vec![0.0, 0.0]], vec![1.0])).unwrap();
        assert!((e.energy(&[0.0, 0.0]) - (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn mixture_symmetry_and_errors() {
        let e = make_mog(MixtureSpec::mog2()).unwrap();
        let g = e.grad(&[0.0, 0.0]);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let empty = MixtureSpec::uniform(vec![], vec![]);
        assert!(matches!(make_mog(empty), Err(Error::Config(_))));
    }

    #[test]
    fn ring_values() {
        let r = make_ring_family(RingVariant::Ring);
        assert_eq!(r.energy(&[2.0, 0.0]), 0.0);
        assert!((r.energy(&[0.0, 0.0]) - 12.5).abs() < 1e-12);
        let r5 = make_ring_family(RingVariant::Ring5);
        assert!(r5.energy(&[0.0, 3.0]).abs() < 1e-12);
        let gv = r5.energy_batch(&Tensor::row_vector(&[0.3, 2.9]))[0];
        assert!((gv - r5.energy(&[0.3, 2.9])).abs() < 1e-12);
    }

    #[test]
    fn logistic_trivial_cases() {
        let e = make_logistic_posterior(Tensor::zeros(0, 2), &[], 1.0).unwrap();
        let x = [0.5, -1.0, 2.0];
        let c = 1.5 * (2.0 * PI).ln();
        assert!((e.energy(&x) - (0.5 * 5.25 + c)).abs() < 1e-12);
        let one = make_logistic_posterior(Tensor::row_vector(&[0.7, -0.2]), &[1.0], 1.0).unwrap();
        assert!((one.energy(&[0.0; 3]) - (c + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ising_small_cases() {
        let spec = IsingSpec {
            side: 1,
            temperature: 1.0,
            alpha: Some(1.0),
        };
        assert_eq!(spec.bonds(), Vec::new());
        assert!((ising_exact_logz(&spec).unwrap() - 2.0f64.ln()).abs() < 1e-12);
        let e = make_ising_relaxed(spec).unwrap();
        let x = 0.8f64;
        let expect = 0.5 * x * x - x.cosh().ln();
        assert!((e.energy(&[x]) - expect).abs() < 1e-12);
        assert_eq!(e.energy(&[0.0]), 0.0);
    }

    #[test]
    fn ising_rejects_indefinite_shift() {
        let spec = IsingSpec {
            side: 4,
            temperature: 2.0,
            alpha: Some(0.1),
        };
        match make_ising_relaxed(spec) {
            Err(Error::Config(msg)) => assert!(msg.contains("smallest eigenvalue"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let ok = make_ising_relaxed(IsingSpec {
            side: 4,
            temperature: 2.0,
            alpha: None,
        })
        .unwrap();
        assert!((ok.alpha - 2.1).abs() < 1e-9);
    }

    #[test]
    fn discretize_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = ising_discretize(&[50.0, -50.0], &mut rng);
        assert_eq!(s, vec![1, -1]);
    }
}
