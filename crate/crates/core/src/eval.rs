//! Sample-quality statistics: unbiased RBF-kernel MMD and 2D histograms.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by std's inherent methods when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pairs used for the median bandwidth when the pooled set is larger.
pub const MEDIAN_MAX_PAIRS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmdReport {
    pub mmd_squared: f64,
    pub bandwidth: f64,
    pub m: usize,
    pub repeats: usize,
    pub mean_over_repeats: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the pooled rows. The pool is sorted
/// first, so the result does not depend on the order of the inputs even
/// when pairs are subsampled.
pub fn median_pooled_distance(x: &Tensor, y: &Tensor) -> f64 {
    let mut pool: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    pool.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let n = pool.len();
    let total = n * (n - 1) / 2;
    let mut d: Vec<f64> = if total <= MEDIAN_MAX_PAIRS {
        let mut v = Vec::with_capacity(total);
        for i in 0..n {
            for j in i + 1..n {
                v.push(sq_dist(pool[i], pool[j]));
            }
        }
        v
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d6d64);
        (0..MEDIAN_MAX_PAIRS)
            .map(|_| {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                sq_dist(pool[i], pool[j])
            })
            .collect()
    };
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    m.sqrt()
}

/// Unbiased MMD² with `k(a, b) = exp(−‖a − b‖² / (2h²))`: diagonal terms
/// left out of the within-set sums, kept in the cross sum.
pub fn mmd_with_bandwidth(x: &Tensor, y: &Tensor, h: f64) -> Result<f64> {
    let m = x.rows();
    if m < 2 || y.rows() != m {
        return Err(Error::Contract(alloc::format!(
            "MMD needs two sets of equal size m ≥ 2, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Contract("sample dimensions differ".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Contract("bandwidth must be positive".into()));
    }
    let c = -0.5 / (h * h);
    let within = |a: &Tensor| -> f64 {
        let mut s = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                s += (c * sq_dist(a.row(i), a.row(j))).exp();
            }
        }
        2.0 * s
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..m {
            cross += (c * sq_dist(x.row(i), y.row(j))).exp();
        }
    }
    let mf = m as f64;
    Ok((within(x) + within(y)) / (mf * (mf - 1.0)) - 2.0 * cross / (mf * mf))
}

pub fn mmd_rbf(x: &Tensor, y: &Tensor) -> Result<MmdReport> {
    if x.rows() < 2 || y.rows() != x.rows() {
        return Err(Error::Contract(alloc::format!(
            "MMD needs two sets of equal size m ≥ 2, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let mut h = median_pooled_distance(x, y);
    if !(h > 0.0) {
        // all points coincide; any bandwidth gives k ≡ 1
        h = 1.0;
    }
    let v = mmd_with_bandwidth(x, y, h)?;
    Ok(MmdReport {
        mmd_squared: v,
        bandwidth: h,
        m: x.rows(),
        repeats: 1,
        mean_over_repeats: v,
    })
}

/// Mean MMD² over `repeats` pairs of size-`m` subsamples, each drawn
/// without replacement from each pool.
pub fn mmd_repeated<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    m: usize,
    repeats: usize,
    rng: &mut R,
) -> Result<MmdReport> {
    if repeats == 0 {
        return Err(Error::Contract("repeats must be at least 1".into()));
    }
    if x.rows() < m || y.rows() < m {
        return Err(Error::Contract(alloc::format!(
            "need at least {m} rows in each set, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let mut vals = Vec::with_capacity(repeats);
    let mut first = None;
    for _ in 0..repeats {
        let ix = rand::seq::index::sample(rng, x.rows(), m).into_vec();
        let iy = rand::seq::index::sample(rng, y.rows(), m).into_vec();
        let r = mmd_rbf(&x.select_rows(&ix), &y.select_rows(&iy))?;
        vals.push(r.mmd_squared);
        first.get_or_insert(r);
    }
    let mut r = first.unwrap();
    r.repeats = repeats;
    r.mean_over_repeats = vals.iter().sum::<f64>() / repeats as f64;
    Ok(r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub bounds: [(f64, f64); 2],
    pub bins: usize,
    /// Row-major, `counts[i * bins + j]` for x-bin `i`, y-bin `j`.
    pub counts: Vec<u64>,
    pub spill: u64,
}

pub fn histogram2d(x: &Tensor, bounds: [(f64, f64); 2], bins: usize) -> Result<Histogram2d> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
        return Err(Error::Config("histogram bounds must satisfy min < max".into()));
    }
    if x.cols() != 2 {
        return Err(Error::Shape("histogram2d needs two columns".into()));
    }
    let mut counts = vec![0u64; bins * bins];
    let mut spill = 0;
    let cell = |v: f64, (lo, hi): (f64, f64)| -> Option<usize> {
        if !(v >= lo && v <= hi) {
            return None;
        }
        Some((((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
    };
    for r in 0..x.rows() {
        match (cell(x.get(r, 0), bounds[0]), cell(x.get(r, 1), bounds[1])) {
            (Some(i), Some(j)) => counts[i * bins + j] += 1,
            _ => spill += 1,
        }
    }
    Ok(Histogram2d {
        bounds,
        bins,
        counts,
        spill,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sets_give_zero() {
        let x = Tensor::filled(5, 2, 1.5);
        let r = mmd_rbf(&x, &x.clone()).unwrap();
        assert_eq!(r.mmd_squared, 0.0);
    }

    #[test]
    fn single_point_histogram() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![9.0, 0.0]]);
        let h = histogram2d(&x, [(-1.0, 1.0), (-1.0, 1.0)], 4).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.spill, 1);
        assert!(histogram2d(&x, [(1.0, 1.0), (-1.0, 1.0)], 4).is_err());
    }

    #[test]
    fn too_few_samples() {
        let x = Tensor::zeros(1, 2);
        assert!(matches!(mmd_rbf(&x, &x), Err(Error::Contract(_))));
    }
}
