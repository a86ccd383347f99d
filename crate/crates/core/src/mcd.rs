//! Deterministic Minimum Covariance Determinant estimator.
//!
//! The rows are first expressed in affine invariant coordinates and
//! robustly standardized, and six deterministic initial scatter estimates
//! are computed there. Each one is turned into a
//! positive definite start, its `ceil(n/2)` most central cases seed a
//! C-step sequence with subsets of size `h = ceil(alpha n)`, and the
//! converged subset with the smallest covariance determinant wins.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernels::{average_ranks, centered_m_scale, median, RhoParams};
use crate::linalg::{cholesky, log_det_chol, sym_eigen, symmetrize};

pub const DEFAULT_ALPHA: f64 = 0.75;
const MAX_C_STEPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McdResult {
    pub location: DVector<f64>,
    /// Consistency-corrected scatter of the support.
    pub scatter: DMatrix<f64>,
    /// Sorted row indices of the retained cases.
    pub support: Vec<usize>,
    /// Determinant of the uncorrected support covariance.
    pub raw_determinant: f64,
    pub consistency_factor: f64,
}

impl McdResult {
    fn raw_scatter(&self) -> DMatrix<f64> {
        &self.scatter / self.consistency_factor
    }
}

/// `c_alpha = alpha / F_{chi2(k+2)}(chi2_k^{-1}(alpha))`; equals 1 at `alpha = 1`.
pub fn consistency_factor(alpha: f64, k: usize) -> f64 {
    if alpha >= 1.0 {
        return 1.0;
    }
    let q = ChiSquared::new(k as f64).expect("k >= 1").inverse_cdf(alpha);
    alpha / ChiSquared::new(k as f64 + 2.0).expect("k >= 1").cdf(q)
}

/// Subset size `ceil(alpha n)`.
pub fn subset_size(alpha: f64, n: usize) -> usize {
    ((alpha * n as f64).ceil() as usize).clamp(1, n)
}

/// Reweighted univariate MCD with `h = floor(n/2) + 1`: the contiguous
/// sorted window with the smallest variance gives a raw fit, then the mean
/// and Gaussian-consistent standard deviation of the values within the
/// 97.5% cutoff are returned. `None` when fewer than 3 values or the fit is
/// degenerate.
pub fn univariate_mcd(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n < 3 {
        return None;
    }
    let mut x = values.to_vec();
    x.sort_by(f64::total_cmp);
    let h = n / 2 + 1;
    let hf = h as f64;
    // shift for numerically stable running sums
    let shift = x[n / 2];
    let mut sum: f64 = x[..h].iter().map(|v| v - shift).sum();
    let mut sq: f64 = x[..h].iter().map(|v| (v - shift).powi(2)).sum();
    let mut best = (sq - sum * sum / hf, sum);
    for start in 1..=n - h {
        let (out, inc) = (x[start - 1] - shift, x[start + h - 1] - shift);
        sum += inc - out;
        sq += inc * inc - out * out;
        let var = sq - sum * sum / hf;
        if var < best.0 {
            best = (var, sum);
        }
    }
    let raw_var = best.0.max(0.0) / hf * consistency_factor(hf / n as f64, 1);
    if raw_var <= 0.0 {
        return None;
    }
    let raw_loc = shift + best.1 / hf;
    // one reweighting step at the 97.5% Gaussian quantile
    let cut = 2.241_402_727_604_947 * raw_var.sqrt();
    let kept: Vec<f64> = x.iter().copied().filter(|v| (v - raw_loc).abs() <= cut).collect();
    let m = kept.len() as f64;
    let loc = kept.iter().sum::<f64>() / m;
    let var = kept.iter().map(|v| (v - loc).powi(2)).sum::<f64>() / m * consistency_factor(0.975, 1);
    (var > 0.0).then(|| (loc, var.sqrt()))
}

fn mean_and_cov(u: &DMatrix<f64>, rows: &[usize]) -> (DVector<f64>, DMatrix<f64>) {
    let k = u.ncols();
    let h = rows.len() as f64;
    let mut mean = DVector::zeros(k);
    for &i in rows {
        mean += u.row(i).transpose();
    }
    mean /= h;
    let mut cov = DMatrix::zeros(k, k);
    for &i in rows {
        let d = u.row(i).transpose() - &mean;
        cov += &d * d.transpose();
    }
    (mean, symmetrize(&(cov / h)))
}

fn squared_distances(u: &DMatrix<f64>, location: &DVector<f64>, scatter: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = cholesky(scatter).map_err(|_| Error::SingularScatter)?;
    let l = chol.l();
    let mut out = Vec::with_capacity(u.nrows());
    for i in 0..u.nrows() {
        let d = u.row(i).transpose() - location;
        let y = l
            .solve_lower_triangular(&d)
            .ok_or(Error::SingularScatter)?;
        out.push(y.norm_squared());
    }
    Ok(out)
}

fn smallest(dist: &[f64], h: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut sel = order[..h].to_vec();
    sel.sort_unstable();
    sel
}

fn fit_support(u: &DMatrix<f64>, support: Vec<usize>, factor: f64) -> Result<McdResult> {
    let (location, raw) = mean_and_cov(u, &support);
    let chol = cholesky(&raw).map_err(|_| Error::SingularScatter)?;
    let logdet = log_det_chol(&chol);
    let k = u.ncols();
    let max = raw.diagonal().max();
    if !logdet.is_finite() || !(max > 0.0) || logdet < (k as f64) * (1e-14 * max).ln() {
        return Err(Error::SingularScatter);
    }
    Ok(McdResult {
        location,
        scatter: raw * factor,
        support,
        raw_determinant: logdet.exp(),
        consistency_factor: factor,
    })
}

/// One concentration step with the same subset size as `current`.
pub fn c_step(u: &DMatrix<f64>, current: &McdResult) -> Result<McdResult> {
    let dist = squared_distances(u, &current.location, &current.raw_scatter())?;
    let support = smallest(&dist, current.support.len());
    fit_support(u, support, current.consistency_factor)
}

fn concentrate(u: &DMatrix<f64>, mut fit: McdResult) -> Result<McdResult> {
    for _ in 0..MAX_C_STEPS {
        let next = c_step(u, &fit)?;
        if next.support == fit.support {
            return Ok(next);
        }
        fit = next;
    }
    Ok(fit)
}

fn correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let cov = c.transpose() * &c / n;
    let sd = cov.diagonal().map(|v| v.sqrt());
    DMatrix::from_fn(cov.nrows(), cov.ncols(), |a, b| {
        if sd[a] > 0.0 && sd[b] > 0.0 {
            cov[(a, b)] / (sd[a] * sd[b])
        } else if a == b {
            1.0
        } else {
            0.0
        }
    })
}

fn map_columns(z: &DMatrix<f64>, f: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for (j, col) in z.column_iter().enumerate() {
        let v = f(col.as_slice());
        out.column_mut(j).copy_from_slice(&v);
    }
    out
}

fn spatial_median(z: &DMatrix<f64>) -> DVector<f64> {
    let k = z.ncols();
    let mut m = DVector::from_fn(k, |j, _| median(z.column(j).as_slice()));
    for _ in 0..200 {
        let mut num = DVector::zeros(k);
        let mut den = 0.0;
        for row in z.row_iter() {
            let d = row.transpose() - &m;
            let norm = d.norm();
            if norm > 1e-12 {
                num += row.transpose() / norm;
                den += 1.0 / norm;
            }
        }
        if den == 0.0 {
            break;
        }
        let next = num / den;
        let step = (&next - &m).norm();
        m = next;
        if step < 1e-10 {
            break;
        }
    }
    m
}

fn initial_scatters(z: &DMatrix<f64>, scale: &RhoParams) -> Vec<Option<DMatrix<f64>>> {
    let (n, k) = z.shape();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");

    let tanh = correlation(&z.map(f64::tanh));
    let ranks = map_columns(z, average_ranks);
    let spearman = correlation(&ranks);
    let scores = ranks.map(|r| normal.inverse_cdf((r - 1.0 / 3.0) / (n as f64 + 1.0 / 3.0)));
    let normal_scores = correlation(&scores);

    let center = spatial_median(z);
    let mut signs = DMatrix::zeros(n, k);
    for i in 0..n {
        let d = z.row(i).transpose() - &center;
        let norm = d.norm();
        if norm > 0.0 {
            signs.row_mut(i).copy_from(&(d / norm).transpose());
        }
    }
    let spatial_sign = signs.transpose() * &signs / n as f64;

    let norms: Vec<f64> = z.row_iter().map(|r| r.norm()).collect();
    let half = smallest(&norms, n.div_ceil(2));
    let bacon = mean_and_cov(z, &half).1;

    let mut ogk = DMatrix::identity(k, k);
    for a in 0..k {
        for b in 0..a {
            let plus: Vec<f64> = z.column(a).iter().zip(z.column(b).iter()).map(|(x, y)| x + y).collect();
            let minus: Vec<f64> = z.column(a).iter().zip(z.column(b).iter()).map(|(x, y)| x - y).collect();
            let v = match (centered_m_scale(&plus, scale), centered_m_scale(&minus, scale)) {
                (Ok(sp), Ok(sm)) => (sp * sp - sm * sm) / 4.0,
                _ => 0.0,
            };
            ogk[(a, b)] = v;
            ogk[(b, a)] = v;
        }
    }

    vec![Some(tanh), Some(spearman), Some(normal_scores), Some(spatial_sign), Some(bacon), Some(ogk)]
}

/// Positive definite start from an initial scatter: robust variances along
/// its eigenvectors, and a location from coordinatewise medians of the
/// whitened data.
fn start_from_scatter(z: &DMatrix<f64>, s: &DMatrix<f64>, scale: &RhoParams) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let (_, e) = sym_eigen(s);
    let b = z * &e;
    let mut lambda = DVector::zeros(e.ncols());
    for j in 0..e.ncols() {
        let sj = centered_m_scale(b.column(j).as_slice(), scale).ok()?;
        lambda[j] = sj * sj;
    }
    let scatter = symmetrize(&(&e * DMatrix::from_diagonal(&lambda) * e.transpose()));
    let sqrt = DMatrix::from_diagonal(&lambda.map(f64::sqrt));
    let inv_sqrt = DMatrix::from_diagonal(&lambda.map(|v| 1.0 / v.sqrt()));
    let w = &b * inv_sqrt;
    let med = DVector::from_fn(w.ncols(), |j, _| median(w.column(j).as_slice()));
    let location = &e * sqrt * med;
    Some((location, scatter))
}

/// Coordinates that are invariant under affine maps of the rows: whitening
/// by the sample covariance, then rotation onto the eigenvectors of the
/// fourth-moment matrix `mean(|w|^2 w w^T)`. The remaining sign and order
/// ambiguity is harmless because the starts are equivariant under both.
fn invariant_coordinates(u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = u.nrows() as f64;
    let all: Vec<usize> = (0..u.nrows()).collect();
    let (mean, cov) = mean_and_cov(u, &all);
    let l = cholesky(&cov).map_err(|_| Error::SingularScatter)?.l();
    let mut centered = u.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let w = l
        .solve_lower_triangular(&centered.transpose())
        .ok_or(Error::SingularScatter)?
        .transpose();
    let mut kurt = DMatrix::zeros(u.ncols(), u.ncols());
    for row in w.row_iter() {
        kurt += row.transpose() * row * row.norm_squared();
    }
    let (_, e) = sym_eigen(&(kurt / n));
    Ok(w * e)
}

/// Deterministic MCD of the rows of `u` with coverage `alpha`.
pub fn mcd_estimate(u: &DMatrix<f64>, alpha: f64) -> Result<McdResult> {
    let (n, k) = u.shape();
    if !(0.5..1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("MCD coverage {alpha} outside [0.5, 1)")));
    }
    if k == 0 || n <= 2 * k {
        return Err(Error::TooFewCases { n, k });
    }
    let scale = RhoParams::default();
    let c = invariant_coordinates(u)?;
    let mut center = DVector::zeros(k);
    let mut spread = DVector::zeros(k);
    for j in 0..k {
        let col = c.column(j);
        center[j] = median(col.as_slice());
        spread[j] = centered_m_scale(col.as_slice(), &scale).map_err(|_| Error::SingularScatter)?;
    }
    let z = DMatrix::from_fn(n, k, |i, j| (c[(i, j)] - center[j]) / spread[j]);

    let h = subset_size(alpha, n);
    let h0 = n.div_ceil(2);
    let factor = consistency_factor(alpha, k);
    let starts = initial_scatters(&z, &scale);
    let fits: Vec<Option<McdResult>> = starts
        .par_iter()
        .map(|s| {
            let (loc, scat) = start_from_scatter(&z, s.as_ref()?, &scale)?;
            let dist = squared_distances(&z, &loc, &scat).ok()?;
            let first = fit_support(&z, smallest(&dist, h0), factor).ok()?;
            let dist = squared_distances(&z, &first.location, &first.raw_scatter()).ok()?;
            let fit = fit_support(&z, smallest(&dist, h), factor).ok()?;
            concentrate(&z, fit).ok()
        })
        .collect();

    let mut best: Option<McdResult> = None;
    for fit in fits.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => fit.raw_determinant < b.raw_determinant * (1.0 - 1e-12),
        };
        if better {
            best = Some(fit);
        }
    }
    let best = best.ok_or(Error::SingularScatter)?;
    // Final estimates are recomputed on the original coordinates so the
    // standardization leaves no rounding trace.
    fit_support(u, best.support, factor)
}
