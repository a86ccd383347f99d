//! Cellwise and casewise robust principal subspace fit.
//!
//! The fit minimizes
//!
//! ```text
//! L = s2^2 / m * sum_i m_i rho2( t_i / s2 ),
//! t_i = sqrt( 1/m_i * sum_j m_ij s1_j^2 rho1( r_ij / s1_j ) ),
//! r_ij = z_ij - mu_j - u_i . v_j
//! ```
//!
//! over `(mu, U, V)` by alternating weighted least squares. Every block
//! update minimizes a quadratic majorizer of `L` whose weights are
//! `m_ij * w_case_i * w_cell_ij`, so the objective never increases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::kernels::{m_scale, median, Rho, RhoParams};
use crate::linalg::{solve_psd, truncated_svd};
use crate::mcd::univariate_mcd;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellPcaOptions {
    /// Loss on standardized cell residuals.
    pub rho1: Rho,
    /// Loss on standardized casewise total deviations.
    pub rho2: Rho,
    /// Constants of the M-scales that fix `s1` and `s2`.
    pub scale: RhoParams,
    pub max_iter: usize,
    /// Relative objective decrease below which iteration stops.
    pub tol: f64,
    pub inner_max_iter: usize,
    pub inner_tol: f64,
    /// Fail with [`Error::NoConvergence`] instead of returning the last
    /// iterate when `max_iter` is exhausted.
    pub require_convergence: bool,
}

impl Default for CellPcaOptions {
    fn default() -> Self {
        CellPcaOptions {
            rho1: Rho::default(),
            rho2: Rho::default(),
            scale: RhoParams::default(),
            max_iter: 100,
            tol: 1e-7,
            inner_max_iter: 3,
            inner_tol: 1e-12,
            require_convergence: false,
        }
    }
}

impl CellPcaOptions {
    /// Squared losses everywhere: the fit reduces to classical PCA.
    pub fn classical() -> Self {
        CellPcaOptions {
            rho1: Rho::Quadratic,
            rho2: Rho::Quadratic,
            ..Default::default()
        }
    }

    fn is_classical(&self) -> bool {
        matches!(self.rho1, Rho::Quadratic) && matches!(self.rho2, Rho::Quadratic)
    }
}

/// Result of [`fit_subspace`].
#[derive(Debug, Clone, Serialize)]
pub struct SubspaceFit {
    /// Center, in standardized units.
    pub mu: DVector<f64>,
    /// `p x k` loadings with orthonormal columns.
    pub v: DMatrix<f64>,
    /// `n x k` scores.
    pub u: DMatrix<f64>,
    pub sigma1: DVector<f64>,
    pub sigma2: f64,
    /// `z - mu - U V^T` on observed cells, zero elsewhere.
    pub residuals: DMatrix<f64>,
    /// Cellwise weights; unobserved cells carry weight 1 (zero residual).
    pub cell_weights: DMatrix<f64>,
    pub case_weights: DVector<f64>,
    pub total_deviations: DVector<f64>,
    /// Observed-cell indicator.
    pub mask: DMatrix<bool>,
    /// Objective at the start and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl SubspaceFit {
    pub fn rank(&self) -> usize {
        self.v.ncols()
    }

    /// Fitted matrix `1 mu^T + U V^T`.
    pub fn fitted(&self) -> DMatrix<f64> {
        let mut zhat = &self.u * self.v.transpose();
        for mut row in zhat.row_iter_mut() {
            row += self.mu.transpose();
        }
        zhat
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

/// Casewise total deviation of one row.
pub fn total_deviation(residuals: &[f64], mask: &[bool], sigma1: &[f64], rho1: &Rho) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&r, &obs), &s) in residuals.iter().zip(mask).zip(sigma1) {
        if obs {
            sum += s * s * rho1.rho(r / s);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRow { row: 0 });
    }
    Ok((sum / count as f64).sqrt())
}

/// Objective value for given residuals and scales. Unobserved cells and
/// rows without observed cells contribute nothing.
pub fn objective(
    residuals: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    sigma1: &DVector<f64>,
    sigma2: f64,
    rho1: &Rho,
    rho2: &Rho,
) -> f64 {
    let (n, p) = residuals.shape();
    let mut total = 0.0;
    let mut m = 0usize;
    for i in 0..n {
        let mut sum = 0.0;
        let mut mi = 0usize;
        for j in 0..p {
            if mask[(i, j)] {
                let s = sigma1[j];
                sum += s * s * rho1.rho(residuals[(i, j)] / s);
                mi += 1;
            }
        }
        if mi > 0 {
            let t = (sum / mi as f64).sqrt();
            total += mi as f64 * rho2.rho(t / sigma2);
            m += mi;
        }
    }
    if m == 0 {
        return 0.0;
    }
    sigma2 * sigma2 * total / m as f64
}

/// Objective of a fit evaluated on `z` with the fit's own scales.
pub fn loss(z: &DataMatrix, fit: &SubspaceFit, rho1: &Rho, rho2: &Rho) -> f64 {
    let r = residual_matrix(z, &fit.mu, &fit.u, &fit.v);
    objective(&r, z.mask(), &fit.sigma1, fit.sigma2, rho1, rho2)
}

/// `w_ij = psi1(r_ij / s1_j) / (r_ij / s1_j)`, 1 at zero.
pub fn cell_weights(residuals: &DMatrix<f64>, sigma1: &DVector<f64>, rho1: &Rho) -> DMatrix<f64> {
    DMatrix::from_fn(residuals.nrows(), residuals.ncols(), |i, j| {
        rho1.weight(residuals[(i, j)] / sigma1[j])
    })
}

/// `w_i = psi2(t_i / s2) / (t_i / s2)`, 1 at zero.
pub fn case_weights(total_deviations: &DVector<f64>, sigma2: f64, rho2: &Rho) -> DVector<f64> {
    total_deviations.map(|t| rho2.weight(t / sigma2))
}

/// `Z_imp = Zhat + (W_cell . M) . R`: observed cells are pulled toward the
/// fit according to their weight, unobserved cells take the fitted value.
pub fn impute(z: &DataMatrix, fit: &SubspaceFit) -> DataMatrix {
    let zhat = fit.fitted();
    let imputed = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| match z.get(i, j) {
        Some(v) => {
            let w = fit.cell_weights[(i, j)];
            if w == 1.0 {
                v
            } else {
                zhat[(i, j)] + w * (v - zhat[(i, j)])
            }
        }
        None => zhat[(i, j)],
    });
    DataMatrix::new(imputed)
}

/// Scores of a single row given the center and loadings, by inner
/// iteratively reweighted least squares started from `start` (or from the
/// unweighted least-squares fit on the observed coordinates).
#[allow(clippy::too_many_arguments)]
pub fn solve_scores(
    z_row: &[f64],
    mask: &[bool],
    mu: &DVector<f64>,
    v: &DMatrix<f64>,
    sigma1: &DVector<f64>,
    sigma2: f64,
    options: &CellPcaOptions,
    start: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let k = v.ncols();
    let obs: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
    if obs.is_empty() {
        return Err(Error::EmptyRow { row: 0 });
    }
    let vo = DMatrix::from_fn(obs.len(), k, |r, c| v[(obs[r], c)]);
    let gram = vo.transpose() * &vo;
    let scale = gram.trace().max(f64::MIN_POSITIVE);
    let sv = gram.clone().symmetric_eigenvalues();
    if obs.len() < k || sv.iter().any(|&s| s <= 1e-10 * scale) {
        return Err(Error::RankDeficient { rank: k });
    }
    let u0 = match start {
        Some(u) => u.clone(),
        None => {
            let rhs = DVector::from_fn(k, |c, _| obs.iter().map(|&j| v[(j, c)] * (z_row[j] - mu[j])).sum());
            solve_psd(&gram, &rhs).unwrap_or_else(|| DVector::zeros(k))
        }
    };
    Ok(row_irls(z_row, mask, mu, v, sigma1, sigma2, options, u0))
}

#[allow(clippy::too_many_arguments)]
fn row_irls(
    z_row: &[f64],
    mask: &[bool],
    mu: &DVector<f64>,
    v: &DMatrix<f64>,
    sigma1: &DVector<f64>,
    sigma2: f64,
    options: &CellPcaOptions,
    mut u: DVector<f64>,
) -> DVector<f64> {
    let (p, k) = v.shape();
    let mut resid = vec![0.0; p];
    let mut w = vec![0.0; p];
    for _ in 0..options.inner_max_iter {
        row_residuals(z_row, mask, mu, v, &u, &mut resid);
        row_weights(&resid, mask, sigma1, sigma2, options, &mut w);
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for j in 0..p {
            if w[j] == 0.0 {
                continue;
            }
            let target = z_row[j] - mu[j];
            for c1 in 0..k {
                let x1 = w[j] * v[(j, c1)];
                b[c1] += x1 * target;
                for c2 in 0..=c1 {
                    a[(c1, c2)] += x1 * v[(j, c2)];
                }
            }
        }
        for c1 in 0..k {
            for c2 in 0..c1 {
                a[(c2, c1)] = a[(c1, c2)];
            }
        }
        let Some(next) = solve_psd(&a, &b) else {
            break;
        };
        let step = (&next - &u).norm();
        u = next;
        if step <= options.inner_tol * (1.0 + u.norm()) {
            break;
        }
    }
    u
}

fn row_residuals(
    z_row: &[f64],
    mask: &[bool],
    mu: &DVector<f64>,
    v: &DMatrix<f64>,
    u: &DVector<f64>,
    out: &mut [f64],
) {
    for j in 0..z_row.len() {
        out[j] = if mask[j] {
            let mut fit = mu[j];
            for c in 0..u.len() {
                fit += v[(j, c)] * u[c];
            }
            z_row[j] - fit
        } else {
            0.0
        };
    }
}

/// Combined IRLS weights of one row. A row whose case weight vanishes keeps
/// its cell weights so that its scores stay well defined; its contribution
/// to the objective is flat there, so this does not affect monotonicity.
fn row_weights(
    resid: &[f64],
    mask: &[bool],
    sigma1: &DVector<f64>,
    sigma2: f64,
    options: &CellPcaOptions,
    out: &mut [f64],
) {
    let mut sum = 0.0;
    let mut mi = 0usize;
    for j in 0..resid.len() {
        if mask[j] {
            let s = sigma1[j];
            sum += s * s * options.rho1.rho(resid[j] / s);
            mi += 1;
            out[j] = options.rho1.weight(resid[j] / s);
        } else {
            out[j] = 0.0;
        }
    }
    let t = if mi > 0 { (sum / mi as f64).sqrt() } else { 0.0 };
    let wcase = options.rho2.weight(t / sigma2);
    if wcase > 0.0 {
        for x in out.iter_mut() {
            *x *= wcase;
        }
    }
}

fn residual_matrix(z: &DataMatrix, mu: &DVector<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let uv = u * v.transpose();
    DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| match z.get(i, j) {
        Some(x) => x - mu[j] - uv[(i, j)],
        None => 0.0,
    })
}

fn total_deviations(r: &DMatrix<f64>, mask: &DMatrix<bool>, sigma1: &DVector<f64>, rho1: &Rho) -> DVector<f64> {
    let (n, p) = r.shape();
    DVector::from_fn(n, |i, _| {
        let mut sum = 0.0;
        let mut mi = 0usize;
        for j in 0..p {
            if mask[(i, j)] {
                let s = sigma1[j];
                sum += s * s * rho1.rho(r[(i, j)] / s);
                mi += 1;
            }
        }
        if mi == 0 {
            0.0
        } else {
            (sum / mi as f64).sqrt()
        }
    })
}

/// Starting values `(mu, U, V)`.
///
/// Robust losses: cells further than `c` robust scales from their column
/// median are set aside, the gaps are filled with column medians, and a
/// rank-k truncated SVD of the median-centered matrix is taken. Squared
/// losses: mean filling, mean centering, truncated SVD (classical PCA).
/// Univariate flagging threshold of the initializer, `sqrt(chi2_1(0.99))`.
const FLAG_CUTOFF: f64 = 2.575_829_303_548_901;

fn initialize(z: &DataMatrix, k: usize, options: &CellPcaOptions) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, p) = z.shape();
    let classical = options.is_classical();
    let mut center = DVector::zeros(p);
    let mut cutoff = vec![f64::INFINITY; p];
    for j in 0..p {
        let col = z.column_values(j);
        if classical {
            center[j] = col.iter().sum::<f64>() / col.len() as f64;
        } else {
            // the half-sample MCD survives heavy one-sided cell contamination
            // that drags the median and inflates the M-scale
            match univariate_mcd(&col) {
                Some((loc, s)) => {
                    center[j] = loc;
                    cutoff[j] = FLAG_CUTOFF * s;
                }
                None => {
                    let med = median(&col);
                    center[j] = med;
                    let dev: Vec<f64> = col.iter().map(|x| x - med).collect();
                    if let Ok(s) = m_scale(&dev, &options.scale) {
                        cutoff[j] = FLAG_CUTOFF * s;
                    }
                }
            }
        }
    }
    let centered = DMatrix::from_fn(n, p, |i, j| match z.get(i, j) {
        Some(x) if (x - center[j]).abs() <= cutoff[j] => x - center[j],
        _ => 0.0,
    });
    let (u, v) = truncated_svd(&centered, k);
    (center, u, v)
}

/// Scale of one column of initial residuals. Robust fits take the smaller
/// of the M-scale and the reweighted univariate MCD scale, since a column
/// with many one-sided outlying cells inflates the M-scale.
fn residual_scale(col: &[f64], options: &CellPcaOptions) -> Option<f64> {
    let m = m_scale(col, &options.scale).ok()?;
    if options.is_classical() {
        return Some(m);
    }
    Some(univariate_mcd(col).map_or(m, |(_, s)| s.min(m)))
}

/// Orthonormalizes the loadings, re-expressing the scores so that `U V^T`
/// is unchanged.
fn orthonormalize(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    let qr = v.clone().qr();
    let r = qr.r();
    let q = qr.q();
    *u = &*u * r.transpose();
    *v = q;
}

/// Fits a rank-`k` principal subspace to the standardized data `z`.
pub fn fit_subspace(z: &DataMatrix, k: usize, options: &CellPcaOptions) -> Result<SubspaceFit> {
    let (n, p) = z.shape();
    if k == 0 || k >= n.min(p) {
        return Err(Error::InvalidInput(format!(
            "rank {k} must satisfy 1 <= k < min(n, p) = {}",
            n.min(p)
        )));
    }
    z.check_coverage()?;
    let mask = z.mask().clone();

    let (mut mu, mut u, mut v) = initialize(z, k, options);
    let r0 = residual_matrix(z, &mu, &u, &v);

    let mut sigma1 = DVector::zeros(p);
    for j in 0..p {
        let col: Vec<f64> = (0..n).filter(|&i| mask[(i, j)]).map(|i| r0[(i, j)]).collect();
        sigma1[j] = residual_scale(&col, options).ok_or(Error::DegenerateColumn { column: j })?;
    }
    let t0 = total_deviations(&r0, &mask, &sigma1, &options.rho1);
    let sigma2 = m_scale(t0.as_slice(), &options.scale)?;

    let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..p).map(|j| z.values()[(i, j)]).collect()).collect();
    let row_masks: Vec<Vec<bool>> = (0..n).map(|i| (0..p).map(|j| mask[(i, j)]).collect()).collect();

    let mut trace = vec![objective(&r0, &mask, &sigma1, sigma2, &options.rho1, &options.rho2)];
    let mut converged = false;
    for _ in 0..options.max_iter {
        // Loadings and center given scores, one weighted regression per column.
        let weights = combined_weights(&residual_matrix(z, &mu, &u, &v), &mask, &sigma1, sigma2, options);
        let columns: Vec<Option<DVector<f64>>> = (0..p)
            .into_par_iter()
            .map(|j| {
                let mut a = DMatrix::<f64>::zeros(k + 1, k + 1);
                let mut b = DVector::<f64>::zeros(k + 1);
                let mut x = vec![1.0; k + 1];
                for i in 0..n {
                    let w = weights[(i, j)];
                    if w == 0.0 {
                        continue;
                    }
                    for c in 0..k {
                        x[c + 1] = u[(i, c)];
                    }
                    let target = rows[i][j];
                    for c1 in 0..=k {
                        b[c1] += w * x[c1] * target;
                        for c2 in 0..=c1 {
                            a[(c1, c2)] += w * x[c1] * x[c2];
                        }
                    }
                }
                for c1 in 0..=k {
                    for c2 in 0..c1 {
                        a[(c2, c1)] = a[(c1, c2)];
                    }
                }
                solve_psd(&a, &b)
            })
            .collect();
        for (j, sol) in columns.into_iter().enumerate() {
            if let Some(sol) = sol {
                mu[j] = sol[0];
                for c in 0..k {
                    v[(j, c)] = sol[c + 1];
                }
            }
        }
        orthonormalize(&mut u, &mut v);

        // Scores given loadings and center, one inner IRLS per row.
        let scores: Vec<DVector<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let start = u.row(i).transpose();
                row_irls(&rows[i], &row_masks[i], &mu, &v, &sigma1, sigma2, options, start)
            })
            .collect();
        for (i, s) in scores.iter().enumerate() {
            u.set_row(i, &s.transpose());
        }

        let r = residual_matrix(z, &mu, &u, &v);
        let obj = objective(&r, &mask, &sigma1, sigma2, &options.rho1, &options.rho2);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if obj <= 0.0 || (prev - obj) <= options.tol * prev {
            converged = true;
            break;
        }
    }
    if !converged && options.require_convergence {
        return Err(Error::NoConvergence { trace });
    }

    orthonormalize(&mut u, &mut v);
    let residuals = residual_matrix(z, &mu, &u, &v);
    let total_deviations = total_deviations(&residuals, &mask, &sigma1, &options.rho1);
    Ok(SubspaceFit {
        cell_weights: cell_weights(&residuals, &sigma1, &options.rho1),
        case_weights: case_weights(&total_deviations, sigma2, &options.rho2),
        total_deviations,
        mu,
        v,
        u,
        sigma1,
        sigma2,
        residuals,
        mask,
        objective_trace: trace,
        converged,
    })
}

fn combined_weights(
    r: &DMatrix<f64>,
    mask: &DMatrix<bool>,
    sigma1: &DVector<f64>,
    sigma2: f64,
    options: &CellPcaOptions,
) -> DMatrix<f64> {
    let t = total_deviations(r, mask, sigma1, &options.rho1);
    let wcase = case_weights(&t, sigma2, &options.rho2);
    DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| {
        if mask[(i, j)] {
            wcase[i] * options.rho1.weight(r[(i, j)] / sigma1[j])
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::covariance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
    }

    /// Low-rank signal plus small noise.
    fn low_rank(rng: &mut ChaCha8Rng, n: usize, p: usize, k: usize, noise: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let scores = gaussian(rng, n, k) * 3.0;
        let (_, basis) = truncated_svd(&gaussian(rng, p + 3, p), k);
        let mut z = &scores * basis.transpose() + gaussian(rng, n, p) * noise;
        for mut row in z.row_iter_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x += 0.1 * j as f64;
            }
        }
        (z, basis)
    }

    /// Largest principal angle between two subspaces given orthonormal bases.
    fn max_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let (qa, qb) = (a.clone().qr().q(), b.clone().qr().q());
        let s = (qa.transpose() * qb).singular_values();
        let min = s.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
        min.acos()
    }

    #[test]
    fn total_deviation_examples() {
        let rho = Rho::default();
        assert_eq!(total_deviation(&[0.0, 0.0], &[true, true], &[1.0, 2.0], &rho).unwrap(), 0.0);
        let t = total_deviation(&[2.0], &[true], &[2.0], &rho).unwrap();
        assert!((t - 2.0 * 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            total_deviation(&[1.0], &[false], &[1.0], &rho),
            Err(Error::EmptyRow { .. })
        ));
        let base = total_deviation(&[0.3, -2.5, 7.0], &[true; 3], &[1.0, 0.5, 2.0], &rho).unwrap();
        let scaled = total_deviation(&[0.9, -7.5, 21.0], &[true; 3], &[3.0, 1.5, 6.0], &rho).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn quadratic_objective_is_mean_square() {
        let r = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.0, -0.25, 3.0]);
        let mask = DMatrix::from_element(3, 2, true);
        let sigma1 = DVector::from_vec(vec![0.7, 1.9]);
        let got = objective(&r, &mask, &sigma1, 1.3, &Rho::Quadratic, &Rho::Quadratic);
        let brute: f64 = r.iter().map(|x| x * x).sum::<f64>() / 6.0;
        assert!((got - brute).abs() < 1e-10);
    }

    #[test]
    fn weights_examples() {
        let rho = Rho::default();
        let r = DMatrix::from_row_slice(1, 3, &[0.0, 2.0, 12.0]);
        let w = cell_weights(&r, &DVector::from_vec(vec![1.0, 2.0, 2.0]), &rho);
        assert_eq!(w[(0, 0)], 1.0);
        assert_eq!(w[(0, 1)], 1.0);
        assert_eq!(w[(0, 2)], 0.0);
        let cw = case_weights(&DVector::from_vec(vec![0.0, 2.0, 10.0]), 2.0, &rho);
        assert_eq!(cw.as_slice(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn scores_recover_point_on_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, v) = truncated_svd(&gaussian(&mut rng, 10, 6), 2);
        let mu = DVector::from_fn(6, |j, _| j as f64);
        let u0 = DVector::from_vec(vec![1.5, -0.7]);
        let z = &mu + &v * &u0;
        let opts = CellPcaOptions::default();
        let s1 = DVector::from_element(6, 1.0);
        let u = solve_scores(z.as_slice(), &[true; 6], &mu, &v, &s1, 1.0, &opts, None).unwrap();
        assert!((u - u0).norm() < 1e-8);
    }

    #[test]
    fn quadratic_scores_are_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = gaussian(&mut rng, 7, 3);
        let mu = DVector::from_fn(7, |_, _| rng.random::<f64>());
        let z = DVector::from_fn(7, |_, _| StandardNormal.sample(&mut rng));
        let opts = CellPcaOptions::classical();
        let s1 = DVector::from_element(7, 1.0);
        let u = solve_scores(z.as_slice(), &[true; 7], &mu, &v, &s1, 1.0, &opts, None).unwrap();
        let oracle = (v.transpose() * &v).try_inverse().unwrap() * v.transpose() * (&z - &mu);
        assert!((u - oracle).norm() < 1e-10);
    }

    #[test]
    fn scores_interpolate_with_k_observed_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = gaussian(&mut rng, 5, 2);
        let mu = DVector::zeros(5);
        let z = [0.4, f64::NAN, -1.1, f64::NAN, f64::NAN];
        let mask = [true, false, true, false, false];
        let s1 = DVector::from_element(5, 1.0);
        let opts = CellPcaOptions::default();
        let u = solve_scores(&z, &mask, &mu, &v, &s1, 1.0, &opts, None).unwrap();
        let fit = &v * &u;
        assert!((fit[0] - 0.4).abs() < 1e-9 && (fit[2] + 1.1).abs() < 1e-9);

        let mask1 = [true, false, false, false, false];
        assert!(matches!(
            solve_scores(&z, &mask1, &mu, &v, &s1, 1.0, &opts, None),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn scores_satisfy_first_order_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, v) = truncated_svd(&gaussian(&mut rng, 12, 8), 2);
        let mu = DVector::zeros(8);
        let mut z = &v * DVector::from_vec(vec![2.0, -1.0]) + DVector::from_fn(8, |_, _| 0.3 * rng.random::<f64>());
        z[3] += 9.0;
        let s1 = DVector::from_element(8, 0.3);
        let opts = CellPcaOptions::default();
        let u = solve_scores(z.as_slice(), &[true; 8], &mu, &v, &s1, 0.5, &opts, None).unwrap();
        let mut r = vec![0.0; 8];
        let mut w = vec![0.0; 8];
        row_residuals(z.as_slice(), &[true; 8], &mu, &v, &u, &mut r);
        row_weights(&r, &[true; 8], &s1, 0.5, &opts, &mut w);
        let wm = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        let lhs = v.transpose() * &wm * &v * &u;
        let rhs = v.transpose() * &wm * (&z - &mu);
        assert!((lhs - rhs).norm() < 1e-8);
        assert_eq!(w[3], 0.0, "the outlying cell is rejected");
    }

    #[test]
    fn noiseless_low_rank_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (z, _) = low_rank(&mut rng, 60, 10, 2, 0.0);
        let fit = fit_subspace(&DataMatrix::new(z.clone()), 2, &CellPcaOptions::default()).unwrap();
        let err = (&z - fit.fitted()).norm() / z.norm();
        assert!(err < 1e-6, "relative reconstruction error {err}");
    }

    #[test]
    fn quadratic_mode_reproduces_pca() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (z, _) = low_rank(&mut rng, 50, 8, 3, 0.5);
        let fit = fit_subspace(&DataMatrix::new(z.clone()), 3, &CellPcaOptions::classical()).unwrap();
        let cov = covariance(&z, 0);
        let (_, vecs) = crate::linalg::sym_eigen(&cov);
        let top = vecs.columns(0, 3).into_owned();
        assert!(max_angle(&fit.v, &top) < 1e-6);
    }

    #[test]
    fn objective_trace_is_monotone_and_weights_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut z, _) = low_rank(&mut rng, 80, 12, 2, 0.3);
        for _ in 0..100 {
            let (i, j) = (rng.random_range(0..80), rng.random_range(0..12));
            z[(i, j)] = 10.0;
        }
        let mut data = DataMatrix::new(z);
        for _ in 0..60 {
            data.set_missing(rng.random_range(0..80), rng.random_range(0..12));
        }
        let fit = fit_subspace(&data, 2, &CellPcaOptions::default()).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
        assert!(fit.cell_weights.iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(fit.case_weights.iter().all(|w| (0.0..=1.0).contains(w)));
        let vtv = fit.v.transpose() * &fit.v;
        assert!((vtv - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        let d = fit.sigma2 * fit.sigma2 * RhoParams::default().d;
        assert!(loss(&data, &fit, &Rho::default(), &Rho::default()) <= d);
    }

    #[test]
    fn cellwise_outliers_do_not_tilt_the_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (clean, basis) = low_rank(&mut rng, 100, 10, 2, 0.2);
        let mut z = clean.clone();
        let cells = rand::seq::index::sample(&mut rng, 1000, 200);
        for c in cells.iter() {
            z[(c / 10, c % 10)] = 10.0;
        }
        let data = DataMatrix::new(z);
        let robust = fit_subspace(&data, 2, &CellPcaOptions::default()).unwrap();
        let classical = fit_subspace(&data, 2, &CellPcaOptions::classical()).unwrap();
        let limit = 15f64.to_radians();
        assert!(max_angle(&robust.v, &basis) < limit, "robust angle {}", max_angle(&robust.v, &basis).to_degrees());
        assert!(max_angle(&classical.v, &basis) > limit);
    }

    #[test]
    fn masked_values_are_never_read() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (z, _) = low_rank(&mut rng, 40, 8, 2, 0.3);
        let mut mask = DMatrix::from_element(40, 8, true);
        for i in 0..40 {
            mask[(i, (i * 3) % 8)] = false;
        }
        let mut z2 = z.clone();
        for i in 0..40 {
            z2[(i, (i * 3) % 8)] = 1e6;
        }
        let a = fit_subspace(&DataMatrix::with_mask(z, mask.clone()).unwrap(), 2, &CellPcaOptions::default()).unwrap();
        let b = fit_subspace(&DataMatrix::with_mask(z2, mask).unwrap(), 2, &CellPcaOptions::default()).unwrap();
        assert_eq!(a.fitted(), b.fitted());
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn imputation_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut z, _) = low_rank(&mut rng, 50, 6, 1, 0.2);
        z[(3, 2)] = 40.0;
        let mut data = DataMatrix::new(z);
        data.set_missing(5, 4);
        let fit = fit_subspace(&data, 1, &CellPcaOptions::default()).unwrap();
        let imp = impute(&data, &fit);
        let zhat = fit.fitted();
        assert_eq!(imp.get(5, 4).unwrap(), zhat[(5, 4)]);
        assert_eq!(fit.cell_weights[(3, 2)], 0.0);
        assert_eq!(imp.get(3, 2).unwrap(), zhat[(3, 2)]);
        for i in 0..50 {
            for j in 0..6 {
                if data.is_observed(i, j) && fit.cell_weights[(i, j)] == 1.0 {
                    assert_eq!(imp.get(i, j), data.get(i, j));
                }
            }
        }
    }

    #[test]
    fn rank_bounds_are_checked() {
        let data = DataMatrix::new(DMatrix::from_fn(5, 3, |i, j| (i * j) as f64));
        assert!(fit_subspace(&data, 0, &CellPcaOptions::default()).is_err());
        assert!(fit_subspace(&data, 3, &CellPcaOptions::default()).is_err());
    }
}
