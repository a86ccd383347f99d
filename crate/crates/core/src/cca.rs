//! Canonical correlation analysis on top of a joint covariance estimate.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::cellrcov::{estimate, DeltaCvConfig, EstimatorConfig};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::linalg::inv_sqrt_spd;
use crate::metrics::mcc;
use crate::rng::{stream, tag};
use crate::simlab::baseline_rcov;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcaResult {
    /// Canonical directions of the first block (p x k).
    pub a: DMatrix<f64>,
    /// Canonical directions of the second block (q x k).
    pub b: DMatrix<f64>,
    pub correlations: DVector<f64>,
    /// Center of the concatenated data (p + q).
    pub center: DVector<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
    pub sigma12: DMatrix<f64>,
}

/// Covariance estimator behind the canonical analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CcaMethod {
    CellRCov(EstimatorConfig),
    /// Ridge-regularized sample covariance (pairwise complete).
    Ridge { cv: DeltaCvConfig, seed: u64 },
}

impl Default for CcaMethod {
    fn default() -> Self {
        CcaMethod::CellRCov(EstimatorConfig::default())
    }
}

/// Canonical pairs of a joint covariance whose first `p` coordinates form
/// the first block. Solved as the SVD of `S1^-1/2 S12 S2^-1/2`, so the
/// correlations are the singular values and `a' S1 a = b' S2 b = I`.
pub fn cca_from_covariance(sigma: &DMatrix<f64>, center: &DVector<f64>, p: usize, k: usize) -> Result<CcaResult> {
    let total = sigma.nrows();
    if sigma.ncols() != total || center.len() != total {
        return Err(Error::DimensionMismatch(format!(
            "covariance {:?} with center of length {}",
            sigma.shape(),
            center.len()
        )));
    }
    if p == 0 || p >= total {
        return Err(Error::InvalidInput(format!("block split {p} of {total} variables")));
    }
    let q = total - p;
    if k == 0 || k > p.min(q) {
        return Err(Error::InvalidInput(format!("k = {k} must be in 1..={}", p.min(q))));
    }
    let s1 = sigma.view((0, 0), (p, p)).into_owned();
    let s2 = sigma.view((p, p), (q, q)).into_owned();
    let s12 = sigma.view((0, p), (p, q)).into_owned();
    let w1 = inv_sqrt_spd(&s1).map_err(|_| Error::BlockNotPD)?;
    let w2 = inv_sqrt_spd(&s2).map_err(|_| Error::BlockNotPD)?;
    let m = &w1 * &s12 * &w2;
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let mut a = DMatrix::zeros(p, k);
    let mut b = DMatrix::zeros(q, k);
    let mut correlations = DVector::zeros(k);
    for (l, &o) in order.iter().take(k).enumerate() {
        let mut al = &w1 * u.column(o);
        let mut bl = &w2 * vt.row(o).transpose();
        // largest-magnitude entry of a positive; b follows to keep the pair's sign
        let lead = al.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            al = -al;
            bl = -bl;
        }
        a.set_column(l, &al);
        b.set_column(l, &bl);
        correlations[l] = svd.singular_values[o].clamp(0.0, 1.0);
    }
    Ok(CcaResult {
        a,
        b,
        correlations,
        center: center.clone(),
        sigma1: s1,
        sigma2: s2,
        sigma12: s12,
    })
}

fn joint_estimate(x1: &DataMatrix, x2: &DataMatrix, method: &CcaMethod) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let joint = x1.hconcat(x2)?;
    match method {
        CcaMethod::CellRCov(config) => estimate(&joint, config).map(|e| (e.sigma_hat, e.center)),
        CcaMethod::Ridge { cv, seed } => baseline_rcov(&joint, cv, *seed).map(|e| (e.sigma_hat, e.center)),
    }
}

/// Fits `k` canonical pairs from a covariance estimate of `[X1 X2]`.
pub fn cellrcca_fit(x1: &DataMatrix, x2: &DataMatrix, k: usize, method: &CcaMethod) -> Result<CcaResult> {
    let (p, q) = (x1.ncols(), x2.ncols());
    if k == 0 || k > p.min(q) {
        return Err(Error::InvalidInput(format!("k = {k} must be in 1..={}", p.min(q))));
    }
    let (sigma, center) = joint_estimate(x1, x2, method)?;
    cca_from_covariance(&sigma, &center, p, k)
}

fn project(x: &DataMatrix, center: &[f64], dirs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), dirs.ncols());
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            // missing cells sit at the center and contribute nothing
            if let Some(v) = x.get(i, j) {
                for l in 0..dirs.ncols() {
                    out[(i, l)] += (v - center[j]) * dirs[(j, l)];
                }
            }
        }
    }
    out
}

/// Canonical variables `U = (X1 - mu1) A` and `V = (X2 - mu2) B`.
pub fn cellrcca_transform(result: &CcaResult, x1: &DataMatrix, x2: &DataMatrix) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (p, q) = (result.a.nrows(), result.b.nrows());
    if x1.ncols() != p || x2.ncols() != q || x1.nrows() != x2.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "fit has {p} + {q} variables, data {:?} and {:?}",
            x1.shape(),
            x2.shape()
        )));
    }
    let c = result.center.as_slice();
    Ok((project(x1, &c[..p], &result.a), project(x2, &c[p..], &result.b)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcaCvResult {
    pub mean_mcc: f64,
    /// Test MCC of each fold, `None` where the fold failed.
    pub fold_mcc: Vec<Option<f64>>,
}

/// K-fold cross-validated mean canonical correlation. Folds come from a
/// seeded permutation; at least half of them must succeed.
pub fn cellrcca_cv(x1: &DataMatrix, x2: &DataMatrix, k: usize, folds: usize, method: &CcaMethod, seed: u64) -> Result<CcaCvResult> {
    let n = x1.nrows();
    if x2.nrows() != n {
        return Err(Error::DimensionMismatch(format!("{n} rows vs {} rows", x2.nrows())));
    }
    if folds < 2 {
        return Err(Error::InvalidInput("need at least 2 folds".into()));
    }
    // the test MCC is a rank correlation and needs 3 rows per fold
    if n / folds < 3 {
        return Err(Error::SingleCaseFold);
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream(seed, tag::CCA_FOLDS, 0));
    let fold_mcc: Vec<Option<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
            let mut test = perm[lo..hi].to_vec();
            let mut train: Vec<usize> = perm[..lo].iter().chain(&perm[hi..]).copied().collect();
            test.sort_unstable();
            train.sort_unstable();
            let fit = cellrcca_fit(&x1.select_rows(&train), &x2.select_rows(&train), k, method).ok()?;
            let (u, v) = cellrcca_transform(&fit, &x1.select_rows(&test), &x2.select_rows(&test)).ok()?;
            mcc(&u, &v).ok()
        })
        .collect();
    let ok: Vec<f64> = fold_mcc.iter().flatten().copied().collect();
    if 2 * ok.len() < folds {
        return Err(Error::TooManyFailures {
            stage: "canonical cross-validation",
            survived: ok.len(),
            total: folds,
            required: folds.div_ceil(2),
        });
    }
    Ok(CcaCvResult {
        mean_mcc: ok.iter().sum::<f64>() / ok.len() as f64,
        fold_mcc,
    })
}
