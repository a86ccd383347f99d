//! Evaluation metrics.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::average_ranks;
use crate::linalg::{cholesky, log_det_chol, symmetrize};

/// `tr(S_hat S^-1) - p - log det(S_hat S^-1)`, evaluated as
/// `M = L^-1 S_hat L^-T` with `S = L L^T`.
pub fn kl_discrepancy(s_hat: &DMatrix<f64>, s_true: &DMatrix<f64>) -> Result<f64> {
    if s_hat.shape() != s_true.shape() || !s_hat.is_square() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", s_hat.shape(), s_true.shape())));
    }
    let l = cholesky(s_true)?.l();
    let a = l.solve_lower_triangular(s_hat).ok_or(Error::NotPositiveDefinite)?;
    let m = l
        .solve_lower_triangular(&a.transpose())
        .ok_or(Error::NotPositiveDefinite)?;
    let m = symmetrize(&m);
    let logdet = log_det_chol(&cholesky(&m)?);
    Ok((m.trace() - m.nrows() as f64 - logdet).max(0.0))
}

/// Mahalanobis distance of every row of `x` (complete rows).
pub fn mahalanobis(x: &DMatrix<f64>, center: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != center.len() || sigma.shape() != (center.len(), center.len()) {
        return Err(Error::DimensionMismatch(format!(
            "{} columns, center {}, sigma {:?}",
            x.ncols(),
            center.len(),
            sigma.shape()
        )));
    }
    let l = cholesky(sigma)?.l();
    let mut out = DVector::zeros(x.nrows());
    for i in 0..x.nrows() {
        let d = x.row(i).transpose() - center;
        let y = l.solve_lower_triangular(&d).ok_or(Error::NotPositiveDefinite)?;
        out[i] = y.norm();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// Decreasing thresholds; a case is positive when its score is at least
    /// the threshold. The first threshold is `+inf` (nothing flagged).
    pub thresholds: Vec<f64>,
    pub tpr: Vec<f64>,
    pub fpr: Vec<f64>,
    pub auc: f64,
}

/// ROC curve over all distinct score values, AUC by the trapezoid rule.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut thresholds = vec![f64::INFINITY];
    let mut tpr = vec![0.0];
    let mut fpr = vec![0.0];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(t);
        tpr.push(tp as f64 / pos as f64);
        fpr.push(fp as f64 / neg as f64);
    }
    let auc = (1..tpr.len())
        .map(|j| (fpr[j] - fpr[j - 1]) * (tpr[j] + tpr[j - 1]) / 2.0)
        .sum();
    Ok(RocCurve { thresholds, tpr, fpr, auc })
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidInput(format!("Spearman correlation needs at least 3 points, got {}", x.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Mean canonical correlation: average Spearman correlation of paired
/// canonical variables.
pub fn mcc(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64> {
    if u.shape() != v.shape() || u.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let mut total = 0.0;
    for l in 0..u.ncols() {
        total += spearman_corr(u.column(l).as_slice(), v.column(l).as_slice())?;
    }
    Ok(total / u.ncols() as f64)
}
