//! The cellRCov covariance estimator.
//!
//! The data are standardized by robust column scales `D`, a robust
//! principal subspace is fitted, and the covariance of the standardized
//! data is assembled from two parts: the MCD scatter of the scores mapped
//! through the loadings, and a weighted covariance of the imputed residuals
//! with a diagonal-target ridge. The sum is mapped back by `D`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::cellpca::{fit_subspace, objective, CellPcaOptions, SubspaceFit};
use crate::data::DataMatrix;
use crate::error::{Error, Result, StageExt};
use crate::kernels::{m_scale, median, robust_standardize, ScaleVector};
#[cfg(test)]
use crate::kernels::RhoParams;
use crate::linalg::{column_means, symmetrize, truncated_svd};
use crate::mcd::{mcd_estimate, McdResult, DEFAULT_ALPHA};
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RankChoice {
    Fixed(usize),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RidgeChoice {
    Fixed(f64),
    Auto,
    /// No regularization; `Sigma_perp_R = Sigma_perp`.
    None,
}

/// Scatter estimator applied to the scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ScoreScatter {
    Mcd { alpha: f64 },
    /// Mean and covariance (divisor `n`).
    Sample,
}

/// How the reference Gaussian datasets of parallel analysis are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReferenceFit {
    /// Robust subspace fit, the same fit as applied to the data.
    CellPca,
    /// Classical PCA, with the objective evaluated on its residuals.
    Classical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSelectionConfig {
    /// Largest rank tried; defaults to `min(n - 1, p - 1, 25)`.
    pub k_max: Option<usize>,
    pub n_reference: usize,
    /// Percentile (0 to 100) of the reference gaps.
    pub percentile: f64,
    pub reference_fit: ReferenceFit,
}

impl Default for RankSelectionConfig {
    fn default() -> Self {
        RankSelectionConfig {
            k_max: None,
            n_reference: 50,
            percentile: 95.0,
            reference_fit: ReferenceFit::CellPca,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaCvConfig {
    pub splits: usize,
    pub grid: Vec<f64>,
}

impl Default for DeltaCvConfig {
    fn default() -> Self {
        DeltaCvConfig {
            splits: 5,
            grid: (1..=20).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub rank: RankChoice,
    pub ridge: RidgeChoice,
    pub score_scatter: ScoreScatter,
    pub pca: CellPcaOptions,
    pub rank_selection: RankSelectionConfig,
    pub delta_cv: DeltaCvConfig,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            rank: RankChoice::Auto,
            ridge: RidgeChoice::Auto,
            score_scatter: ScoreScatter::Mcd { alpha: DEFAULT_ALPHA },
            pca: CellPcaOptions::default(),
            rank_selection: RankSelectionConfig::default(),
            delta_cv: DeltaCvConfig::default(),
            seed: 0x5EED,
        }
    }
}

impl EstimatorConfig {
    /// Squared losses, sample scatter of the scores and no ridge.
    pub fn classical(k: usize) -> Self {
        EstimatorConfig {
            rank: RankChoice::Fixed(k),
            ridge: RidgeChoice::None,
            score_scatter: ScoreScatter::Sample,
            pca: CellPcaOptions::classical(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankSelection {
    pub chosen_k: usize,
    /// `nu_{s-1} - nu_s` for every rank evaluated.
    pub observed_gaps: Vec<f64>,
    pub reference_quantiles: Vec<f64>,
    pub percentile: f64,
    pub n_reference: usize,
    /// Objective values `nu_0, nu_1, ...` of the data.
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaSelection {
    pub delta: f64,
    pub grid: Vec<f64>,
    /// Mean Frobenius loss for each grid value.
    pub losses: Vec<f64>,
    pub splits_used: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    /// Robust column scales `D` (and column medians).
    pub scales: ScaleVector,
    pub sigma_sub: DMatrix<f64>,
    pub sigma_perp: DMatrix<f64>,
    pub sigma_perp_r: DMatrix<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Location in data units, `D (mu + V loc(U))`.
    pub center: DVector<f64>,
    pub rank_k: usize,
    /// Zero when no ridge was applied.
    pub ridge_delta: f64,
    pub b_norm: f64,
    pub fit: SubspaceFit,
    pub score_location: DVector<f64>,
    pub score_scatter: DMatrix<f64>,
    pub rank_selection: Option<RankSelection>,
    pub delta_selection: Option<DeltaSelection>,
}

impl CovarianceEstimate {
    /// `D (Sigma_sub + Sigma_perp_R) D` recomputed from the stored parts.
    pub fn recompose(&self) -> DMatrix<f64> {
        let d = self.scales.as_diagonal();
        symmetrize(&(&d * (&self.sigma_sub + &self.sigma_perp_r) * &d))
    }

    /// Imputed data in data units: fitted values plus weighted residuals on
    /// observed cells, fitted values on missing cells.
    pub fn imputed(&self) -> DMatrix<f64> {
        let mut z = self.fit.fitted();
        for i in 0..z.nrows() {
            for j in 0..z.ncols() {
                z[(i, j)] += self.fit.cell_weights[(i, j)] * self.fit.residuals[(i, j)];
                z[(i, j)] *= self.scales.values[j];
            }
        }
        z
    }
}

/// `V S V^T`.
pub fn sigma_sub(fit: &SubspaceFit, scatter: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(&fit.v * scatter * fit.v.transpose()))
}

/// Weighted covariance of the imputed residuals and its normalizer `b`.
pub fn sigma_perp(fit: &SubspaceFit) -> Result<(DMatrix<f64>, f64)> {
    let (n, p) = fit.residuals.shape();
    let mut s = DMatrix::zeros(p, p);
    let mut b = 0.0;
    let mut wr = DVector::zeros(p);
    for i in 0..n {
        let wc = fit.case_weights[i];
        if wc == 0.0 {
            continue;
        }
        let mut wsum = 0.0;
        for j in 0..p {
            let w = if fit.mask[(i, j)] { fit.cell_weights[(i, j)] } else { 0.0 };
            wsum += w;
            wr[j] = w * fit.residuals[(i, j)];
        }
        b += wc * wsum * wsum;
        s.ger(wc, &wr, &wr, 1.0);
    }
    b /= (p * p) as f64;
    if !(b > 0.0) {
        return Err(Error::DegenerateNormalizer);
    }
    Ok((symmetrize(&(s / b)), b))
}

/// `(1 - delta) S + delta diag(S)`.
pub fn ridge_regularize(s: &DMatrix<f64>, delta: f64) -> Result<DMatrix<f64>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidDelta(delta));
    }
    let mut out = s * (1.0 - delta);
    for j in 0..s.nrows() {
        out[(j, j)] = s[(j, j)];
    }
    Ok(out)
}

fn score_scatter(u: &DMatrix<f64>, choice: ScoreScatter) -> Result<(DVector<f64>, DMatrix<f64>)> {
    match choice {
        ScoreScatter::Mcd { alpha } => {
            let McdResult { location, scatter, .. } = mcd_estimate(u, alpha)?;
            Ok((location, scatter))
        }
        ScoreScatter::Sample => {
            let mean = column_means(u);
            Ok((mean, crate::linalg::covariance(u, 0)))
        }
    }
}

/// Default largest rank for automatic selection.
pub fn default_k_max(n: usize, p: usize) -> usize {
    (n.min(p).saturating_sub(1)).min(25)
}

fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// Objective of a fixed residual matrix with scales taken from the
/// residuals themselves.
fn residual_objective(r: &DMatrix<f64>, mask: &DMatrix<bool>, options: &CellPcaOptions) -> Result<f64> {
    let (n, p) = r.shape();
    let mut sigma1 = DVector::zeros(p);
    for j in 0..p {
        let col: Vec<f64> = (0..n).filter(|&i| mask[(i, j)]).map(|i| r[(i, j)]).collect();
        sigma1[j] = m_scale(&col, &options.scale).map_err(|_| Error::DegenerateColumn { column: j })?;
    }
    let t = DVector::from_fn(n, |i, _| {
        let mut sum = 0.0;
        let mut m = 0usize;
        for j in 0..p {
            if mask[(i, j)] {
                sum += sigma1[j] * sigma1[j] * options.rho1.rho(r[(i, j)] / sigma1[j]);
                m += 1;
            }
        }
        if m == 0 {
            0.0
        } else {
            (sum / m as f64).sqrt()
        }
    });
    let sigma2 = m_scale(t.as_slice(), &options.scale)?;
    Ok(objective(r, mask, &sigma1, sigma2, &options.rho1, &options.rho2))
}

fn median_residuals(z: &DataMatrix) -> DMatrix<f64> {
    let (n, p) = z.shape();
    let med: Vec<f64> = (0..p).map(|j| median(&z.column_values(j))).collect();
    DMatrix::from_fn(n, p, |i, j| z.get(i, j).map_or(0.0, |x| x - med[j]))
}

/// Convergence tolerance of the reference fits; their objectives only
/// enter through a percentile of gaps.
const REFERENCE_TOL: f64 = 1e-5;

struct Reference {
    z: DataMatrix,
    centered: DMatrix<f64>,
    scores: DMatrix<f64>,
    loadings: DMatrix<f64>,
    nu0: f64,
}

impl Reference {
    fn new(n: usize, p: usize, k_max: usize, seed: u64, index: u64, options: &CellPcaOptions) -> Result<Reference> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = stream(seed, tag::RANK_REFERENCE, index);
        let raw = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let (z, _) = robust_standardize(&DataMatrix::new(raw), &options.scale)?;
        let mask = z.mask().clone();
        let nu0 = residual_objective(&median_residuals(&z), &mask, options)?;
        let mut centered = z.values().clone();
        let mean = column_means(&centered);
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let (scores, loadings) = truncated_svd(&centered, k_max);
        Ok(Reference {
            z,
            centered,
            scores,
            loadings,
            nu0,
        })
    }

    fn objective(&self, s: usize, options: &CellPcaOptions, how: ReferenceFit) -> Result<f64> {
        if how == ReferenceFit::CellPca {
            let loose = CellPcaOptions {
                tol: options.tol.max(REFERENCE_TOL),
                ..*options
            };
            return fit_subspace(&self.z, s, &loose).map(|f| f.objective());
        }
        let approx = self.scores.columns(0, s) * self.loadings.columns(0, s).transpose();
        let r = &self.centered - approx;
        let mask = DMatrix::from_element(r.nrows(), r.ncols(), true);
        residual_objective(&r, &mask, options)
    }
}

/// Parallel analysis on the standardized data `z`. The fits computed along
/// the way are returned so the caller can reuse the chosen one.
pub fn select_rank(z: &DataMatrix, pca: &CellPcaOptions, config: &RankSelectionConfig, seed: u64) -> Result<RankSelection> {
    select_rank_with_fits(z, pca, config, seed).map(|(sel, _)| sel)
}

fn select_rank_with_fits(
    z: &DataMatrix,
    pca: &CellPcaOptions,
    config: &RankSelectionConfig,
    seed: u64,
) -> Result<(RankSelection, Vec<SubspaceFit>)> {
    let (n, p) = z.shape();
    let k_max = config.k_max.unwrap_or(default_k_max(n, p)).min(default_k_max(n, p));
    if config.n_reference == 0 {
        return Err(Error::InvalidInput("parallel analysis needs at least one reference dataset".into()));
    }
    let references: Vec<Result<Reference>> = (0..config.n_reference)
        .into_par_iter()
        .map(|b| Reference::new(n, p, k_max, seed, b as u64, pca))
        .collect();
    let references: Vec<Reference> = references.into_iter().collect::<Result<_>>()?;

    let nu0 = residual_objective(&median_residuals(z), z.mask(), pca)?;
    let mut objectives = vec![nu0];
    let mut ref_prev: Vec<f64> = references.iter().map(|r| r.nu0).collect();
    let mut gaps = Vec::new();
    let mut quantiles = Vec::new();
    let mut fits = Vec::new();
    let mut chosen = 0;
    for s in 1..=k_max {
        let fit = fit_subspace(z, s, pca)?;
        let nu = fit.objective();
        let gap = objectives[s - 1] - nu;
        objectives.push(nu);
        fits.push(fit);

        let ref_now: Vec<f64> = references
            .par_iter()
            .map(|r| r.objective(s, pca, config.reference_fit))
            .collect::<Result<_>>()?;
        let mut ref_gaps: Vec<f64> = ref_prev.iter().zip(&ref_now).map(|(a, b)| a - b).collect();
        let q = percentile(&mut ref_gaps, config.percentile);
        ref_prev = ref_now;
        gaps.push(gap);
        quantiles.push(q);
        if gap > q {
            chosen = s;
        } else {
            break;
        }
    }
    Ok((
        RankSelection {
            chosen_k: chosen,
            observed_gaps: gaps,
            reference_quantiles: quantiles,
            percentile: config.percentile,
            n_reference: config.n_reference,
            objectives,
        },
        fits,
    ))
}

/// Random-split cross-validation of the ridge parameter. `estimate_rows`
/// returns the unregularized matrix for a subset of rows. Each split
/// compares the ridged matrix of a subset of size `floor(n/3)` with the
/// unregularized matrix of the complementary rows; splits whose estimator
/// fails are dropped and at least two must survive.
pub fn cv_delta<F>(n: usize, config: &DeltaCvConfig, seed: u64, estimate_rows: F) -> Result<DeltaSelection>
where
    F: Fn(&[usize]) -> Result<DMatrix<f64>> + Sync,
{
    if config.grid.is_empty() {
        return Err(Error::InvalidInput("empty ridge grid".into()));
    }
    if let Some(&bad) = config.grid.iter().find(|&&d| !(d > 0.0 && d <= 1.0)) {
        return Err(Error::InvalidDelta(bad));
    }
    if config.splits < 2 {
        return Err(Error::InvalidInput("ridge cross-validation needs at least 2 splits".into()));
    }
    let n1 = n / 3;
    let per_split: Vec<Option<Vec<f64>>> = (0..config.splits)
        .into_par_iter()
        .map(|h| {
            let mut rng = stream(seed, tag::DELTA_SPLITS, h as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut first = perm[..n1].to_vec();
            let mut second = perm[n1..].to_vec();
            first.sort_unstable();
            second.sort_unstable();
            let s1 = estimate_rows(&first).ok()?;
            let s2 = estimate_rows(&second).ok()?;
            config
                .grid
                .iter()
                .map(|&d| ridge_regularize(&s1, d).ok().map(|r| (r - &s2).norm()))
                .collect()
        })
        .collect();
    let survived: Vec<Vec<f64>> = per_split.into_iter().flatten().collect();
    if survived.len() < 2 {
        return Err(Error::TooManyFailures {
            stage: "ridge cross-validation",
            survived: survived.len(),
            total: config.splits,
            required: 2,
        });
    }
    let losses: Vec<f64> = (0..config.grid.len())
        .map(|g| survived.iter().map(|l| l[g]).sum::<f64>() / survived.len() as f64)
        .collect();
    let mut best = 0;
    for g in 1..losses.len() {
        let (lb, lg) = (losses[best], losses[g]);
        let tie = (lg - lb).abs() <= 1e-12 * lb.abs().max(lg.abs());
        if (lg < lb && !tie) || (tie && config.grid[g] > config.grid[best]) {
            best = g;
        }
    }
    Ok(DeltaSelection {
        delta: config.grid[best],
        grid: config.grid.clone(),
        losses,
        splits_used: survived.len(),
    })
}

/// Cross-validated ridge parameter for the residual covariance of a rank-`k`
/// fit on the standardized data `z`.
pub fn select_delta(z: &DataMatrix, k: usize, pca: &CellPcaOptions, config: &DeltaCvConfig, seed: u64) -> Result<DeltaSelection> {
    cv_delta(z.nrows(), config, seed, |rows| {
        let sub = z.select_rows(rows);
        let fit = fit_subspace(&sub, k, pca)?;
        sigma_perp(&fit).map(|(s, _)| s)
    })
}

/// cellRCov estimate of the covariance of the rows of `x`.
pub fn estimate(x: &DataMatrix, config: &EstimatorConfig) -> Result<CovarianceEstimate> {
    let (n, p) = x.shape();
    if n < 5 || p < 2 {
        return Err(Error::InvalidInput(format!("need n >= 5 and p >= 2, got {n} x {p}")));
    }
    x.check_coverage().stage("input")?;
    let (z, scales) = robust_standardize(x, &config.pca.scale).stage("standardization")?;

    let (k, rank_selection, cached) = match config.rank {
        RankChoice::Fixed(k) => (k, None, None),
        RankChoice::Auto => {
            let (sel, mut fits) =
                select_rank_with_fits(&z, &config.pca, &config.rank_selection, config.seed).stage("rank selection")?;
            let k = sel.chosen_k.max(1);
            let fit = if k <= fits.len() { Some(fits.swap_remove(k - 1)) } else { None };
            (k, Some(sel), fit)
        }
    };
    let fit = match cached {
        Some(fit) => fit,
        None => fit_subspace(&z, k, &config.pca).stage("subspace fit")?,
    };

    let (score_location, score_scatter) = score_scatter(&fit.u, config.score_scatter).stage("score scatter")?;
    let sub = sigma_sub(&fit, &score_scatter);
    let (perp, b_norm) = sigma_perp(&fit).stage("residual covariance")?;

    let (perp_r, ridge_delta, delta_selection) = match config.ridge {
        RidgeChoice::None => (perp.clone(), 0.0, None),
        RidgeChoice::Fixed(d) => (ridge_regularize(&perp, d).stage("ridge")?, d, None),
        RidgeChoice::Auto => {
            let sel = select_delta(&z, k, &config.pca, &config.delta_cv, config.seed).stage("ridge cross-validation")?;
            (ridge_regularize(&perp, sel.delta).stage("ridge")?, sel.delta, Some(sel))
        }
    };

    let d = scales.as_diagonal();
    let sigma_hat = symmetrize(&(&d * (&sub + &perp_r) * &d));
    let center_z = &fit.mu + &fit.v * &score_location;
    let center = DVector::from_fn(p, |j, _| center_z[j] * scales.values[j]);
    Ok(CovarianceEstimate {
        scales,
        sigma_sub: sub,
        sigma_perp: perp,
        sigma_perp_r: perp_r,
        sigma_hat,
        center,
        rank_k: k,
        ridge_delta,
        b_norm,
        fit,
        score_location,
        score_scatter,
        rank_selection,
        delta_selection,
    })
}
