//! Monte Carlo laboratory: covariance models, contamination and missingness
//! injectors, baseline estimators and the experiment runner.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cellrcov::{cv_delta, estimate, ridge_regularize, DeltaCvConfig, DeltaSelection, EstimatorConfig};
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::kernels::{centered_m_scale, median, RhoParams};
use crate::linalg::{cholesky, sym_eigen, symmetrize};
use crate::metrics::{kl_discrepancy, spearman_corr};
use crate::rng::{derive_seed, stream, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CovModel {
    A09,
    A06,
    Planar,
    Dense,
}

impl CovModel {
    pub const ALL: [CovModel; 4] = [CovModel::A09, CovModel::A06, CovModel::Planar, CovModel::Dense];
}

impl fmt::Display for CovModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovModel::A09 => "A09",
            CovModel::A06 => "A06",
            CovModel::Planar => "planar",
            CovModel::Dense => "dense",
        })
    }
}

impl FromStr for CovModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a09" => Ok(CovModel::A09),
            "a06" => Ok(CovModel::A06),
            "planar" => Ok(CovModel::Planar),
            "dense" => Ok(CovModel::Dense),
            _ => Err(Error::InvalidInput(format!("unknown covariance model '{s}'"))),
        }
    }
}

fn power_model(rho: f64, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, l| rho.powi((j as i32 - l as i32).abs()))
}

/// Share of the total variance carried by each of the two leading planar
/// components; the rest is spread equally over the remaining ones.
const PLANAR_SHARES: [f64; 2] = [0.53, 0.37];

/// Covariance matrix of the given model, with unit diagonal.
pub fn make_sigma(model: CovModel, p: usize) -> Result<DMatrix<f64>> {
    if p < 2 {
        return Err(Error::InvalidInput(format!("dimension {p} < 2")));
    }
    Ok(match model {
        CovModel::A09 => power_model(-0.9, p),
        CovModel::A06 => power_model(-0.6, p),
        CovModel::Dense => DMatrix::from_fn(p, p, |j, l| if j == l { 1.0 } else { 0.8 }),
        CovModel::Planar => {
            let (_, vecs) = sym_eigen(&power_model(-0.9, p));
            let total = p as f64;
            let rest = if p > 2 { (1.0 - PLANAR_SHARES[0] - PLANAR_SHARES[1]) * total / (p - 2) as f64 } else { 0.0 };
            let vals = DVector::from_fn(p, |i, _| if i < 2 { PLANAR_SHARES[i] * total } else { rest });
            let s = symmetrize(&(&vecs * DMatrix::from_diagonal(&vals) * vecs.transpose()));
            let d = s.diagonal().map(|v| 1.0 / v.sqrt());
            let mut c = DMatrix::from_fn(p, p, |j, l| s[(j, l)] * d[j] * d[l]);
            c.fill_diagonal(1.0);
            c
        }
    })
}

/// `n` draws from `N(mean, sigma)` as rows.
pub fn gaussian_sample(rng: &mut Rng, n: usize, mean: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cholesky(sigma)?.l();
    let p = mean.len();
    let z = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    let mut x = z * l.transpose();
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ContaminationKind {
    None,
    Cellwise,
    Casewise,
    Both,
}

impl fmt::Display for ContaminationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContaminationKind::None => "none",
            ContaminationKind::Cellwise => "cellwise",
            ContaminationKind::Casewise => "casewise",
            ContaminationKind::Both => "both",
        })
    }
}

impl FromStr for ContaminationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "clean" => Ok(ContaminationKind::None),
            "cellwise" => Ok(ContaminationKind::Cellwise),
            "casewise" => Ok(ContaminationKind::Casewise),
            "both" | "mixed" => Ok(ContaminationKind::Both),
            _ => Err(Error::InvalidInput(format!("unknown contamination '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContaminationSpec {
    pub kind: ContaminationKind,
    pub gamma: f64,
    pub cell_rate: f64,
    pub case_rate: f64,
}

/// Which cells and rows a contamination step altered.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthMask {
    pub cells: DMatrix<bool>,
    pub rows: Vec<bool>,
}

impl TruthMask {
    fn empty(n: usize, p: usize) -> Self {
        TruthMask {
            cells: DMatrix::from_element(n, p, false),
            rows: vec![false; n],
        }
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn row_count(&self) -> usize {
        self.rows.iter().filter(|&&r| r).count()
    }
}

fn count(rate: f64, total: usize) -> usize {
    ((rate * total as f64).round() as usize).min(total)
}

fn check_rate(name: &str, rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{name} {rate} outside [0, 1]")))
    }
}

/// Picks `m` distinct cells uniformly among the rows in `rows`.
fn pick_cells(rng: &mut Rng, rows: &[usize], p: usize, m: usize) -> Vec<(usize, usize)> {
    sample(rng, rows.len() * p, m)
        .into_iter()
        .map(|c| (rows[c / p], c % p))
        .collect()
}

/// Contaminates `x` (drawn from `N(0, sigma)`).
///
/// Cellwise: `round(cell_rate n p)` uniformly chosen cells are set to
/// `gamma`. Casewise: `round(case_rate n)` rows are redrawn from
/// `N(gamma sqrt(p) e / sqrt(e' sigma^-1 e), sigma)` with `e` the eigenvector
/// of the smallest eigenvalue. Both: the casewise rows are chosen first and
/// the cellwise cells are drawn from the remaining rows, with the cell count
/// still `round(cell_rate n p)`. `gamma = 0` leaves the data untouched.
pub fn contaminate(x: &DMatrix<f64>, sigma: &DMatrix<f64>, spec: &ContaminationSpec, rng: &mut Rng) -> Result<(DMatrix<f64>, TruthMask)> {
    check_rate("cell rate", spec.cell_rate)?;
    check_rate("case rate", spec.case_rate)?;
    let (n, p) = x.shape();
    let mut out = x.clone();
    let mut truth = TruthMask::empty(n, p);
    if spec.kind == ContaminationKind::None || spec.gamma == 0.0 {
        return Ok((out, truth));
    }
    let mut clean_rows: Vec<usize> = (0..n).collect();
    if matches!(spec.kind, ContaminationKind::Casewise | ContaminationKind::Both) {
        let m = count(spec.case_rate, n);
        let rows = sample(rng, n, m).into_vec();
        let (vals, vecs) = sym_eigen(sigma);
        let e = vecs.column(p - 1).into_owned();
        let shift = e * (spec.gamma * (p as f64).sqrt() * vals[p - 1].sqrt());
        let draws = gaussian_sample(rng, m, &shift, sigma)?;
        for (r, &i) in rows.iter().enumerate() {
            out.set_row(i, &draws.row(r));
            truth.rows[i] = true;
        }
        clean_rows.retain(|&i| !truth.rows[i]);
    }
    if matches!(spec.kind, ContaminationKind::Cellwise | ContaminationKind::Both) {
        let m = count(spec.cell_rate, n * p).min(clean_rows.len() * p);
        for (i, j) in pick_cells(rng, &clean_rows, p, m) {
            out[(i, j)] = spec.gamma;
            truth.cells[(i, j)] = true;
        }
    }
    Ok((out, truth))
}

/// Marks `round(na_rate n p)` cells as missing, never touching cells in
/// `exclude`, and resamples until every row and column keeps an observed
/// cell.
pub fn inject_na(x: &DMatrix<f64>, na_rate: f64, exclude: Option<&DMatrix<bool>>, rng: &mut Rng) -> Result<DataMatrix> {
    check_rate("missing rate", na_rate)?;
    let (n, p) = x.shape();
    let m = count(na_rate, n * p);
    if m == 0 {
        return Ok(DataMatrix::new(x.clone()));
    }
    let eligible: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .filter(|&(i, j)| !exclude.is_some_and(|e| e[(i, j)]))
        .collect();
    if eligible.len() < m {
        return Err(Error::InfeasibleNaRate { rate: na_rate });
    }
    for _ in 0..100 {
        let mut data = DataMatrix::new(x.clone());
        for c in sample(rng, eligible.len(), m) {
            let (i, j) = eligible[c];
            data.set_missing(i, j);
        }
        if data.check_coverage().is_ok() {
            return Ok(data);
        }
    }
    Err(Error::InfeasibleNaRate { rate: na_rate })
}

/// Contamination relative to the marginal robust location and scale of each
/// column: cells are set to `m_j + gamma s_j`, and casewise rows are redrawn
/// from `N(m + gamma s, diag(s^2))`. Casewise rows are chosen first and
/// cells come from the other rows.
pub fn contaminate_marginal(x: &DMatrix<f64>, spec: &ContaminationSpec, rng: &mut Rng) -> Result<(DMatrix<f64>, TruthMask)> {
    check_rate("cell rate", spec.cell_rate)?;
    check_rate("case rate", spec.case_rate)?;
    let (n, p) = x.shape();
    let params = RhoParams::default();
    let mut loc = DVector::zeros(p);
    let mut scale = DVector::zeros(p);
    for j in 0..p {
        let col = x.column(j);
        loc[j] = median(col.as_slice());
        scale[j] = centered_m_scale(col.as_slice(), &params).map_err(|_| Error::DegenerateScale { column: Some(j) })?;
    }
    let target = &loc + &scale * spec.gamma;
    let sigma = DMatrix::from_diagonal(&scale.map(|s| s * s));
    let mut out = x.clone();
    let mut truth = TruthMask::empty(n, p);
    if spec.kind == ContaminationKind::None {
        return Ok((out, truth));
    }
    let mut clean_rows: Vec<usize> = (0..n).collect();
    if matches!(spec.kind, ContaminationKind::Casewise | ContaminationKind::Both) {
        let m = count(spec.case_rate, n);
        let rows = sample(rng, n, m).into_vec();
        let draws = gaussian_sample(rng, m, &target, &sigma)?;
        for (r, &i) in rows.iter().enumerate() {
            out.set_row(i, &draws.row(r));
            truth.rows[i] = true;
        }
        clean_rows.retain(|&i| !truth.rows[i]);
    }
    if matches!(spec.kind, ContaminationKind::Cellwise | ContaminationKind::Both) {
        let m = count(spec.cell_rate, n * p).min(clean_rows.len() * p);
        for (i, j) in pick_cells(rng, &clean_rows, p, m) {
            out[(i, j)] = target[j];
            truth.cells[(i, j)] = true;
        }
    }
    Ok((out, truth))
}

/// Two linearly linked blocks: `X1 ~ N(0, I_p)`, `X2 = X1 W + E` with
/// Gaussian `W` and independent noise whose variance is the signal variance
/// of each column divided by `snr`.
pub fn planted_link(rng: &mut Rng, n: usize, p: usize, q: usize, snr: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let x1 = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    let w = DMatrix::<f64>::from_fn(p, q, |_, _| StandardNormal.sample(rng));
    let mut x2 = &x1 * &w;
    for l in 0..q {
        let sd = (w.column(l).norm_squared() / snr).sqrt();
        for i in 0..n {
            let e: f64 = StandardNormal.sample(rng);
            x2[(i, l)] += sd * e;
        }
    }
    (x1, x2)
}

/// Covariance estimate of a baseline method.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineEstimate {
    pub sigma_hat: DMatrix<f64>,
    pub center: DVector<f64>,
    pub ridge_delta: f64,
    pub delta_selection: DeltaSelection,
}

fn pairs(x: &DataMatrix, rows: &[usize], j: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    rows.iter()
        .filter_map(|&i| Some((x.get(i, j)?, x.get(i, l)?)))
        .unzip()
}

/// Covariance over pairwise complete observations (divisor `n_jl - 1`).
pub fn pairwise_covariance(x: &DataMatrix, rows: &[usize]) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    let mut s = DMatrix::zeros(p, p);
    for j in 0..p {
        for l in 0..=j {
            let (a, b) = pairs(x, rows, j, l);
            if a.len() < 2 {
                return Err(Error::InvalidInput(format!("columns {j} and {l} share fewer than 2 observed rows")));
            }
            let m = a.len() as f64;
            let ma = a.iter().sum::<f64>() / m;
            let mb = b.iter().sum::<f64>() / m;
            let c = a.iter().zip(&b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / (m - 1.0);
            s[(j, l)] = c;
            s[(l, j)] = c;
        }
    }
    Ok(s)
}

/// Spearman correlations of pairwise complete observations mapped by
/// `2 sin(pi r / 6)` and scaled by column M-scales.
pub fn pairwise_spearman_covariance(x: &DataMatrix, rows: &[usize]) -> Result<DMatrix<f64>> {
    let p = x.ncols();
    let params = RhoParams::default();
    let mut scale = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = rows.iter().filter_map(|&i| x.get(i, j)).collect();
        if col.len() < 3 {
            return Err(Error::EmptyColumn { column: j });
        }
        scale.push(centered_m_scale(&col, &params).map_err(|_| Error::DegenerateScale { column: Some(j) })?);
    }
    let mut s = DMatrix::zeros(p, p);
    for j in 0..p {
        s[(j, j)] = scale[j] * scale[j];
        for l in 0..j {
            let (a, b) = pairs(x, rows, j, l);
            let r = spearman_corr(&a, &b)?;
            let c = 2.0 * (std::f64::consts::PI * r / 6.0).sin() * scale[j] * scale[l];
            s[(j, l)] = c;
            s[(l, j)] = c;
        }
    }
    Ok(s)
}

fn column_locations(x: &DataMatrix, robust: bool) -> DVector<f64> {
    DVector::from_fn(x.ncols(), |j, _| {
        let col = x.column_values(j);
        if robust {
            median(&col)
        } else {
            col.iter().sum::<f64>() / col.len() as f64
        }
    })
}

fn ridged_baseline<F>(x: &DataMatrix, cv: &DeltaCvConfig, seed: u64, robust: bool, f: F) -> Result<BaselineEstimate>
where
    F: Fn(&DataMatrix, &[usize]) -> Result<DMatrix<f64>> + Sync,
{
    x.check_coverage()?;
    let all: Vec<usize> = (0..x.nrows()).collect();
    let full = f(x, &all)?;
    // pairwise matrices can be indefinite; only ridges that repair that are candidates
    let grid: Vec<f64> = cv
        .grid
        .iter()
        .copied()
        .filter(|&d| ridge_regularize(&full, d).is_ok_and(|s| cholesky(&s).is_ok()))
        .collect();
    if grid.is_empty() {
        return Err(Error::NotPositiveDefinite);
    }
    let cv = DeltaCvConfig { grid, ..cv.clone() };
    let sel = cv_delta(x.nrows(), &cv, seed, |rows| f(x, rows))?;
    Ok(BaselineEstimate {
        sigma_hat: ridge_regularize(&full, sel.delta)?,
        center: column_locations(x, robust),
        ridge_delta: sel.delta,
        delta_selection: sel,
    })
}

/// Ridge-regularized pairwise complete sample covariance. Grid values whose
/// ridged full-sample matrix is not positive definite are skipped.
pub fn baseline_rcov(x: &DataMatrix, cv: &DeltaCvConfig, seed: u64) -> Result<BaselineEstimate> {
    ridged_baseline(x, cv, seed, false, pairwise_covariance)
}

/// Ridge-regularized Spearman-based covariance.
pub fn baseline_spearman(x: &DataMatrix, cv: &DeltaCvConfig, seed: u64) -> Result<BaselineEstimate> {
    ridged_baseline(x, cv, seed, true, pairwise_spearman_covariance)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    CellRCov,
    RCov,
    Spearman,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::CellRCov, EstimatorKind::RCov, EstimatorKind::Spearman];
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::CellRCov => "cellRCov",
            EstimatorKind::RCov => "RCov",
            EstimatorKind::Spearman => "Spearman",
        })
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cellrcov" => Ok(EstimatorKind::CellRCov),
            "rcov" => Ok(EstimatorKind::RCov),
            "spearman" => Ok(EstimatorKind::Spearman),
            _ => Err(Error::InvalidInput(format!("unknown estimator '{s}'"))),
        }
    }
}

/// Covariance estimate of `x` by one of the benchmarked methods.
pub fn run_estimator(kind: EstimatorKind, x: &DataMatrix, seed: u64) -> Result<DMatrix<f64>> {
    let cv = DeltaCvConfig::default();
    match kind {
        EstimatorKind::CellRCov => estimate(x, &EstimatorConfig { seed, ..Default::default() }).map(|e| e.sigma_hat),
        EstimatorKind::RCov => baseline_rcov(x, &cv, seed).map(|e| e.sigma_hat),
        EstimatorKind::Spearman => baseline_spearman(x, &cv, seed).map(|e| e.sigma_hat),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub model: CovModel,
    pub p: usize,
    pub n: usize,
    pub contamination: ContaminationKind,
    pub gamma: f64,
    pub cell_rate: f64,
    pub case_rate: f64,
    pub na_rate: f64,
    pub replications: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
}

impl ExperimentSpec {
    /// A09, `n = 100`, `p = 30`, rates 20% (10% each when mixed).
    pub fn new(contamination: ContaminationKind, gamma: f64) -> Self {
        let (cell_rate, case_rate) = match contamination {
            ContaminationKind::Both => (0.1, 0.1),
            _ => (0.2, 0.2),
        };
        ExperimentSpec {
            model: CovModel::A09,
            p: 30,
            n: 100,
            contamination,
            gamma,
            cell_rate,
            case_rate,
            na_rate: 0.0,
            replications: 20,
            seed: 1,
            estimators: EstimatorKind::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate("cell rate", self.cell_rate)?;
        check_rate("case rate", self.case_rate)?;
        check_rate("missing rate", self.na_rate)?;
        let uses_cells = matches!(self.contamination, ContaminationKind::Cellwise | ContaminationKind::Both);
        if uses_cells && self.cell_rate + self.na_rate > 1.0 {
            return Err(Error::InvalidInput("cell rate + missing rate exceeds 1".into()));
        }
        if self.p < 2 || self.n < 5 {
            return Err(Error::InvalidInput(format!("need n >= 5 and p >= 2, got n = {}, p = {}", self.n, self.p)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if self.replications == 0 || self.estimators.is_empty() {
            return Err(Error::InvalidInput("need at least one replication and one estimator".into()));
        }
        Ok(())
    }

    /// Scenario label used in result tables.
    pub fn scenario(&self) -> String {
        if self.na_rate > 0.0 {
            format!("{}_na{}", self.contamination, (self.na_rate * 100.0).round())
        } else {
            self.contamination.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    /// Mean KL over successful replications (NaN when none succeeded).
    pub mean_kl: f64,
    pub se: f64,
    pub failures: usize,
    /// KL per replication, `None` for failed runs.
    pub kl: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub summaries: Vec<EstimatorSummary>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

pub const CSV_HEADER: &str = "model,p,n,scenario,gamma,estimator,mean_kl,se,failures";

impl ExperimentResult {
    /// One CSV line per estimator, matching [`CSV_HEADER`].
    pub fn csv_lines(&self) -> Vec<String> {
        let s = &self.spec;
        self.summaries
            .iter()
            .map(|e| {
                format!(
                    "{},{},{},{},{},{},{},{},{}",
                    s.model,
                    s.p,
                    s.n,
                    s.scenario(),
                    s.gamma,
                    e.estimator,
                    e.mean_kl,
                    e.se,
                    e.failures
                )
            })
            .collect()
    }

    pub fn summary(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|s| s.estimator == kind)
    }
}

/// One replication: data, contamination, missingness and the contaminated
/// data handed to the estimators.
pub fn replicate(spec: &ExperimentSpec, sigma: &DMatrix<f64>, r: usize) -> Result<(DataMatrix, TruthMask)> {
    let r = r as u64;
    let mut data_rng = stream(spec.seed, tag::DATA, r);
    let clean = gaussian_sample(&mut data_rng, spec.n, &DVector::zeros(spec.p), sigma)?;
    let cont = ContaminationSpec {
        kind: spec.contamination,
        gamma: spec.gamma,
        cell_rate: spec.cell_rate,
        case_rate: spec.case_rate,
    };
    let (x, truth) = contaminate(&clean, sigma, &cont, &mut stream(spec.seed, tag::CONTAMINATION, r))?;
    let data = inject_na(&x, spec.na_rate, Some(&truth.cells), &mut stream(spec.seed, tag::MISSING, r))?;
    Ok((data, truth))
}

/// Runs every replication and estimator and scores them by KL discrepancy.
/// Replication failures are counted, not propagated.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let start = Instant::now();
    let sigma = make_sigma(spec.model, spec.p)?;
    let per_rep: Vec<Vec<Option<f64>>> = (0..spec.replications)
        .into_par_iter()
        .map(|r| {
            let Ok((data, _)) = replicate(spec, &sigma, r) else {
                return vec![None; spec.estimators.len()];
            };
            let seed = derive_seed(spec.seed, tag::ESTIMATOR, r as u64);
            spec.estimators
                .iter()
                .map(|&kind| {
                    let s = run_estimator(kind, &data, seed).ok()?;
                    kl_discrepancy(&s, &sigma).ok().filter(|v| v.is_finite())
                })
                .collect()
        })
        .collect();
    let summaries = spec
        .estimators
        .iter()
        .enumerate()
        .map(|(e, &kind)| {
            let kl: Vec<Option<f64>> = per_rep.iter().map(|rep| rep[e]).collect();
            let ok: Vec<f64> = kl.iter().flatten().copied().collect();
            let m = ok.len() as f64;
            let mean = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / m };
            let se = if ok.len() < 2 {
                f64::NAN
            } else {
                (ok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt() / m.sqrt()
            };
            EstimatorSummary {
                estimator: kind,
                mean_kl: mean,
                se,
                failures: kl.len() - ok.len(),
                kl,
            }
        })
        .collect();
    Ok(ExperimentResult {
        spec: spec.clone(),
        summaries,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{covariance, min_eigenvalue};
    use crate::rng::rng_from_seed;

    #[test]
    fn model_examples() {
        assert_eq!(make_sigma(CovModel::A09, 2).unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, -0.9, -0.9, 1.0]));
        assert_eq!(
            make_sigma(CovModel::Dense, 3).unwrap(),
            DMatrix::from_row_slice(3, 3, &[1.0, 0.8, 0.8, 0.8, 1.0, 0.8, 0.8, 0.8, 1.0])
        );
        assert!((make_sigma(CovModel::A06, 3).unwrap()[(0, 2)] - 0.36).abs() < 1e-15);
        for model in CovModel::ALL {
            let s = make_sigma(model, 30).unwrap();
            assert!(min_eigenvalue(&s) > 0.0, "{model}");
            assert!((&s - s.transpose()).abs().max() < 1e-12);
            assert!(s.diagonal().iter().all(|&d| (d - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn planar_model_is_nearly_rank_two() {
        let (vals, _) = sym_eigen(&make_sigma(CovModel::Planar, 30).unwrap());
        let share = (vals[0] + vals[1]) / vals.sum();
        assert!(share > 0.85, "{share}");
    }

    #[test]
    fn cellwise_contamination_counts_and_gamma_zero() {
        let sigma = make_sigma(CovModel::A09, 30).unwrap();
        let mut rng = rng_from_seed(1);
        let x = gaussian_sample(&mut rng, 100, &DVector::zeros(30), &sigma).unwrap();
        let spec = ContaminationSpec { kind: ContaminationKind::Cellwise, gamma: 6.0, cell_rate: 0.2, case_rate: 0.2 };
        let (y, truth) = contaminate(&x, &sigma, &spec, &mut rng).unwrap();
        assert_eq!(truth.cell_count(), 600);
        for i in 0..100 {
            for j in 0..30 {
                if truth.cells[(i, j)] {
                    assert_eq!(y[(i, j)], 6.0);
                } else {
                    assert_eq!(y[(i, j)], x[(i, j)]);
                }
            }
        }
        let zero = ContaminationSpec { gamma: 0.0, ..spec };
        let (y0, t0) = contaminate(&x, &sigma, &zero, &mut rng).unwrap();
        assert_eq!(y0, x);
        assert_eq!(t0.cell_count(), 0);
        let all = ContaminationSpec { gamma: 7.0, cell_rate: 1.0, ..spec };
        let (y1, _) = contaminate(&x, &sigma, &all, &mut rng).unwrap();
        assert!(y1.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn casewise_shift_has_mahalanobis_norm_gamma_sqrt_p() {
        let p = 10;
        let sigma = make_sigma(CovModel::A09, p).unwrap();
        let (vals, vecs) = sym_eigen(&sigma);
        let e = vecs.column(p - 1).into_owned();
        let gamma = 3.0;
        let shift = &e * (gamma * (p as f64).sqrt() * vals[p - 1].sqrt());
        let inv = sigma.clone().try_inverse().unwrap();
        let md = (shift.transpose() * &inv * &shift)[(0, 0)].sqrt();
        assert!((md - gamma * (p as f64).sqrt()).abs() < 1e-8);
        let explicit = &e * (gamma * (p as f64).sqrt() / (e.transpose() * &inv * &e)[(0, 0)].sqrt());
        assert!((&shift - explicit).abs().max() < 1e-10);

        let mut rng = rng_from_seed(2);
        let x = gaussian_sample(&mut rng, 4000, &DVector::zeros(p), &sigma).unwrap();
        let spec = ContaminationSpec { kind: ContaminationKind::Casewise, gamma, cell_rate: 0.0, case_rate: 0.25 };
        let (y, truth) = contaminate(&x, &sigma, &spec, &mut rng).unwrap();
        assert_eq!(truth.row_count(), 1000);
        let mut mean = DVector::zeros(p);
        for i in (0..4000).filter(|&i| truth.rows[i]) {
            mean += y.row(i).transpose();
        }
        mean /= 1000.0;
        let md = (mean.transpose() * &inv * &mean)[(0, 0)].sqrt();
        assert!((md - gamma * (p as f64).sqrt()).abs() < 1.5, "{md}");
    }

    #[test]
    fn mixed_contamination_uses_disjoint_rows() {
        let sigma = make_sigma(CovModel::A09, 30).unwrap();
        let mut rng = rng_from_seed(3);
        let x = gaussian_sample(&mut rng, 100, &DVector::zeros(30), &sigma).unwrap();
        let spec = ContaminationSpec { kind: ContaminationKind::Both, gamma: 6.0, cell_rate: 0.1, case_rate: 0.1 };
        let (_, truth) = contaminate(&x, &sigma, &spec, &mut rng).unwrap();
        assert_eq!(truth.row_count(), 10);
        assert_eq!(truth.cell_count(), 300);
        for i in 0..100 {
            if truth.rows[i] {
                assert!(truth.cells.row(i).iter().all(|&c| !c));
            }
        }
        let na = inject_na(&x, 0.2, Some(&truth.cells), &mut rng).unwrap();
        assert_eq!(na.observed_count(), 3000 - 600);
        for i in 0..100 {
            for j in 0..30 {
                assert!(!(truth.cells[(i, j)] && !na.is_observed(i, j)));
            }
        }
    }

    #[test]
    fn missingness_counts_and_infeasibility() {
        let x = DMatrix::from_element(100, 30, 1.0);
        let mut rng = rng_from_seed(4);
        assert!(inject_na(&x, 0.0, None, &mut rng).unwrap().is_complete());
        let d = inject_na(&x, 0.2, None, &mut rng).unwrap();
        assert_eq!(3000 - d.observed_count(), 600);
        d.check_coverage().unwrap();
        assert!(matches!(inject_na(&x, 1.0, None, &mut rng), Err(Error::InfeasibleNaRate { .. })));
    }

    #[test]
    fn rcov_matches_sample_covariance_on_complete_data() {
        let mut rng = rng_from_seed(5);
        let x = gaussian_sample(&mut rng, 50, &DVector::zeros(4), &make_sigma(CovModel::A06, 4).unwrap()).unwrap();
        let all: Vec<usize> = (0..50).collect();
        let s = pairwise_covariance(&DataMatrix::new(x.clone()), &all).unwrap();
        assert!((s - covariance(&x, 1)).abs().max() < 1e-10);
    }

    #[test]
    fn rcov_is_positive_definite_after_ridge_with_missing_cells() {
        let sigma = make_sigma(CovModel::A09, 30).unwrap();
        let mut rng = rng_from_seed(6);
        let x = gaussian_sample(&mut rng, 100, &DVector::zeros(30), &sigma).unwrap();
        let data = inject_na(&x, 0.2, None, &mut rng).unwrap();
        let est = baseline_rcov(&data, &DeltaCvConfig::default(), 1).unwrap();
        let all: Vec<usize> = (0..100).collect();
        let raw = pairwise_covariance(&data, &all).unwrap();
        assert!(min_eigenvalue(&est.sigma_hat) > 0.0);
        // small ridges leave the pairwise matrix indefinite here, so they are excluded
        assert!(min_eigenvalue(&raw) < 0.0);
        assert!(min_eigenvalue(&ridge_regularize(&raw, 0.05).unwrap()) < 0.0);
        assert!(est.delta_selection.grid.iter().all(|&d| min_eigenvalue(&ridge_regularize(&raw, d).unwrap()) > 0.0));
        assert!(est.ridge_delta >= 0.2 - 1e-12);
    }

    #[test]
    fn rcov_rejects_empty_column() {
        let mut data = DataMatrix::new(DMatrix::from_fn(10, 3, |i, j| (i * j) as f64));
        for i in 0..10 {
            data.set_missing(i, 2);
        }
        assert!(baseline_rcov(&data, &DeltaCvConfig::default(), 1).is_err());
    }

    #[test]
    fn spearman_baseline_recovers_gaussian_correlation() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let mut rng = rng_from_seed(7);
        let x = gaussian_sample(&mut rng, 20000, &DVector::zeros(2), &sigma).unwrap();
        let all: Vec<usize> = (0..20000).collect();
        let data = DataMatrix::new(x.clone());
        let s = pairwise_spearman_covariance(&data, &all).unwrap();
        let r = s[(0, 1)] / (s[(0, 0)] * s[(1, 1)]).sqrt();
        assert!((r - 0.5).abs() < 0.02, "{r}");
        let params = RhoParams::default();
        for j in 0..2 {
            let m = centered_m_scale(x.column(j).as_slice(), &params).unwrap();
            assert_eq!(s[(j, j)], m * m);
        }
        let warped = DataMatrix::new(DMatrix::from_fn(20000, 2, |i, j| if j == 0 { x[(i, 0)].exp() } else { x[(i, 1)].powi(3) }));
        let t = pairwise_spearman_covariance(&warped, &all).unwrap();
        let rt = t[(0, 1)] / (t[(0, 0)] * t[(1, 1)]).sqrt();
        assert!((rt - r).abs() < 0.02);
    }

    #[test]
    fn marginal_contamination_targets() {
        let mut rng = rng_from_seed(8);
        let x = gaussian_sample(&mut rng, 200, &DVector::zeros(3), &DMatrix::identity(3, 3)).unwrap();
        let spec = ContaminationSpec { kind: ContaminationKind::Both, gamma: 6.0, cell_rate: 0.1, case_rate: 0.1 };
        let (y, truth) = contaminate_marginal(&x, &spec, &mut rng).unwrap();
        assert_eq!(truth.row_count(), 20);
        assert_eq!(truth.cell_count(), 60);
        let params = RhoParams::default();
        for j in 0..3 {
            let col = x.column(j);
            let target = median(col.as_slice()) + 6.0 * centered_m_scale(col.as_slice(), &params).unwrap();
            for i in 0..200 {
                if truth.cells[(i, j)] {
                    assert_eq!(y[(i, j)], target);
                }
            }
        }
    }

    #[test]
    fn planted_link_snr() {
        let mut rng = rng_from_seed(9);
        let (x1, x2) = planted_link(&mut rng, 5000, 4, 3, 10.0);
        assert_eq!(x2.shape(), (5000, 3));
        let beta = (x1.transpose() * &x1).try_inverse().unwrap() * x1.transpose() * &x2;
        let resid = &x2 - &x1 * beta;
        for l in 0..3 {
            let total = x2.column(l).norm_squared();
            let r2 = 1.0 - resid.column(l).norm_squared() / total;
            assert!((r2 - 10.0 / 11.0).abs() < 0.02, "{r2}");
        }
    }

    #[test]
    fn experiment_smoke_and_determinism() {
        let spec = ExperimentSpec {
            replications: 2,
            p: 6,
            n: 40,
            estimators: vec![EstimatorKind::RCov, EstimatorKind::Spearman],
            ..ExperimentSpec::new(ContaminationKind::None, 0.0)
        };
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.csv_lines(), b.csv_lines());
        assert_eq!(a.summaries, b.summaries);
        assert_eq!(a.csv_lines().len(), 2);
        let rcov = a.summary(EstimatorKind::RCov).unwrap();
        assert!(rcov.mean_kl.is_finite() && rcov.failures == 0);
        assert!(a.csv_lines()[0].starts_with("A09,6,40,none,0,RCov,"));
    }

    #[test]
    fn experiment_mean_ignores_replication_order() {
        let spec = ExperimentSpec {
            replications: 3,
            p: 5,
            n: 30,
            estimators: vec![EstimatorKind::RCov],
            ..ExperimentSpec::new(ContaminationKind::Cellwise, 4.0)
        };
        let res = run_experiment(&spec).unwrap();
        let s = &res.summaries[0];
        let mut kl: Vec<f64> = s.kl.iter().flatten().copied().collect();
        kl.reverse();
        assert!((kl.iter().sum::<f64>() / 3.0 - s.mean_kl).abs() < 1e-12);
    }

    #[test]
    fn invalid_spec_is_rejected() {
        let spec = ExperimentSpec { cell_rate: 0.9, na_rate: 0.2, ..ExperimentSpec::new(ContaminationKind::Cellwise, 6.0) };
        assert!(run_experiment(&spec).is_err());
        let spec = ExperimentSpec { gamma: -1.0, ..ExperimentSpec::new(ContaminationKind::Cellwise, 6.0) };
        assert!(spec.validate().is_err());
    }
}
