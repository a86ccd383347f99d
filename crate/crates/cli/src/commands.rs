use std::path::Path;

use cellrcov::cca::{cellrcca_cv, cellrcca_fit, cellrcca_transform, CcaCvResult, CcaMethod};
use cellrcov::cellpca::CellPcaOptions;
use cellrcov::cellrcov::{
    estimate as fit_covariance, select_rank, CovarianceEstimate, DeltaCvConfig, EstimatorConfig, RankChoice, RankSelection,
    RankSelectionConfig, RidgeChoice, ScoreScatter,
};
use cellrcov::kernels::{robust_standardize, Rho, RhoParams};
use cellrcov::metrics::roc_auc;
use cellrcov::simlab::{run_experiment, ContaminationKind, CovModel, EstimatorKind, ExperimentResult, ExperimentSpec, CSV_HEADER};
use cellrcov::{DataMatrix, Error};
use clap::{Args, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::table::{matrix_csv, read_table, rows_of, write_atomic, write_csv, write_json, Table};
use crate::{CliError, EstimatorArgs, Format, DEFAULT_SEED};

/// Estimator error, with the column name when the error points at one.
fn estimator_error(e: Error, columns: &[String]) -> CliError {
    let column = match e.root() {
        Error::DegenerateScale { column: Some(j) } | Error::EmptyColumn { column: j } | Error::DegenerateColumn { column: j } => {
            columns.get(*j)
        }
        _ => None,
    };
    match column {
        Some(name) => CliError::Input(format!("{e} ('{name}')")),
        None => CliError::Input(e.to_string()),
    }
}

fn estimator_config(est: &EstimatorArgs) -> Result<EstimatorConfig, CliError> {
    let params = RhoParams::new(est.rho_b, est.rho_c, est.rho_q1, est.rho_q2).map_err(|e| CliError::Input(e.to_string()))?;
    if !(0.5..1.0).contains(&est.alpha) {
        return Err(CliError::Input(format!("--alpha {} outside [0.5, 1)", est.alpha)));
    }
    if let Some(d) = est.delta {
        if !(d > 0.0 && d <= 1.0) {
            return Err(CliError::Input(format!("--delta {d} outside (0, 1]")));
        }
    }
    Ok(EstimatorConfig {
        rank: est.rank.map_or(RankChoice::Auto, RankChoice::Fixed),
        ridge: est.delta.map_or(RidgeChoice::Auto, RidgeChoice::Fixed),
        score_scatter: ScoreScatter::Mcd { alpha: est.alpha },
        pca: CellPcaOptions {
            rho1: Rho::Tanh(params),
            rho2: Rho::Tanh(params),
            scale: params,
            ..Default::default()
        },
        seed: est.seed,
        ..Default::default()
    })
}

fn load(path: &Path, est: &EstimatorArgs) -> Result<Table, CliError> {
    read_table(path, &est.na_token, None).map(|(t, _)| t)
}

fn fit(table: &Table, config: &EstimatorConfig) -> Result<CovarianceEstimate, CliError> {
    fit_covariance(&table.data, config).map_err(|e| estimator_error(e, &table.columns))
}

#[derive(Serialize)]
struct EstimateOutput<'a> {
    columns: &'a [String],
    sigma_hat: Vec<Vec<f64>>,
    center: Vec<f64>,
    scales: &'a [f64],
    scale_centers: &'a [f64],
    rank_k: usize,
    ridge_delta: f64,
    b_norm: f64,
    converged: bool,
    rank_selection: Option<&'a RankSelection>,
    cell_weights: Vec<Vec<f64>>,
    case_weights: Vec<f64>,
    /// `[row, column]` of observed cells with weight below 0.5.
    flagged_cells: Vec<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    imputed: Option<Vec<Vec<f64>>>,
}

pub fn estimate(input: &Path, output: &Path, est: &EstimatorArgs, imputed: bool, format: Format) -> Result<(), CliError> {
    let config = estimator_config(est)?;
    let table = load(input, est)?;
    let e = fit(&table, &config)?;
    if format == Format::Csv {
        return matrix_csv(output, &table.columns, &e.sigma_hat);
    }
    let w = &e.fit.cell_weights;
    let flagged = (0..w.nrows())
        .flat_map(|i| (0..w.ncols()).map(move |j| (i, j)))
        .filter(|&(i, j)| table.data.is_observed(i, j) && w[(i, j)] < 0.5)
        .map(|(i, j)| [i, j])
        .collect();
    let out = EstimateOutput {
        columns: &table.columns,
        sigma_hat: rows_of(&e.sigma_hat),
        center: e.center.iter().copied().collect(),
        scales: &e.scales.values,
        scale_centers: &e.scales.centers,
        rank_k: e.rank_k,
        ridge_delta: e.ridge_delta,
        b_norm: e.b_norm,
        converged: e.fit.converged,
        rank_selection: e.rank_selection.as_ref(),
        cell_weights: rows_of(w),
        case_weights: e.fit.case_weights.iter().copied().collect(),
        flagged_cells: flagged,
        imputed: imputed.then(|| rows_of(&e.imputed())),
    };
    write_json(output, &out)
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Squared Mahalanobis distance over the observed cells of each row, with
/// the number of cells used.
fn observed_distances(x: &DataMatrix, center: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<Vec<(f64, usize)>, CliError> {
    let mut out = Vec::with_capacity(x.nrows());
    for i in 0..x.nrows() {
        let obs: Vec<usize> = (0..x.ncols()).filter(|&j| x.is_observed(i, j)).collect();
        if obs.is_empty() {
            return Err(CliError::Input(format!("scoring row {} has no observed cells", i + 1)));
        }
        let sub = DMatrix::from_fn(obs.len(), obs.len(), |a, b| sigma[(obs[a], obs[b])]);
        let dev = DVector::from_iterator(obs.len(), obs.iter().map(|&j| x.values()[(i, j)] - center[j]));
        let chol = sub.cholesky().ok_or_else(|| CliError::Input("covariance estimate is not positive definite".into()))?;
        out.push((dev.dot(&chol.solve(&dev)), obs.len()));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Roc {
    auc: f64,
    fpr: Vec<f64>,
    tpr: Vec<f64>,
}

#[derive(Serialize)]
struct DetectOutput {
    quantile: f64,
    /// Distance cutoff for fully observed cases.
    threshold: f64,
    distances: Vec<f64>,
    flagged: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    roc: Option<Roc>,
}

pub fn detect(
    train: &Path,
    score: Option<&Path>,
    output: &Path,
    labels: Option<&str>,
    quantile: f64,
    est: &EstimatorArgs,
    format: Format,
) -> Result<(), CliError> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(CliError::Input(format!("--threshold {quantile} outside (0, 1)")));
    }
    let config = estimator_config(est)?;
    let train_table = load(train, est)?;
    let (scoring, raw_labels) = match score {
        Some(path) => read_table(path, &est.na_token, labels)?,
        None if labels.is_some() => read_table(train, &est.na_token, labels)?,
        None => (load(train, est)?, None),
    };
    // a label column in the training file is not a feature
    let train_table = match labels {
        Some(name) if train_table.columns.iter().any(|c| c == name) => read_table(train, &est.na_token, Some(name))?.0,
        _ => train_table,
    };
    if scoring.columns != train_table.columns {
        return Err(CliError::Input(format!(
            "scoring columns {:?} do not match training columns {:?}",
            scoring.columns, train_table.columns
        )));
    }
    let e = fit(&train_table, &config)?;
    let d2 = observed_distances(&scoring.data, &e.center, &e.sigma_hat)?;
    let cutoff = |df: usize| ChiSquared::new(df as f64).expect("df >= 1").inverse_cdf(quantile).sqrt();
    let p = scoring.columns.len();
    let distances: Vec<f64> = d2.iter().map(|&(d, _)| d.sqrt()).collect();
    let flagged: Vec<bool> = d2.iter().map(|&(d, m)| d.sqrt() > cutoff(m)).collect();
    let truth = match raw_labels {
        Some(raw) => Some(
            raw.iter()
                .enumerate()
                .map(|(i, s)| parse_label(s).ok_or_else(|| CliError::Input(format!("row {}: label '{s}' is not 0/1", i + 1))))
                .collect::<Result<Vec<bool>, _>>()?,
        ),
        None => None,
    };
    let roc = match &truth {
        Some(t) => {
            let curve = roc_auc(&distances, t).map_err(|e| CliError::Input(e.to_string()))?;
            Some(Roc {
                auc: curve.auc,
                fpr: curve.fpr,
                tpr: curve.tpr,
            })
        }
        None => None,
    };
    if format == Format::Csv {
        let mut header = vec!["case".to_string(), "distance".to_string(), "flagged".to_string()];
        if truth.is_some() {
            header.push("label".into());
        }
        let rows: Vec<Vec<String>> = (0..distances.len())
            .map(|i| {
                let mut r = vec![(i + 1).to_string(), distances[i].to_string(), flagged[i].to_string()];
                if let Some(t) = &truth {
                    r.push(t[i].to_string());
                }
                r
            })
            .collect();
        return write_csv(output, &header, &rows);
    }
    write_json(
        output,
        &DetectOutput {
            quantile,
            threshold: cutoff(p),
            distances,
            flagged,
            roc,
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CcaKind {
    Cellrcov,
    Ridge,
}

#[derive(Serialize)]
struct CcaOutput<'a> {
    x1_columns: &'a [String],
    x2_columns: &'a [String],
    correlations: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    center: Vec<f64>,
    u: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    cv: Option<CcaCvResult>,
}

#[allow(clippy::too_many_arguments)]
pub fn cca(
    x1: &Path,
    x2: &Path,
    output: &Path,
    k: usize,
    folds: Option<usize>,
    kind: CcaKind,
    est: &EstimatorArgs,
    format: Format,
) -> Result<(), CliError> {
    let config = estimator_config(est)?;
    let t1 = load(x1, est)?;
    let t2 = load(x2, est)?;
    if t1.data.nrows() != t2.data.nrows() {
        return Err(CliError::Input(format!(
            "{} has {} rows but {} has {}",
            x1.display(),
            t1.data.nrows(),
            x2.display(),
            t2.data.nrows()
        )));
    }
    let (p, q) = (t1.columns.len(), t2.columns.len());
    if k == 0 || k > p.min(q) {
        return Err(CliError::Input(format!("--k {k} must be between 1 and min(p, q) = {}", p.min(q))));
    }
    let method = match kind {
        CcaKind::Cellrcov => CcaMethod::CellRCov(config),
        CcaKind::Ridge => CcaMethod::Ridge {
            cv: DeltaCvConfig::default(),
            seed: est.seed,
        },
    };
    let joint_columns: Vec<String> = t1.columns.iter().chain(&t2.columns).cloned().collect();
    let result = cellrcca_fit(&t1.data, &t2.data, k, &method).map_err(|e| estimator_error(e, &joint_columns))?;
    let (u, v) = cellrcca_transform(&result, &t1.data, &t2.data).map_err(|e| CliError::Input(e.to_string()))?;
    let cv = match folds {
        Some(f) => Some(cellrcca_cv(&t1.data, &t2.data, k, f, &method, est.seed).map_err(|e| CliError::Input(e.to_string()))?),
        None => None,
    };
    if format == Format::Csv {
        let header: Vec<String> = (1..=k).map(|l| format!("u{l}")).chain((1..=k).map(|l| format!("v{l}"))).collect();
        let joint = DMatrix::from_fn(u.nrows(), 2 * k, |i, c| if c < k { u[(i, c)] } else { v[(i, c - k)] });
        return matrix_csv(output, &header, &joint);
    }
    write_json(
        output,
        &CcaOutput {
            x1_columns: &t1.columns,
            x2_columns: &t2.columns,
            correlations: result.correlations.iter().copied().collect(),
            a: rows_of(&result.a),
            b: rows_of(&result.b),
            center: result.center.iter().copied().collect(),
            u: rows_of(&u),
            v: rows_of(&v),
            cv,
        },
    )
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Covariance models (A09, A06, planar, dense).
    #[arg(long, value_delimiter = ',', default_value = "A09")]
    pub model: Vec<CovModel>,
    /// Dimensions.
    #[arg(long, value_delimiter = ',', default_value = "30")]
    pub p: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// none, cellwise, casewise or both.
    #[arg(long, default_value = "cellwise")]
    pub contamination: ContaminationKind,
    /// Contamination severities.
    #[arg(long, value_delimiter = ',', default_value = "6")]
    pub gamma: Vec<f64>,
    /// Fraction of contaminated cells (default 0.2, or 0.1 for both).
    #[arg(long)]
    pub cell_rate: Option<f64>,
    /// Fraction of contaminated cases (default 0.2, or 0.1 for both).
    #[arg(long)]
    pub case_rate: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub na_rate: f64,
    #[arg(long, default_value_t = 20)]
    pub replications: usize,
    /// Estimators to compare (cellRCov, RCov, Spearman).
    #[arg(long, value_delimiter = ',', default_value = "cellRCov,RCov,Spearman")]
    pub estimators: Vec<EstimatorKind>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub output: std::path::PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let mut results: Vec<ExperimentResult> = Vec::new();
    for &model in &args.model {
        for &p in &args.p {
            for &gamma in &args.gamma {
                let base = ExperimentSpec::new(args.contamination, gamma);
                let spec = ExperimentSpec {
                    model,
                    p,
                    n: args.n,
                    cell_rate: args.cell_rate.unwrap_or(base.cell_rate),
                    case_rate: args.case_rate.unwrap_or(base.case_rate),
                    na_rate: args.na_rate,
                    replications: args.replications,
                    seed: args.seed,
                    estimators: args.estimators.clone(),
                    ..base
                };
                results.push(run_experiment(&spec).map_err(|e| CliError::Input(e.to_string()))?);
            }
        }
    }
    match args.format {
        Format::Json => write_json(&args.output, &results),
        Format::Csv => {
            let mut text = String::from(CSV_HEADER);
            text.push('\n');
            for line in results.iter().flat_map(|r| r.csv_lines()) {
                text.push_str(&line);
                text.push('\n');
            }
            write_atomic(&args.output, text.as_bytes())
        }
    }
}

pub fn rank(input: &Path, output: &Path, est: &EstimatorArgs, k_max: Option<usize>, format: Format) -> Result<(), CliError> {
    let config = estimator_config(est)?;
    let table = load(input, est)?;
    let (z, _) = robust_standardize(&table.data, &config.pca.scale).map_err(|e| estimator_error(e, &table.columns))?;
    let rs = RankSelectionConfig {
        k_max,
        ..config.rank_selection.clone()
    };
    let sel = select_rank(&z, &config.pca, &rs, config.seed).map_err(|e| estimator_error(e, &table.columns))?;
    if format == Format::Csv {
        let header = ["rank", "gap", "reference"].map(String::from);
        let rows: Vec<Vec<String>> = sel
            .observed_gaps
            .iter()
            .zip(&sel.reference_quantiles)
            .enumerate()
            .map(|(s, (g, q))| vec![(s + 1).to_string(), g.to_string(), q.to_string()])
            .collect();
        return write_csv(output, &header, &rows);
    }
    write_json(output, &sel)
}
