use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// The M-scale equation has no positive root.
    #[error("degenerate scale{}", column.map(|j| format!(" in column {j}")).unwrap_or_default())]
    DegenerateScale { column: Option<usize> },

    #[error("row {row} has no observed cells")]
    EmptyRow { row: usize },

    #[error("column {column} has no observed cells")]
    EmptyColumn { column: usize },

    #[error("observed loadings are rank deficient (need rank {rank})")]
    RankDeficient { rank: usize },

    #[error("no convergence after {} iterations", trace.len())]
    NoConvergence { trace: Vec<f64> },

    #[error("residual scale of column {column} is degenerate")]
    DegenerateColumn { column: usize },

    #[error("scatter matrix of the support is singular")]
    SingularScatter,

    #[error("too few cases: n = {n} must exceed 2k = {}", 2 * k)]
    TooFewCases { n: usize, k: usize },

    #[error("ridge parameter {0} outside (0, 1]")]
    InvalidDelta(f64),

    #[error("residual covariance normalizer is not positive")]
    DegenerateNormalizer,

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("labels contain a single class")]
    SingleClass,

    #[error("input is constant")]
    ConstantInput,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("covariance block is not positive definite")]
    BlockNotPD,

    #[error("a cross-validation fold has fewer than 3 test cases")]
    SingleCaseFold,

    #[error("cannot place missing cells at rate {rate} while keeping every row and column observed")]
    InfeasibleNaRate { rate: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage}: only {survived} of {total} runs succeeded (need {required})")]
    TooManyFailures {
        stage: &'static str,
        survived: usize,
        total: usize,
        required: usize,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Strips stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
